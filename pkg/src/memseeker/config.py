"""Run configuration in flat ``section.key = value`` text."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .tasks import ConfigError, DatasetSpec
from .vocab import Vocabulary

__all__ = ["TrainConfig", "EvalConfig", "PathsConfig", "RunConfig", "ConfigError",
           "parse_config", "parse_config_text", "apply_overrides"]


@dataclass
class TrainConfig:
    stage: str = "all"  # memory_only | all
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    detach_memory: bool = False
    grad_clip: float = 1.0
    warmup_steps: int = 0
    schedule: str = "constant"  # constant | cosine
    precision: str = "f32"  # f32 | f64
    eval_every: int = 0
    eval_samples: int = 100
    curriculum_steps: int = 0  # stream-length cap grows from task.t_min to task.t_max over this many steps

    def validate(self) -> None:
        if self.stage not in ("memory_only", "all"):
            raise ValueError(f"train.stage must be memory_only or all, got {self.stage!r}")
        if self.lr <= 0:
            raise ValueError("train.lr must be > 0")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"train.{name} must be in [0, 1)")
        if self.steps < 1:
            raise ValueError("train.steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.grad_clip < 0:
            raise ValueError("train.grad_clip must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("train.schedule must be constant or cosine")
        if self.precision not in ("f32", "f64"):
            raise ValueError("train.precision must be f32 or f64")
        if self.curriculum_steps < 0:
            raise ValueError("train.curriculum_steps must be >= 0")


@dataclass
class EvalConfig:
    lengths: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    depths: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    trials: int = 5
    thetas: list[float] = field(default_factory=lambda: [1.0, 3.0, 5.0])
    seed: int = 12345
    budget_scalars: int = 200_000_000
    tokens_per_frame: int = 1

    def validate(self) -> None:
        if self.trials < 1:
            raise ValueError("eval.trials must be >= 1")
        if any(t < 0 for t in self.thetas):
            raise ValueError("eval.thetas must be >= 0")
        if any(not 0.0 <= d <= 1.0 for d in self.depths):
            raise ValueError("eval.depths must lie in [0, 1]")
        if self.tokens_per_frame < 1:
            raise ValueError("eval.tokens_per_frame must be >= 1")


@dataclass
class PathsConfig:
    out_dir: str = "runs/default"
    checkpoint: str = ""


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "task": DatasetSpec, "eval": EvalConfig, "paths": PathsConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: DatasetSpec = field(default_factory=DatasetSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self, vocab: Vocabulary | None = None) -> None:
        vocab = vocab or Vocabulary.standard()
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        try:
            self.task.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if len(vocab) > self.model.vocab_size:
            raise ConfigError(f"model.vocab_size={self.model.vocab_size} cannot hold {len(vocab)} symbols")
        if vocab.bos != self.model.bos_id:
            raise ConfigError(f"model.bos_id={self.model.bos_id} but vocabulary BOS is {vocab.bos}")
        worst = organized_length(self.task.t_max, 2, 64, self.model)
        if worst > self.model.max_position:
            raise ConfigError(f"model.max_position={self.model.max_position} < organized length {worst} for task.t_max")

    def to_text(self) -> str:
        lines = []
        for sec in SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                lines.append(f"{sec}.{f.name} = {_format_value(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def organized_length(T: int, q_len: int, answer_len: int, cfg: ModelConfig) -> int:
    """Positions used by a T-token stream, its question blocks, and an answer."""
    n_seg = -(-T // cfg.seg_len)
    mem = sum(max(1, -(-min(cfg.seg_len, T - i * cfg.seg_len) // cfg.alpha)) for i in range(n_seg))
    return T + mem + n_seg * (q_len + 1) + q_len + answer_len


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(raw: str, default, annotation: str):
    raw = raw.strip()
    if "list[int]" in annotation:
        return [int(x) for x in raw.split(",") if x.strip()]
    if "list[float]" in annotation:
        return [float(x) for x in raw.split(",") if x.strip()]
    if "None" in annotation and raw.lower() == "none":
        return None
    if "bool" in annotation:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if "int" in annotation:
        return int(raw)
    if "float" in annotation:
        return float(raw)
    return raw


def _assign(values: dict[str, dict], key: str, raw: str, where: str) -> None:
    if "." not in key:
        raise ConfigError(f"{where}: key {key!r} must be section.key")
    sec, name = key.split(".", 1)
    if sec not in SECTIONS:
        raise ConfigError(f"{where}: unknown section {sec!r} in key {key!r}")
    fmap = {f.name: f for f in fields(SECTIONS[sec])}
    if name not in fmap:
        raise ConfigError(f"{where}: unknown key {key!r}")
    f = fmap[name]
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    try:
        values[sec][name] = _convert(raw, default, str(f.type))
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from exc


def _build(values: dict[str, dict], lines: dict[str, str]) -> RunConfig:
    parts = {}
    for sec, cls in SECTIONS.items():
        try:
            parts[sec] = cls(**values[sec])
        except ValueError as exc:
            raise ConfigError(_locate(str(exc), lines)) from exc
    cfg = RunConfig(**parts)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(_locate(str(exc), lines)) from exc
    except ValueError as exc:
        raise ConfigError(_locate(str(exc), lines)) from exc
    return cfg


def _locate(msg: str, lines: dict[str, str]) -> str:
    for key, where in lines.items():
        if key in msg:
            return f"{where}: {msg}"
    return msg


def parse_config_text(text: str, overrides: list[str] | None = None, source: str = "<config>") -> RunConfig:
    values: dict[str, dict] = {sec: {} for sec in SECTIONS}
    lines: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{lineno}"
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'section.key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        _assign(values, key, raw, where)
        lines[key] = where
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        where = f"--set {key}"
        _assign(values, key, raw, where)
        lines[key] = where
    return _build(values, lines)


def parse_config(path, overrides: list[str] | None = None) -> RunConfig:
    p = Path(path)
    return parse_config_text(p.read_text(encoding="utf-8"), overrides, source=str(p))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    return parse_config_text(cfg.to_text(), overrides)
