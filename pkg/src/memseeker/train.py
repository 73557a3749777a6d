"""Answer-only cross-entropy through the segment recurrence, plus the optimizer."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .config import RunConfig, TrainConfig
from .model import ModelParams, forward_block
from .numcore import Tensor
from .pipeline import batch_layouts, encode_stream, layout_signature, run_episodes
from .tasks import TaskSample, gen_split
from .vocab import Vocabulary

__all__ = [
    "TrainingError",
    "AdamState",
    "TrainLog",
    "answer_targets",
    "episode_loss",
    "trainable_names",
    "train_step",
    "make_batches",
    "run_training",
    "params_digest",
]

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def answer_targets(question: np.ndarray, answers: np.ndarray, split_token: int):
    """Teacher-forced answer block, next-token targets, and loss mask.

    The block is ``[split, Q, a_1..a_{l-1}]``; position i predicts token i+1 of
    ``[split, Q, a_1..a_l]``. The mask is set exactly where that target is an
    answer token, so split and question targets never enter the loss.
    """
    B, q_len = question.shape
    split = np.full((B, 1), split_token, dtype=np.int64)
    full = np.concatenate([split, question, answers], axis=1)
    block, targets = full[:, :-1], full[:, 1:]
    mask = np.broadcast_to(np.arange(block.shape[1]) + 1 >= 1 + q_len, block.shape).copy()
    return block, targets, mask


def episode_loss(params: ModelParams, samples: list[TaskSample], vocab: Vocabulary | None = None, *,
                 detach_memory: bool = False, history: bool = True) -> Tensor:
    """Mean answer-token cross-entropy for a batch of same-shaped samples."""
    vocab = vocab or Vocabulary.standard()
    if any(len(s.answer) == 0 for s in samples):
        raise ValueError("samples need a non-empty answer")
    layout = batch_layouts(samples, params.config, vocab.split)
    bank = encode_stream(params, layout, detach=detach_memory, history=history)
    answers = np.stack([s.answer for s in samples])
    fin = layout.final_block
    block, targets, mask = answer_targets(fin.question_tokens, answers, vocab.split)
    # only answer tokens may be targets
    assert int(mask.sum()) == answers.size
    assert np.array_equal(targets[mask].reshape(answers.shape), answers)
    logits = forward_block(params, bank, block, 0, fin.start_pos).logits
    return nc.cross_entropy(logits, targets, mask)


def trainable_names(params: ModelParams, stage: str) -> list[str]:
    if stage == "memory_only":
        return params.memory_names()
    if stage == "all":
        return params.names()
    raise ValueError(f"unknown stage {stage!r}")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.asarray([self.step], dtype=np.int64)}
        for k in self.m:
            out["m." + k] = self.m[k]
            out["v." + k] = self.v[k]
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        st = cls(step=int(arrays["step"][0]))
        for k, a in arrays.items():
            if k.startswith("m."):
                st.m[k[2:]] = a.copy()
            elif k.startswith("v."):
                st.v[k[2:]] = a.copy()
        return st


def _lr_at(cfg: TrainConfig, step: int) -> float:
    lr = cfg.lr
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "cosine":
        span = max(1, cfg.steps - cfg.warmup_steps)
        frac = min(1.0, (step - cfg.warmup_steps) / span)
        return lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    return lr


def _apply_update(params: ModelParams, names: list[str], state: AdamState, cfg: TrainConfig) -> float:
    grads = {n: params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data) for n in names}
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if not math.isfinite(norm):
        raise TrainingError(f"non-finite gradient norm at step {state.step}")
    if cfg.grad_clip > 0 and norm > cfg.grad_clip:
        factor = cfg.grad_clip / (norm + 1e-6)
        grads = {n: g * factor for n, g in grads.items()}
    lr = _lr_at(cfg, state.step)
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for n in names:
        p = params[n].data
        g = grads[n].astype(p.dtype, copy=False)
        if n not in state.m:
            state.m[n] = np.zeros_like(p)
            state.v[n] = np.zeros_like(p)
        m, v = state.m[n], state.v[n]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)
    return norm


def train_step(params: ModelParams, batch: list[TaskSample], state: AdamState, cfg: TrainConfig,
               vocab: Vocabulary | None = None) -> tuple[float, float]:
    """One optimizer step on ``batch``; returns (loss, pre-clip gradient norm).

    Samples sharing a layout are stacked; differently shaped groups are run one
    after another and their gradients averaged with per-sample weights.
    """
    if not batch:
        raise ValueError("empty batch")
    names = trainable_names(params, cfg.stage)
    params.set_trainable(names)
    groups: dict[tuple, list[TaskSample]] = {}
    for s in batch:
        groups.setdefault(layout_signature(s), []).append(s)
    total = 0.0
    for group in groups.values():
        loss = episode_loss(params, group, vocab, detach_memory=cfg.detach_memory)
        value = float(loss.data)
        if not math.isfinite(value):
            seeds = [s.seed for s in group]
            raise TrainingError(f"non-finite loss {value} at step {state.step} (sample seeds {seeds})")
        weight = len(group) / len(batch)
        loss.backward(np.asarray(weight, dtype=loss.data.dtype))
        total += weight * value
    norm = _apply_update(params, names, state, cfg)
    params.zero_grad()
    return total, norm


def params_digest(params: ModelParams, names: list[str] | None = None) -> str:
    import hashlib

    h = hashlib.sha256()
    for n in names or params.names():
        h.update(n.encode())
        h.update(np.ascontiguousarray(params[n].data).tobytes())
    return h.hexdigest()


def make_batches(samples: list[TaskSample], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """One epoch of index batches; each batch holds a single layout shape."""
    buckets: dict[tuple, list[int]] = {}
    for i, s in enumerate(samples):
        buckets.setdefault(layout_signature(s), []).append(i)
    batches = []
    for key in sorted(buckets):
        idx = np.asarray(buckets[key])
        idx = idx[rng.permutation(len(idx))]
        batches += [idx[i: i + batch_size].tolist() for i in range(0, len(idx), batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        train_path, eval_path = out / "train_log.csv", out / "eval_log.csv"
        with open(train_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "grad_norm", "ms"])
            for step, loss, gn, ms in self.rows:
                w.writerow([step, repr(loss), repr(gn), f"{ms:.3f}"])
        with open(eval_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "eval_acc"])
            for step, acc in self.evals:
                w.writerow([step, f"{acc:.6f}"])
        return train_path, eval_path

    @classmethod
    def read(cls, out_dir) -> "TrainLog":
        out = Path(out_dir)
        lg = cls()
        with open(out / "train_log.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                lg.rows.append((int(row["step"]), float(row["loss"]), float(row["grad_norm"]), float(row["ms"])))
        with open(out / "eval_log.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                lg.evals.append((int(row["step"]), float(row["eval_acc"])))
        return lg


def _exact_match(params: ModelParams, samples: list[TaskSample], vocab: Vocabulary) -> float:
    preds = run_episodes(params, samples, vocab)
    return float(np.mean([np.array_equal(p, s.answer) for p, s in zip(preds, samples)]))


def _length_cap(tc: TrainConfig, samples: list[TaskSample], step: int) -> int:
    """Longest stream admitted at ``step``; everything once the curriculum ends."""
    lengths = sorted({s.T for s in samples})
    if not tc.curriculum_steps or step >= tc.curriculum_steps:
        return lengths[-1]
    frac = step / tc.curriculum_steps
    target = lengths[0] + frac * (lengths[-1] - lengths[0])
    return max(t for t in lengths if t <= target)


def run_training(cfg: RunConfig, out_dir=None, *, params: ModelParams | None = None,
                 opt_state: AdamState | None = None, splits: dict[str, list[TaskSample]] | None = None,
                 vocab: Vocabulary | None = None, save: bool = True):
    """Train per ``cfg`` and (optionally) write checkpoint + logs under ``out_dir``.

    Returns (params, opt_state, TrainLog). Fully determined by the config: data
    comes from the seeded task spec, init and batch order from ``train.seed``.
    """
    from .persist import save_checkpoint

    vocab = vocab or Vocabulary.standard()
    tc = cfg.train
    dtype = np.float64 if tc.precision == "f64" else np.float32
    if params is None:
        params = ModelParams.init(cfg.model, seed=tc.seed, dtype=dtype)
    if splits is None:
        splits = gen_split(cfg.task, vocab)
    train_set, val_set = splits["train"], splits["val"][: tc.eval_samples]
    if not train_set:
        raise TrainingError("empty training set")
    state = opt_state or AdamState()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([tc.seed, 7])))
    tlog = TrainLog()
    batches: list[list[int]] = []
    pool, cap = train_set, None
    for step in range(tc.steps):
        new_cap = _length_cap(tc, train_set, step)
        if new_cap != cap:
            cap, batches = new_cap, []
            pool = [s for s in train_set if s.T <= cap]
        if not batches:
            batches = make_batches(pool, tc.batch_size, rng)
        batch = [pool[i] for i in batches.pop()]
        t0 = time.perf_counter()
        loss, norm = train_step(params, batch, state, tc, vocab)
        ms = (time.perf_counter() - t0) * 1000.0
        tlog.rows.append((step, loss, norm, ms))
        if step % 100 == 0:
            log.info("step %d loss %.4f grad_norm %.3f (%.0f ms)", step, loss, norm, ms)
        if tc.eval_every and val_set and (step + 1) % tc.eval_every == 0:
            acc = _exact_match(params, val_set, vocab)
            tlog.evals.append((step + 1, acc))
            log.info("step %d eval_acc %.3f", step + 1, acc)
    params.set_trainable(params.names())
    if save and out_dir is not None:
        save_checkpoint(Path(out_dir) / "checkpoint.vdet", params, cfg, vocab,
                        opt_state=state.to_arrays(), rng_state=rng.bit_generator.state)
        tlog.write(out_dir)
    return params, state, tlog
