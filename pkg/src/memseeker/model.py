"""Memory-augmented causal transformer.

Each block holds N regular tokens (segment, question, split) followed by k
memory tokens. Regular rows are projected with the base ``W_{q,k,v}``; memory
rows use their own ``W^m_{q,k,v}``. Keys and values are the concatenation of
the bank's past memory entries, the regular rows, and the memory rows. Regular
queries never see the current block's memory columns, so their outputs do not
depend on k.

Regular and memory rows are carried as two separate streams through the stack.
The regular stream therefore runs exactly the same numpy calls whatever k is,
which makes the prefix property hold bitwise rather than up to rounding.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from . import numcore as nc
from .numcore import Tensor

__all__ = [
    "ModelConfig",
    "ModelParams",
    "AttnMask",
    "BlockOutput",
    "CapacityError",
    "PositionRangeError",
    "StateError",
    "AttentionProbe",
    "build_mask",
    "embed_block",
    "attn_with_memory",
    "forward_block",
    "sinusoidal",
]


class CapacityError(ValueError):
    pass


class PositionRangeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 128
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mlp_hidden: int = 256
    max_memory_slots: int = 8
    max_position: int = 8192
    alpha: int = 4
    seg_len: int = 32
    tie_head: bool = False
    bos_id: int = 1
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "mlp_hidden",
                     "max_memory_slots", "max_position", "alpha", "seg_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"model.d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0 <= self.bos_id < self.vocab_size:
            raise ValueError("model.bos_id outside vocabulary")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# parameters

_LAYER_MATS = ("w_q", "w_k", "w_v", "w_o", "wm_q", "wm_k", "wm_v")


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32, std: float = 0.02) -> "ModelParams":
        rng = np.random.Generator(np.random.Philox(seed))
        d, V, H = config.d_model, config.vocab_size, config.mlp_hidden
        raw: dict[str, np.ndarray] = {"tok_embed": _trunc_normal(rng, (V, d), std)}
        for i in range(config.n_layers):
            p = f"layers.{i}."
            for w in ("w_q", "w_k", "w_v", "w_o"):
                raw[p + w] = _trunc_normal(rng, (d, d), std)
            raw[p + "mlp.w1"] = _trunc_normal(rng, (d, H), std)
            raw[p + "mlp.b1"] = np.zeros(H)
            raw[p + "mlp.w2"] = _trunc_normal(rng, (H, d), std)
            raw[p + "mlp.b2"] = np.zeros(d)
            for ln in ("ln1", "ln2"):
                raw[p + ln + ".gamma"] = np.ones(d)
                raw[p + ln + ".beta"] = np.zeros(d)
        raw["ln_f.gamma"] = np.ones(d)
        raw["ln_f.beta"] = np.zeros(d)
        if not config.tie_head:
            raw["head.w"] = _trunc_normal(rng, (d, V), std)
        raw = {k: v.astype(dtype) for k, v in raw.items()}
        # memory parameters start as copies of their base counterparts
        raw["mem_embed"] = np.repeat(raw["tok_embed"][config.bos_id][None, :], config.max_memory_slots, axis=0)
        for i in range(config.n_layers):
            p = f"layers.{i}."
            for w in ("q", "k", "v"):
                raw[p + "wm_" + w] = raw[p + "w_" + w].copy()
        tensors = {k: Tensor(raw[k], requires_grad=True, name=k) for k in cls._order(config)}
        return cls(config, tensors)

    @staticmethod
    def _order(config: ModelConfig) -> list[str]:
        names = ["tok_embed", "mem_embed"]
        for i in range(config.n_layers):
            p = f"layers.{i}."
            names += [p + w for w in _LAYER_MATS]
            names += [p + s for s in ("mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
                                      "ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta")]
        names += ["ln_f.gamma", "ln_f.beta"]
        if not config.tie_head:
            names.append("head.w")
        return names

    def names(self) -> list[str]:
        return list(self.tensors)

    def memory_names(self) -> list[str]:
        names = ["mem_embed"]
        for i in range(self.config.n_layers):
            names += [f"layers.{i}.wm_{w}" for w in "qkv"]
        return names

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def layer(self, i: int) -> dict[str, Tensor]:
        p = f"layers.{i}."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    @property
    def dtype(self):
        return self.tensors["tok_embed"].data.dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()},
        )

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def set_trainable(self, names) -> None:
        keep = set(names)
        for k, t in self.tensors.items():
            t.requires_grad = k in keep
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


# ---------------------------------------------------------------------------
# masks and positions


@dataclass(frozen=True)
class AttnMask:
    n_past: int
    n_regular: int
    n_mem: int
    allowed: np.ndarray  # bool [(N+k), (P+N+k)]


@lru_cache(maxsize=4096)
def _mask_array(P: int, N: int, k: int) -> np.ndarray:
    rows = np.arange(N + k)[:, None]
    cols = np.arange(P + N + k)[None, :]
    cur = cols - P
    regular_row = rows < N
    allowed = (cols < P) | (
        regular_row & (cur < N) & (cur <= rows)
    ) | (
        ~regular_row & (cur >= 0) & (cur <= rows)
    )
    allowed.setflags(write=False)
    return allowed


def build_mask(n_past: int, n_regular: int, n_mem: int) -> AttnMask:
    """Visibility of keys [past | regular | memory] for queries [regular | memory]."""
    if min(n_past, n_regular, n_mem) < 0:
        raise ValueError("counts must be non-negative")
    if n_regular + n_mem < 1:
        raise ValueError("a block needs at least one query row")
    return AttnMask(n_past, n_regular, n_mem, _mask_array(n_past, n_regular, n_mem))


@lru_cache(maxsize=8)
def _sin_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    table.setflags(write=False)
    return table


def sinusoidal(positions: np.ndarray, d: int, max_position: int) -> np.ndarray:
    return _sin_table(max_position, d)[positions]


# ---------------------------------------------------------------------------
# profiling hook


class AttentionProbe:
    """Collects attention widths and live-scalar counts while active."""

    _active: "AttentionProbe | None" = None

    def __init__(self):
        self.widths: list[int] = []
        self.live_scalars: list[int] = []
        self.resident_scalars = 0  # bank and caches held outside the call

    @contextlib.contextmanager
    def activate(self):
        prev, AttentionProbe._active = AttentionProbe._active, self
        try:
            yield self
        finally:
            AttentionProbe._active = prev

    def record(self, width: int, live: int) -> None:
        self.widths.append(width)
        self.live_scalars.append(live + self.resident_scalars)

    @property
    def peak_width(self) -> int:
        return max(self.widths, default=0)

    @property
    def peak_live(self) -> int:
        return max(self.live_scalars, default=0)


# ---------------------------------------------------------------------------
# forward


def _positions(start_pos: int, N: int, k: int, mem_offset: int | None) -> tuple[np.ndarray, np.ndarray]:
    if mem_offset is None:
        mem_offset = N
    reg = np.concatenate([np.arange(mem_offset), np.arange(mem_offset + k, N + k)]) + start_pos
    mem = np.arange(mem_offset, mem_offset + k) + start_pos
    return reg.astype(np.int64), mem.astype(np.int64)


def _embed_streams(params: ModelParams, tokens: np.ndarray, k: int, start_pos: int,
                   mem_offset: int | None) -> tuple[Tensor | None, Tensor | None]:
    cfg = params.config
    B, N = tokens.shape
    if k > cfg.max_memory_slots:
        raise CapacityError(f"k={k} exceeds max_memory_slots={cfg.max_memory_slots}")
    if start_pos < 0 or start_pos + N + k > cfg.max_position:
        raise PositionRangeError(f"positions {start_pos}..{start_pos + N + k} exceed max_position={cfg.max_position}")
    if mem_offset is not None and not 0 <= mem_offset <= N:
        raise ValueError("mem_offset must lie within the regular tokens")
    dtype = params.dtype
    reg_pos, mem_pos = _positions(start_pos, N, k, mem_offset)
    xr = xm = None
    if N:
        pe = sinusoidal(reg_pos, cfg.d_model, cfg.max_position).astype(dtype)
        xr = nc.add(nc.embedding(params["tok_embed"], tokens), pe)
    if k:
        pe = sinusoidal(mem_pos, cfg.d_model, cfg.max_position).astype(dtype)
        mem_rows = nc.reshape(params["mem_embed"][:k], (1, k, cfg.d_model))
        xm = nc.add(mem_rows, np.broadcast_to(pe, (B, k, cfg.d_model)))
    return xr, xm


def embed_block(params: ModelParams, tokens, mem_count: int, start_pos: int,
                mem_offset: int | None = None) -> Tensor:
    """Embed N regular tokens followed by ``mem_count`` memory rows.

    By default the memory rows take the positions right after the regular
    tokens. ``mem_offset`` places them after the first ``mem_offset`` regular
    tokens instead (the trailing regular tokens shift back by k).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    squeeze = tokens.ndim == 1
    tokens2 = tokens[None, :] if squeeze else tokens
    xr, xm = _embed_streams(params, tokens2, mem_count, start_pos, mem_offset)
    out = nc.concat([t for t in (xr, xm) if t is not None], axis=1)
    return out[0] if squeeze else out


def _split_heads(t: Tensor, H: int) -> Tensor:
    B, L, d = t.shape
    return nc.transpose(nc.reshape(t, (B, L, H, d // H)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    B, H, L, dh = t.shape
    return nc.reshape(nc.transpose(t, (0, 2, 1, 3)), (B, L, H * dh))


def _attend(q: Tensor, keys: Tensor, vals: Tensor, mask: np.ndarray) -> Tensor:
    scores = nc.matmul(q, nc.transpose(keys, (0, 1, 3, 2)))
    probs = nc.softmax_rows(scores, mask)
    probe = AttentionProbe._active
    if probe is not None:
        live = q.data.size + keys.data.size + vals.data.size + scores.data.size + probs.data.size
        probe.record(keys.shape[2], live)
    return nc.matmul(probs, vals)


def _layer_kv(layer: dict[str, Tensor], hr: Tensor | None, hm: Tensor | None):
    kr = vr = km = vm = None
    if hr is not None:
        kr, vr = nc.matmul(hr, layer["w_k"]), nc.matmul(hr, layer["w_v"])
    if hm is not None:
        km, vm = nc.matmul(hm, layer["wm_k"]), nc.matmul(hm, layer["wm_v"])
    return kr, vr, km, vm


def _attention_streams(layer: dict[str, Tensor], hr: Tensor | None, hm: Tensor | None,
                       past: tuple[Tensor, Tensor] | None, n_heads: int):
    """Attention for both streams; returns (out_r, out_m, (Km, Vm), (Kr, Vr))."""
    kr, vr, km, vm = _layer_kv(layer, hr, hm)
    P = 0 if past is None else past[0].shape[1]
    N = 0 if hr is None else hr.shape[1]
    k = 0 if hm is None else hm.shape[1]
    d_head = layer["w_q"].shape[1] // n_heads
    inv = 1.0 / math.sqrt(d_head)
    mask = _mask_array(P, N, k)

    reg_keys = [t for t in (None if past is None else past[0], kr) if t is not None]
    reg_vals = [t for t in (None if past is None else past[1], vr) if t is not None]
    kh_r = _split_heads(nc.concat(reg_keys, axis=1), n_heads) if reg_keys else None
    vh_r = _split_heads(nc.concat(reg_vals, axis=1), n_heads) if reg_vals else None

    out_r = out_m = None
    if hr is not None:
        q = _split_heads(nc.scale(nc.matmul(hr, layer["w_q"]), inv), n_heads)
        out_r = nc.matmul(_merge_heads(_attend(q, kh_r, vh_r, mask[:N, : P + N])), layer["w_o"])
    if hm is not None:
        q = _split_heads(nc.scale(nc.matmul(hm, layer["wm_q"]), inv), n_heads)
        kh_m, vh_m = _split_heads(km, n_heads), _split_heads(vm, n_heads)
        if kh_r is not None:
            kh_m = nc.concat([kh_r, kh_m], axis=2)
            vh_m = nc.concat([vh_r, vh_m], axis=2)
        out_m = nc.matmul(_merge_heads(_attend(q, kh_m, vh_m, mask[N:])), layer["w_o"])
    return out_r, out_m, (km, vm), (kr, vr)


def attn_with_memory(layer: dict[str, Tensor], h, past: tuple[Tensor, Tensor] | None, k: int, n_heads: int):
    """Attention over a (N+k)-row block whose last k rows are memory tokens.

    ``h`` is [N+k, d] or [B, N+k, d] (already normalised input to the layer).
    Returns the [.., N+k, d] attention output and this layer's memory (K^m, V^m).
    """
    h = nc._as_tensor(h)
    squeeze = h.data.ndim == 2
    if squeeze:
        h = nc.reshape(h, (1,) + h.shape)
    L = h.shape[1]
    N = L - k
    if N < 0:
        raise ValueError("k exceeds block length")
    if past is not None and (past[0].data.ndim != 3 or past[0].shape[2] != h.shape[2]):
        raise StateError(f"past memory shaped {past[0].dims} does not match block {h.dims}")
    hr = h[:, :N] if N else None
    hm = h[:, N:] if k else None
    out_r, out_m, mem_kv, _ = _attention_streams(layer, hr, hm, past, n_heads)
    out = nc.concat([t for t in (out_r, out_m) if t is not None], axis=1)
    if squeeze:
        out = out[0]
        mem_kv = tuple(None if t is None else t[0] for t in mem_kv)
    return out, mem_kv


def _mlp(layer: dict[str, Tensor], x: Tensor, eps: float) -> Tensor:
    h = nc.layer_norm(x, layer["ln2.gamma"], layer["ln2.beta"], eps)
    h = nc.gelu(nc.add(nc.matmul(h, layer["mlp.w1"]), layer["mlp.b1"]))
    return nc.add(nc.matmul(h, layer["mlp.w2"]), layer["mlp.b2"])


def _head(params: ModelParams, x: Tensor) -> Tensor:
    cfg = params.config
    h = nc.layer_norm(x, params["ln_f.gamma"], params["ln_f.beta"], cfg.ln_eps)
    if cfg.tie_head:
        return nc.matmul(h, nc.transpose(params["tok_embed"], (1, 0)))
    return nc.matmul(h, params["head.w"])


class BlockOutput(NamedTuple):
    logits: Tensor | None
    mem_kv: list[tuple[Tensor, Tensor]]
    regular_kv: list[tuple[Tensor, Tensor]] | None


def _concat_past(a: tuple[Tensor, Tensor] | None, b: tuple[Tensor, Tensor] | None):
    if a is None:
        return b
    if b is None:
        return a
    return nc.concat([a[0], b[0]], axis=1), nc.concat([a[1], b[1]], axis=1)


def forward_block(params: ModelParams, bank, tokens, mem_count: int, start_pos: int, *,
                  mem_offset: int | None = None, extra_past=None, want_logits: bool = True,
                  want_regular_kv: bool = False) -> BlockOutput:
    """Run one block through the full stack.

    ``bank`` supplies per-layer past memory K/V (may be None or empty);
    ``extra_past`` is an optional per-layer list of (K, V) appended after the
    bank entries (the decoder's transient cache). With ``want_logits=False`` the
    work that only feeds the logits is skipped; the memory K/V are unchanged.
    """
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    if tokens.shape[1] + mem_count < 1:
        raise ValueError("empty block")
    if bank is not None and bank.n_layers != cfg.n_layers:
        raise StateError(f"bank has {bank.n_layers} layers, model has {cfg.n_layers}")
    xr, xm = _embed_streams(params, tokens, mem_count, start_pos, mem_offset)
    mem_kv, reg_kv = [], []
    for i in range(cfg.n_layers):
        layer = params.layer(i)
        past = bank.layer_kv(i) if bank is not None else None
        if extra_past is not None:
            past = _concat_past(past, extra_past[i])
        if past is not None and past[0].shape[0] != tokens.shape[0]:
            raise StateError(f"bank batch {past[0].shape[0]} != block batch {tokens.shape[0]}")
        hr = None if xr is None else nc.layer_norm(xr, layer["ln1.gamma"], layer["ln1.beta"], cfg.ln_eps)
        hm = None if xm is None else nc.layer_norm(xm, layer["ln1.gamma"], layer["ln1.beta"], cfg.ln_eps)
        if not want_logits and i == cfg.n_layers - 1:
            kr, vr, km, vm = _layer_kv(layer, hr, hm if mem_count else None)
            mem_kv.append((km, vm))
            reg_kv.append((kr, vr))
            break
        out_r, out_m, mkv, rkv = _attention_streams(layer, hr, hm, past, cfg.n_heads)
        mem_kv.append(mkv)
        reg_kv.append(rkv)
        if xr is not None:
            xr = nc.add(xr, out_r)
            xr = nc.add(xr, _mlp(layer, xr, cfg.ln_eps))
        if xm is not None:
            xm = nc.add(xm, out_m)
            xm = nc.add(xm, _mlp(layer, xm, cfg.ln_eps))
    logits = None
    if want_logits:
        parts = [_head(params, x) for x in (xr, xm) if x is not None]
        logits = nc.concat(parts, axis=1)
        if squeeze:
            logits = logits[0]
    return BlockOutput(logits, mem_kv, reg_kv if want_regular_kv else None)
