"""Dense tensor arithmetic with hand-derived backward passes.

A deliberately small tape-based autograd: every op builds its output array with
numpy and, when gradients are enabled and an input requires them, records a
closure mapping the output gradient to input gradients. ``Tensor.backward``
walks the tape in reverse topological order.

Only the ops the memory transformer needs are provided. Leading batch axes are
supported by ``matmul`` and the row-wise ops; there is no general broadcasting
beyond bias-style additions.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "InvalidInputError",
    "NumericError",
    "GradCheckReport",
    "no_grad",
    "grad_enabled",
    "matmul",
    "add",
    "mul",
    "scale",
    "concat",
    "reshape",
    "transpose",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "embedding",
    "cross_entropy",
    "mean_all",
    "grad_check",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class InvalidInputError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus an optional gradient buffer and tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __getitem__(self, index) -> "Tensor":
        return _slice(self, index)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in order:
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            # intermediate gradients are not needed once propagated
            node.grad = None


def _topological(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    post.reverse()
    return post


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes are batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.dims} and {b.dims}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.dims} x {b.dims}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if len(ts) == 1:
        return ts[0]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, ts))

    return _result(out, ts, backward)


def _slice(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(out, (a,), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    inverse = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


# ---------------------------------------------------------------------------
# row-wise ops


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with row-max subtraction.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get
    probability exactly 0. Every row must keep at least one True entry.
    """
    x = _as_tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine must be [{x.shape[-1]}]")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gbeta = g.sum(axis=lead)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = _as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _result(out, (x,), backward)


def embedding(table, ids: np.ndarray) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _result(out, (table,), backward)


def cross_entropy(logits, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the positions where ``mask`` is set.

    ``logits`` is [..., n, V]; ``targets`` and ``mask`` are [..., n].
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(f"targets/mask {targets.shape}/{mask.shape} vs logits {logits.dims}")
    count = int(mask.sum())
    if count == 0:
        raise InvalidInputError("cross_entropy needs at least one masked position")
    V = logits.shape[-1]
    if targets[mask].size and (targets[mask].min() < 0 or targets[mask].max() >= V):
        raise InvalidInputError("target id outside vocabulary")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe_t = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return ((p - onehot) * (mask[..., None] * (g / count)),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full_like(x.data, g / n),))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: tuple[str, int]
    per_param_errors: dict[str, float] = field(default_factory=dict)
    coords_checked: dict[str, int] = field(default_factory=dict)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-4,
    max_coords: int = 256,
    seed: int = 0,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare backprop gradients against central differences.

    ``loss_fn`` must rebuild the loss from the current contents of ``params``.
    Tensors without ``requires_grad`` are treated as frozen and skipped. At most
    ``max_coords`` coordinates per tensor are checked, drawn uniformly without
    replacement from a generator seeded with ``seed``.
    """
    selected = [n for n in (names if names is not None else params) if params[n].requires_grad]
    for n in selected:
        if params[n].data.dtype != np.float64:
            raise InvalidInputError(f"grad_check needs float64 params ({n} is {params[n].dtype})")
    for n in selected:
        params[n].zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    loss.backward()

    rng = np.random.Generator(np.random.Philox(seed))
    per_param: dict[str, float] = {}
    counts: dict[str, int] = {}
    worst = (selected[0] if selected else "", 0)
    worst_err = 0.0
    for n in selected:
        p = params[n]
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        err_max = 0.0
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + eps
                up = float(loss_fn().data)
                flat[c] = orig - eps
                down = float(loss_fn().data)
            flat[c] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {n}[{c}]")
            num = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[c])
            err = abs(a - num) / (abs(a) + abs(num) + 1e-12)
            if err > err_max:
                err_max = err
            if err > worst_err:
                worst_err, worst = err, (n, int(c))
        per_param[n] = err_max
        counts[n] = int(coords.size)
    return GradCheckReport(
        max_rel_error=max(per_param.values(), default=0.0),
        worst_param=worst,
        per_param_errors=per_param,
        coords_checked=counts,
    )
