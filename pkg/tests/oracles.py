"""Independent reference implementations used as test oracles.

Deliberately naive: explicit loops, materialised masks, float64 throughout.
Nothing here imports the code under test except for reading parameter arrays.
"""

from __future__ import annotations

import math

import numpy as np


def naive_matmul(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def mask_predicate(P: int, N: int, k: int, row: int, col: int) -> bool:
    """The visibility rule written out case by case."""
    if col < P:
        return True
    cur = col - P
    if row < N:  # regular query
        return cur < N and cur <= row
    m = row - N  # memory query m
    if cur < N:
        return True
    return cur - N <= m


def _sinusoid(pos: int, d: int) -> np.ndarray:
    out = np.zeros(d)
    for i in range(0, d, 2):
        angle = pos / (10000.0 ** (i / d))
        out[i] = math.sin(angle)
        if i + 1 < d:
            out[i + 1] = math.cos(angle)
    return out


def _ln(x, g, b, eps):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def naive_block(arrays: dict, cfg, tokens, k: int, start_pos: int, past=None, mem_offset=None):
    """Reference forward of one block (single sequence).

    ``arrays`` maps parameter names to float64 arrays; ``past`` is a list per
    layer of (K, V) arrays [P, d] or None. Returns (logits [(N+k), V],
    per-layer memory (K, V)).
    """
    tokens = list(int(t) for t in tokens)
    N, d, H = len(tokens), cfg.d_model, cfg.n_heads
    dh = d // H
    if mem_offset is None:
        mem_offset = N
    pos = []
    for i in range(N):
        pos.append(start_pos + (i if i < mem_offset else i + k))
    pos += [start_pos + mem_offset + j for j in range(k)]
    x = np.zeros((N + k, d))
    for i in range(N):
        x[i] = arrays["tok_embed"][tokens[i]] + _sinusoid(pos[i], d)
    for j in range(k):
        x[N + j] = arrays["mem_embed"][j] + _sinusoid(pos[N + j], d)
    L = N + k
    mem_kv = []
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        h = np.array([_ln(x[i], arrays[p + "ln1.gamma"], arrays[p + "ln1.beta"], cfg.ln_eps) for i in range(L)])
        q = np.zeros((L, d))
        kk = np.zeros((L, d))
        vv = np.zeros((L, d))
        for i in range(L):
            pre = "wm_" if i >= N else "w_"
            q[i] = h[i] @ arrays[p + pre + "q"]
            kk[i] = h[i] @ arrays[p + pre + "k"]
            vv[i] = h[i] @ arrays[p + pre + "v"]
        if past is not None and past[layer] is not None:
            pk, pv = past[layer]
        else:
            pk, pv = np.zeros((0, d)), np.zeros((0, d))
        P = pk.shape[0]
        keys = np.concatenate([pk, kk])
        vals = np.concatenate([pv, vv])
        att = np.zeros((L, d))
        for head in range(H):
            sl = slice(head * dh, (head + 1) * dh)
            for i in range(L):
                scores = np.full(P + L, -np.inf)
                for j in range(P + L):
                    if mask_predicate(P, N, k, i, j):
                        scores[j] = q[i, sl] @ keys[j, sl] / math.sqrt(dh)
                w = np.exp(scores - scores.max())
                w = w / w.sum()
                att[i, sl] = w @ vals[:, sl]
        x = x + att @ arrays[p + "w_o"]
        for i in range(L):
            h2 = _ln(x[i], arrays[p + "ln2.gamma"], arrays[p + "ln2.beta"], cfg.ln_eps)
            x[i] = x[i] + _gelu(h2 @ arrays[p + "mlp.w1"] + arrays[p + "mlp.b1"]) @ arrays[p + "mlp.w2"] + arrays[p + "mlp.b2"]
        mem_kv.append((kk[N:].copy(), vv[N:].copy()))
    head_w = arrays["tok_embed"].T if cfg.tie_head else arrays["head.w"]
    logits = np.array([_ln(x[i], arrays["ln_f.gamma"], arrays["ln_f.beta"], cfg.ln_eps) @ head_w for i in range(L)])
    return logits, mem_kv


def max_matching_exhaustive(pred, gt, theta) -> int:
    """Largest matching found by enumerating every matching recursively."""
    pred, gt = list(pred), list(gt)
    best = 0

    def walk(i, used, size):
        nonlocal best
        best = max(best, size)
        if i == len(pred):
            return
        walk(i + 1, used, size)  # pred[i] left unmatched
        for j, g in enumerate(gt):
            if j not in used and abs(pred[i] - g) <= theta:
                walk(i + 1, used | {j}, size + 1)

    walk(0, frozenset(), 0)
    return best


def miou_exhaustive(pred, gt, theta) -> float:
    if not pred and not gt:
        return 1.0
    m = max_matching_exhaustive(pred, gt, theta)
    return m / (len(pred) + len(gt) - m)
