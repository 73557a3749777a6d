"""Append-only per-layer store of memory-token keys and values."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .model import StateError
from .numcore import Tensor

__all__ = ["MemoryBank", "BankSnapshot", "bank_new", "bank_append", "bank_snapshot", "bank_restore"]


@dataclass(frozen=True)
class BankSnapshot:
    keys: tuple[tuple[Tensor, ...], ...]
    values: tuple[tuple[Tensor, ...], ...]
    segment_offsets: tuple[int, ...]
    positions: tuple[int, ...]


class MemoryBank:
    """Memory K/V for every layer, in segment order.

    Entries are stored as the [B, k, d] chunks produced per segment; heads are
    views over the last axis. Stored tensors are never modified in place, so a
    snapshot only needs to copy the chunk lists.
    """

    def __init__(self, n_layers: int):
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        self.n_layers = n_layers
        self._keys: list[list[Tensor]] = [[] for _ in range(n_layers)]
        self._values: list[list[Tensor]] = [[] for _ in range(n_layers)]
        self.segment_offsets: list[int] = [0]
        self.positions: list[int] = []
        self._joined: list[tuple[Tensor, Tensor] | None] = [None] * n_layers

    @property
    def size(self) -> int:
        return self.segment_offsets[-1]

    @property
    def n_segments(self) -> int:
        return len(self.segment_offsets) - 1

    def __len__(self) -> int:
        return self.size

    def append(self, mem_kv, positions, detach: bool = False) -> "MemoryBank":
        if len(mem_kv) != self.n_layers:
            raise StateError(f"got memory for {len(mem_kv)} layers, bank has {self.n_layers}")
        k = mem_kv[0][0].shape[-2]
        if k < 1:
            raise ValueError("a segment must contribute at least one memory entry")
        positions = [int(p) for p in positions]
        if len(positions) != k:
            raise ValueError(f"{len(positions)} positions for {k} entries")
        ref = mem_kv[0][0].shape
        for km, vm in mem_kv:
            if km.shape != ref or vm.shape != ref:
                raise StateError(f"inconsistent memory shapes {km.dims} / {vm.dims} vs {list(ref)}")
        if self.size and self._keys[0][0].shape[0::2] != ref[0::2]:
            raise StateError(f"memory {list(ref)} does not match stored {self._keys[0][0].dims}")
        for i, (km, vm) in enumerate(mem_kv):
            if detach or not nc.grad_enabled():
                km, vm = km.detach(), vm.detach()
            self._keys[i].append(km)
            self._values[i].append(vm)
            self._joined[i] = None
        self.segment_offsets.append(self.size + k)
        self.positions.extend(positions)
        return self

    def layer_kv(self, i: int) -> tuple[Tensor, Tensor] | None:
        """Concatenated (K, V) of layer ``i``, each [B, P, d]; None when empty."""
        if not self.size:
            return None
        if self._joined[i] is None:
            self._joined[i] = (nc.concat(self._keys[i], axis=1), nc.concat(self._values[i], axis=1))
        return self._joined[i]

    def keys(self, i: int) -> np.ndarray:
        kv = self.layer_kv(i)
        return np.zeros((0, 0, 0)) if kv is None else kv[0].data

    def values(self, i: int) -> np.ndarray:
        kv = self.layer_kv(i)
        return np.zeros((0, 0, 0)) if kv is None else kv[1].data

    def segment(self, i: int, s: int) -> tuple[Tensor, Tensor]:
        return self._keys[i][s], self._values[i][s]

    def n_scalars(self) -> int:
        return sum(t.data.size for chunks in (self._keys, self._values) for layer in chunks for t in layer)

    def snapshot(self) -> BankSnapshot:
        return BankSnapshot(
            keys=tuple(tuple(c) for c in self._keys),
            values=tuple(tuple(c) for c in self._values),
            segment_offsets=tuple(self.segment_offsets),
            positions=tuple(self.positions),
        )

    @classmethod
    def restore(cls, snap: BankSnapshot) -> "MemoryBank":
        bank = cls(len(snap.keys))
        bank._keys = [list(c) for c in snap.keys]
        bank._values = [list(c) for c in snap.values]
        bank.segment_offsets = list(snap.segment_offsets)
        bank.positions = list(snap.positions)
        return bank

    # -- persistence helpers used by the checkpoint container

    def to_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {
            "bank.segment_offsets": np.asarray(self.segment_offsets, dtype=np.int64),
            "bank.positions": np.asarray(self.positions, dtype=np.int64),
        }
        for i in range(self.n_layers):
            out[f"bank.{i}.keys"] = np.ascontiguousarray(self.keys(i))
            out[f"bank.{i}.values"] = np.ascontiguousarray(self.values(i))
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "MemoryBank":
        offsets = [int(x) for x in arrays["bank.segment_offsets"]]
        n_layers = sum(1 for k in arrays if k.endswith(".keys"))
        bank = cls(n_layers)
        positions = [int(x) for x in arrays["bank.positions"]]
        for s in range(len(offsets) - 1):
            a, b = offsets[s], offsets[s + 1]
            kv = [
                (Tensor(arrays[f"bank.{i}.keys"][:, a:b].copy()), Tensor(arrays[f"bank.{i}.values"][:, a:b].copy()))
                for i in range(n_layers)
            ]
            bank.append(kv, positions[a:b])
        return bank


def bank_new(n_layers: int) -> MemoryBank:
    return MemoryBank(n_layers)


def bank_append(bank: MemoryBank, mem_kv, positions, detach: bool = False) -> MemoryBank:
    return bank.append(mem_kv, positions, detach=detach)


def bank_snapshot(bank: MemoryBank) -> BankSnapshot:
    return bank.snapshot()


def bank_restore(snap: BankSnapshot) -> MemoryBank:
    return MemoryBank.restore(snap)
