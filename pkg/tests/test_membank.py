import numpy as np
import pytest

from memseeker.membank import MemoryBank, bank_append, bank_new, bank_restore, bank_snapshot
from memseeker.model import StateError
from memseeker.numcore import Tensor


def chunk(rng, n_layers, k, d=4, batch=1):
    return [(Tensor(rng.normal(size=(batch, k, d))), Tensor(rng.normal(size=(batch, k, d)))) for _ in range(n_layers)]


def test_new_is_empty():
    b = bank_new(2)
    assert b.size == 0 and b.segment_offsets == [0] and b.n_layers == 2
    assert b.layer_kv(0) is None and b.layer_kv(1) is None
    with pytest.raises(ValueError):
        bank_new(0)


def test_append_offsets():
    rng = np.random.default_rng(0)
    b = bank_new(2)
    bank_append(b, chunk(rng, 2, 4), range(4))
    assert b.size == 4 and b.segment_offsets == [0, 4]
    bank_append(b, chunk(rng, 2, 4), range(10, 14))
    bank_append(b, chunk(rng, 2, 2), range(20, 22))
    assert b.segment_offsets == [0, 4, 8, 10]
    assert all(b.keys(i).shape == (1, 10, 4) for i in range(2))
    assert b.positions == [0, 1, 2, 3, 10, 11, 12, 13, 20, 21]


def test_retrieved_equals_appended():
    rng = np.random.default_rng(1)
    b = bank_new(2)
    parts = [chunk(rng, 2, k) for k in (3, 1, 2)]
    pos = 0
    for p in parts:
        b.append(p, range(pos, pos + p[0][0].shape[1]))
        pos += p[0][0].shape[1]
    for i in range(2):
        want_k = np.concatenate([p[i][0].data for p in parts], axis=1)
        want_v = np.concatenate([p[i][1].data for p in parts], axis=1)
        assert b.keys(i).tobytes() == want_k.tobytes()
        assert b.values(i).tobytes() == want_v.tobytes()


def test_independent_banks():
    rng = np.random.default_rng(2)
    a = bank_new(1)
    a.append(chunk(rng, 1, 2), [0, 1])
    b = bank_new(1)
    assert b.size == 0 and a.size == 2


def test_errors():
    rng = np.random.default_rng(3)
    b = bank_new(2)
    with pytest.raises(StateError):
        b.append(chunk(rng, 3, 2), [0, 1])
    with pytest.raises(ValueError):
        b.append(chunk(rng, 2, 2), [0])
    with pytest.raises(ValueError):
        b.append(chunk(rng, 2, 0), [])
    b.append(chunk(rng, 2, 2), [0, 1])
    with pytest.raises(StateError):
        b.append(chunk(rng, 2, 2, d=5), [2, 3])


def test_snapshot_round_trip_and_divergence():
    rng = np.random.default_rng(4)
    b = bank_new(2)
    b.append(chunk(rng, 2, 3), [0, 1, 2])
    snap = bank_snapshot(b)
    restored = bank_restore(snap)
    for i in range(2):
        assert restored.keys(i).tobytes() == b.keys(i).tobytes()
    assert restored.segment_offsets == b.segment_offsets and restored.positions == b.positions
    restored.append(chunk(rng, 2, 1), [3])
    assert restored.size == 4 and b.size == 3
    assert bank_restore(bank_snapshot(bank_new(1))).size == 0


def test_snapshot_is_unaffected_by_later_appends():
    rng = np.random.default_rng(5)
    b = bank_new(1)
    b.append(chunk(rng, 1, 2), [0, 1])
    snap = b.snapshot()
    b.append(chunk(rng, 1, 2), [2, 3])
    assert bank_restore(snap).size == 2


def test_array_round_trip_bitwise():
    rng = np.random.default_rng(6)
    b = bank_new(2)
    for k, lo in ((2, 0), (3, 10), (1, 20)):
        b.append(chunk(rng, 2, k, batch=2), range(lo, lo + k))
    back = MemoryBank.from_arrays(b.to_arrays())
    assert back.segment_offsets == b.segment_offsets and back.positions == b.positions
    for i in range(2):
        assert back.keys(i).tobytes() == b.keys(i).tobytes()
        assert back.values(i).tobytes() == b.values(i).tobytes()


def test_detach_cuts_gradient():
    k = Tensor(np.ones((1, 1, 2)), requires_grad=True)
    b = bank_new(1)
    b.append([(k, k)], [0], detach=True)
    assert not b.layer_kv(0)[0].requires_grad
