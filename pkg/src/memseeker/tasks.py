"""Synthetic long-context tasks.

Every stream is one token per frame at 1 fps, so a frame index is also its
timestamp in seconds. Three kinds are generated:

* ``needle``: filler haystack with one value token; the key that names it sits
  in the neighbouring frame. Question ``[QUERY, key]``, answer ``[value]``.
* ``multiclue``: two-frame events ``(entity, value)`` scattered through the
  stream. The target entity is written ``n_clues`` times, other entities
  ``n_distractors`` times. Question ``[QUERY, entity]``; the answer aggregates
  the target chain (last write by default). With ``with_timestamps`` the answer
  continues ``SEMI t1 TSEP t2 TSEP ... EOS`` with the decimal frame indices.
* ``summary``: a few value tokens in filler; the answer lists them in order.
  Used for the memory-only warmup stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .vocab import Vocabulary

__all__ = [
    "TaskSample",
    "DatasetSpec",
    "GeneratorError",
    "ConfigError",
    "gen_needle",
    "gen_multiclue",
    "gen_summary",
    "gen_split",
    "make_sample",
    "solve_from_clues",
    "solve_from_stream",
    "write_samples",
    "read_samples",
    "expand_frames",
]

KINDS = ("needle", "multiclue", "summary")
_STD = Vocabulary.standard()


class GeneratorError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TaskSample:
    kind: str
    seed: int
    frames: np.ndarray
    question: np.ndarray
    answer: np.ndarray
    clue_timestamps: list[float]
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return int(self.frames.shape[0])

    def same_as(self, other: "TaskSample") -> bool:
        return (
            self.kind == other.kind
            and self.seed == other.seed
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.question, other.question)
            and np.array_equal(self.answer, other.answer)
            and list(self.clue_timestamps) == list(other.clue_timestamps)
        )


def _rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), stream])))


def _ints(xs) -> np.ndarray:
    return np.asarray(xs, dtype=np.int64)


def _timestamp_tail(ts: Iterable[float], vocab: Vocabulary) -> list[int]:
    tail = [vocab.semi]
    for t in ts:
        tail += vocab.encode_number(int(t)) + [vocab.tsep]
    return tail + [vocab.eos]


def gen_needle(seed: int, T: int, depth: float, vocab: Vocabulary = _STD) -> TaskSample:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 <= depth <= 1.0:
        raise ValueError("depth must be in [0, 1]")
    rng = _rng(seed)
    frames = rng.choice(_ints(vocab.fillers), size=T)
    key = int(rng.choice(vocab.keys))
    value = int(rng.choice(vocab.values))
    p = int(math.floor(depth * (T - 1)))
    frames[p] = value
    if T > 1:
        frames[p - 1 if p > 0 else p + 1] = key
    return TaskSample(
        kind="needle",
        seed=seed,
        frames=frames,
        question=_ints([vocab.query, key]),
        answer=_ints([value]),
        clue_timestamps=[float(p)],
        meta={"T": T, "depth": depth, "needle_index": p},
    )


def _place_events(rng: np.random.Generator, T: int, n: int, tries: int = 64) -> list[int]:
    """Start frames of n non-overlapping two-frame events."""
    if 2 * n > T:
        raise GeneratorError(f"cannot fit {n} two-frame events in T={T}")
    for _ in range(tries):
        taken = np.zeros(T, dtype=bool)
        starts = []
        for _ in range(n):
            for _ in range(tries):
                p = int(rng.integers(0, T - 1))
                if not taken[p] and not taken[p + 1]:
                    taken[p] = taken[p + 1] = True
                    starts.append(p)
                    break
            else:
                break
        if len(starts) == n:
            return starts
    raise GeneratorError(f"placement of {n} events in T={T} failed after {tries} retries")


def _aggregate(values: list[int], aggregate: str, vocab: Vocabulary) -> int:
    if aggregate == "last":
        return values[-1]
    if aggregate == "sum":
        vs = vocab.values
        return vs[sum(vs.index(v) for v in values) % len(vs)]
    raise ValueError(f"unknown aggregate {aggregate!r}")


def gen_multiclue(seed: int, T: int, n_clues: int, n_distractors: int, *,
                  with_timestamps: bool = False, aggregate: str = "last",
                  vocab: Vocabulary = _STD) -> TaskSample:
    if n_clues < 2:
        raise ValueError("n_clues must be >= 2")
    if T < n_clues + n_distractors:
        raise ValueError("T too small for the requested clues")
    rng = _rng(seed)
    frames = rng.choice(_ints(vocab.fillers), size=T)
    starts = _place_events(rng, T, n_clues + n_distractors)
    target = int(rng.choice(vocab.entities))
    others = [e for e in vocab.entities if e != target]
    target_frames = sorted(starts[:n_clues])
    # chain values in time order; neighbours differ so the last write is informative
    chain = [int(rng.choice(vocab.values))]
    for _ in range(n_clues - 1):
        chain.append(int(rng.choice([v for v in vocab.values if v != chain[-1]])))
    if aggregate == "sum":
        chain = [int(rng.choice(vocab.values[1:])) for _ in range(n_clues)]
    for p, v in zip(target_frames, chain):
        frames[p], frames[p + 1] = target, v
    for p in starts[n_clues:]:
        frames[p], frames[p + 1] = int(rng.choice(others)), int(rng.choice(vocab.values))
    answer = [_aggregate(chain, aggregate, vocab)]
    ts = [float(p) for p in target_frames]
    if with_timestamps:
        answer += _timestamp_tail(ts, vocab)
    sample = TaskSample(
        kind="multiclue",
        seed=seed,
        frames=frames,
        question=_ints([vocab.query, target]),
        answer=_ints(answer),
        clue_timestamps=ts,
        meta={"T": T, "n_clues": n_clues, "n_distractors": n_distractors,
              "with_timestamps": with_timestamps, "aggregate": aggregate},
    )
    if not np.array_equal(solve_from_stream(sample, vocab), sample.answer):
        raise GeneratorError("generated multiclue sample is not uniquely solvable")
    return sample


def gen_summary(seed: int, T: int, n_marks: int, vocab: Vocabulary = _STD) -> TaskSample:
    if not 1 <= n_marks <= T:
        raise ValueError("need 1 <= n_marks <= T")
    rng = _rng(seed)
    frames = rng.choice(_ints(vocab.fillers), size=T)
    where = np.sort(rng.choice(T, size=n_marks, replace=False))
    marks = rng.choice(_ints(vocab.values), size=n_marks)
    frames[where] = marks
    return TaskSample(
        kind="summary",
        seed=seed,
        frames=frames,
        question=_ints([vocab.query, vocab.summary]),
        answer=marks.astype(np.int64),
        clue_timestamps=[float(t) for t in where],
        meta={"T": T, "n_marks": n_marks},
    )


# ---------------------------------------------------------------------------
# symbolic oracles


def solve_from_clues(sample: TaskSample, vocab: Vocabulary = _STD) -> np.ndarray:
    """Answer computed from the frames at the clue timestamps only."""
    ts = [int(t) for t in sample.clue_timestamps]
    if sample.kind == "needle":
        return _ints([sample.frames[ts[0]]])
    if sample.kind == "summary":
        return _ints([sample.frames[t] for t in ts])
    if sample.kind == "multiclue":
        target = int(sample.question[1])
        chain = []
        for t in ts:
            if sample.frames[t] != target:
                raise GeneratorError(f"frame {t} is not a clue for entity {target}")
            chain.append(int(sample.frames[t + 1]))
        answer = [_aggregate(chain, sample.meta.get("aggregate", "last"), vocab)]
        if sample.meta.get("with_timestamps"):
            answer += _timestamp_tail(ts, vocab)
        return _ints(answer)
    raise ValueError(f"unknown kind {sample.kind!r}")


def solve_from_stream(sample: TaskSample, vocab: Vocabulary = _STD) -> np.ndarray:
    """Answer recovered by scanning the whole stream, ignoring the stored clues."""
    frames = sample.frames
    values = set(vocab.values)
    if sample.kind == "needle":
        key = int(sample.question[1])
        hits = []
        for i, tok in enumerate(frames):
            if tok == key:
                hits += [int(frames[j]) for j in (i - 1, i + 1) if 0 <= j < len(frames) and frames[j] in values]
        if not hits:
            hits = [int(t) for t in frames if t in values]
        if len(set(hits)) != 1:
            raise GeneratorError("needle value is ambiguous")
        return _ints(hits[:1])
    if sample.kind == "summary":
        return _ints([t for t in frames if t in values])
    if sample.kind == "multiclue":
        target = int(sample.question[1])
        ts, chain = [], []
        i = 0
        while i < len(frames) - 1:
            if frames[i] == target and frames[i + 1] in values:
                ts.append(i)
                chain.append(int(frames[i + 1]))
                i += 2
            else:
                i += 1
        if not chain:
            raise GeneratorError("no clue for the queried entity")
        answer = [_aggregate(chain, sample.meta.get("aggregate", "last"), vocab)]
        if sample.meta.get("with_timestamps"):
            answer += _timestamp_tail(ts, vocab)
        return _ints(answer)
    raise ValueError(f"unknown kind {sample.kind!r}")


def expand_frames(frames: np.ndarray, tokens_per_frame: int) -> np.ndarray:
    """Token stream for multi-token frames (each frame token repeated)."""
    if tokens_per_frame < 1:
        raise ValueError("tokens_per_frame must be >= 1")
    return np.repeat(frames, tokens_per_frame)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetSpec:
    kind: str = "needle"
    n_train: int = 3000
    n_val: int = 100
    n_test: int = 100
    t_min: int = 32
    t_max: int = 512
    t_step: int = 32
    seed: int = 0
    val_seed: int | None = None
    test_seed: int | None = None
    n_clues: int = 2
    n_distractors: int = 2
    n_marks: int = 2
    with_timestamps: bool = False
    aggregate: str = "last"
    depth_min: float = 0.0
    depth_max: float = 1.0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"task.kind must be one of {KINDS}, got {self.kind!r}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("task sizes must be >= 0")
        if not 1 <= self.t_min <= self.t_max or self.t_step < 1:
            raise ConfigError("task T range is invalid")
        if not 0.0 <= self.depth_min <= self.depth_max <= 1.0:
            raise ConfigError("task depth range must lie in [0, 1]")
        ranges = self.seed_ranges()
        names = list(ranges)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                lo_a, hi_a = ranges[a]
                lo_b, hi_b = ranges[b]
                if lo_a < hi_b and lo_b < hi_a:
                    raise ConfigError(f"seed ranges of {a} and {b} overlap")

    def seed_ranges(self) -> dict[str, tuple[int, int]]:
        train = (self.seed, self.seed + self.n_train)
        vs = train[1] if self.val_seed is None else self.val_seed
        val = (vs, vs + self.n_val)
        ts = val[1] if self.test_seed is None else self.test_seed
        test = (ts, ts + self.n_test)
        return {"train": train, "val": val, "test": test}

    def lengths(self) -> list[int]:
        return list(range(self.t_min, self.t_max + 1, self.t_step))


def make_sample(spec: DatasetSpec, seed: int, vocab: Vocabulary = _STD) -> TaskSample:
    rng = _rng(seed, stream=1)
    T = int(rng.choice(spec.lengths()))
    if spec.kind == "needle":
        depth = float(rng.uniform(spec.depth_min, spec.depth_max))
        return gen_needle(seed, T, depth, vocab)
    if spec.kind == "multiclue":
        return gen_multiclue(seed, T, spec.n_clues, spec.n_distractors,
                             with_timestamps=spec.with_timestamps, aggregate=spec.aggregate, vocab=vocab)
    return gen_summary(seed, T, spec.n_marks, vocab)


def gen_split(spec: DatasetSpec, vocab: Vocabulary = _STD) -> dict[str, list[TaskSample]]:
    spec.validate()
    return {
        name: [make_sample(spec, s, vocab) for s in range(lo, hi)]
        for name, (lo, hi) in spec.seed_ranges().items()
    }


def with_T(spec: DatasetSpec, T: int) -> DatasetSpec:
    return replace(spec, t_min=T, t_max=T)


# ---------------------------------------------------------------------------
# text sample files: kind,seed,T,frames,question,answer,clue_ts


def _fmt_ts(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(float(t))


def format_sample(s: TaskSample) -> str:
    def ids(a):
        return " ".join(str(int(x)) for x in a)

    return ",".join([s.kind, str(s.seed), str(s.T), ids(s.frames), ids(s.question), ids(s.answer),
                     " ".join(_fmt_ts(t) for t in s.clue_timestamps)])


def parse_sample(line: str) -> TaskSample:
    parts = line.rstrip("\n").split(",")
    if len(parts) != 7:
        raise ValueError(f"expected 7 columns, got {len(parts)}")
    kind, seed, T, frames, question, answer, ts = parts

    def ids(text):
        return _ints([int(x) for x in text.split()])

    sample = TaskSample(kind=kind, seed=int(seed), frames=ids(frames), question=ids(question),
                        answer=ids(answer), clue_timestamps=[float(x) for x in ts.split()],
                        meta={"T": int(T)})
    if sample.T != int(T):
        raise ValueError(f"T column {T} disagrees with {sample.T} frames")
    return sample


def write_samples(path, samples: Iterable[TaskSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(format_sample(s) + "\n")


def read_samples(path) -> list[TaskSample]:
    return [parse_sample(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
