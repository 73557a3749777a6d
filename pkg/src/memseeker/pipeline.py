"""Segment a stream, compress each segment into the bank, answer from the bank.

The organized sequence is

    V_1 Q M_1 <split>  V_2 Q M_2 <split>  ...  V_S Q M_S <split>  Q  answer

Each ``V_i Q M_i <split>`` block is one forward pass; only the memory rows'
per-layer K/V survive it (appended to the bank). The answer block re-reads the
last ``<split>`` (its K/V was not kept), then the question, then decodes with
nothing but the bank as history.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .membank import MemoryBank
from .model import AttentionProbe, ModelConfig, ModelParams, StateError, forward_block
from .tasks import TaskSample
from .vocab import Vocabulary

__all__ = [
    "LayoutError",
    "SegmentBlock",
    "FinalBlock",
    "SegmentedLayout",
    "ProfileReport",
    "EpisodeResult",
    "MEMORY_SLOT",
    "mem_count",
    "plan_layout",
    "batch_layouts",
    "process_segment",
    "encode_stream",
    "decode_answer",
    "run_episode",
    "run_episodes",
    "layout_signature",
]

MEMORY_SLOT = -1  # stands in for a memory token in organized_sequence()


class LayoutError(ValueError):
    pass


def mem_count(n_tokens: int, alpha: int) -> int:
    return max(1, math.ceil(n_tokens / alpha))


@dataclass
class SegmentBlock:
    video_tokens: np.ndarray  # [Nv] or [B, Nv]
    question_tokens: np.ndarray  # [|Q|] or [B, |Q|]
    mem_count: int
    split_token: int
    start_pos: int

    @property
    def n_video(self) -> int:
        return self.video_tokens.shape[-1]

    @property
    def mem_offset(self) -> int:
        return self.n_video + self.question_tokens.shape[-1]

    @property
    def n_regular(self) -> int:
        return self.mem_offset + 1

    @property
    def length(self) -> int:
        return self.n_regular + self.mem_count

    def regular_tokens(self) -> np.ndarray:
        """[V, Q, split] as the regular rows of the block."""
        lead = self.video_tokens.shape[:-1]
        split = np.full(lead + (1,), self.split_token, dtype=np.int64)
        return np.concatenate([self.video_tokens, self.question_tokens, split], axis=-1)

    def memory_positions(self) -> list[int]:
        return list(range(self.start_pos + self.mem_offset, self.start_pos + self.mem_offset + self.mem_count))


@dataclass
class FinalBlock:
    split_token: int
    question_tokens: np.ndarray
    start_pos: int  # the position of the last block's <split>

    @property
    def answer_start(self) -> int:
        return self.start_pos + 1 + self.question_tokens.shape[-1]

    def tokens(self) -> np.ndarray:
        lead = self.question_tokens.shape[:-1]
        split = np.full(lead + (1,), self.split_token, dtype=np.int64)
        return np.concatenate([split, self.question_tokens], axis=-1)


@dataclass
class SegmentedLayout:
    segments: list[SegmentBlock]
    final_block: FinalBlock

    @property
    def mem_counts(self) -> list[int]:
        return [b.mem_count for b in self.segments]

    @property
    def total_memory(self) -> int:
        return sum(self.mem_counts)

    @property
    def batch_size(self) -> int:
        q = self.final_block.question_tokens
        return 1 if q.ndim == 1 else q.shape[0]

    def organized_sequence(self) -> list[int]:
        """The flat organized sequence with MEMORY_SLOT for memory tokens (unbatched)."""
        seq: list[int] = []
        for b in self.segments:
            seq += [int(t) for t in b.video_tokens]
            seq += [int(t) for t in b.question_tokens]
            seq += [MEMORY_SLOT] * b.mem_count
            seq.append(b.split_token)
        return seq + [int(t) for t in self.final_block.question_tokens]

    def peak_width(self, max_new: int = 1) -> int:
        """Widest attention context: segment blocks, then the answer block."""
        widths, P = [], 0
        for b in self.segments:
            widths.append(P + b.length)
            P += b.mem_count
        q = self.final_block.question_tokens.shape[-1]
        widths.append(P + 1 + q + max(0, max_new - 1))
        return max(widths)


def plan_layout(frames, question, cfg: ModelConfig, split_token: int | None = None) -> SegmentedLayout:
    frames = np.asarray(frames, dtype=np.int64)
    question = np.asarray(question, dtype=np.int64)
    if frames.shape[-1] == 0:
        raise LayoutError("frames must be non-empty")
    if split_token is None:
        split_token = Vocabulary.standard().split
    segments: list[SegmentBlock] = []
    pos = 0
    for lo in range(0, frames.shape[-1], cfg.seg_len):
        video = frames[..., lo: lo + cfg.seg_len]
        k = mem_count(video.shape[-1], cfg.alpha)
        if k > cfg.max_memory_slots:
            raise LayoutError(f"segment needs k={k} memory tokens but max_memory_slots={cfg.max_memory_slots}")
        block = SegmentBlock(video, question, k, split_token, pos)
        segments.append(block)
        pos += block.length
    final = FinalBlock(split_token, question, pos - 1)
    return SegmentedLayout(segments, final)


def layout_signature(sample: TaskSample) -> tuple[int, int, int]:
    return sample.T, len(sample.question), len(sample.answer)


def batch_layouts(samples: list[TaskSample], cfg: ModelConfig, split_token: int | None = None) -> SegmentedLayout:
    """One layout whose token arrays carry a leading batch axis.

    All samples must share T and question length, so no padding is needed.
    """
    sigs = {(s.T, len(s.question)) for s in samples}
    if len(sigs) != 1:
        raise LayoutError(f"cannot batch samples with differing shapes {sorted(sigs)}")
    frames = np.stack([s.frames for s in samples])
    question = np.stack([s.question for s in samples])
    return plan_layout(frames, question, cfg, split_token)


def process_segment(params: ModelParams, bank: MemoryBank, block: SegmentBlock, detach: bool = False) -> MemoryBank:
    tokens = block.regular_tokens()
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    out = forward_block(params, bank, tokens, block.mem_count, block.start_pos,
                        mem_offset=block.mem_offset, want_logits=False)
    return bank.append(out.mem_kv, block.memory_positions(), detach=detach)


def encode_stream(params: ModelParams, layout: SegmentedLayout, *, detach: bool = False,
                  history: bool = True) -> MemoryBank:
    """Run every segment block; ``history=False`` keeps only the last segment's memory."""
    bank = MemoryBank(params.config.n_layers)
    for block in layout.segments:
        if not history:
            bank = MemoryBank(params.config.n_layers)
        process_segment(params, bank, block, detach=detach)
    return bank


def decode_answer(params: ModelParams, bank: MemoryBank, question, max_new: int, start_pos: int,
                  split_token: int | None = None, eos: int | None = None) -> np.ndarray:
    """Greedy decoding from the bank plus ``[<split>, Q]``.

    ``start_pos`` is the position of the final ``<split>``. Returns [B, n] (or
    [n] for an unbatched question); rows that hit ``eos`` are padded with it.
    """
    if bank.size == 0:
        raise StateError("cannot decode from an empty memory bank")
    question = np.asarray(question, dtype=np.int64)
    squeeze = question.ndim == 1
    if squeeze:
        question = question[None, :]
    if split_token is None:
        split_token = Vocabulary.standard().split
    B = question.shape[0]
    if max_new <= 0:
        empty = np.zeros((B, 0), dtype=np.int64)
        return empty[0] if squeeze else empty
    cfg = params.config
    probe = AttentionProbe._active
    block = np.concatenate([np.full((B, 1), split_token, dtype=np.int64), question], axis=1)
    pos = start_pos
    cache = None
    out = np.zeros((B, 0), dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    with nc.no_grad():
        for step in range(max_new):
            res = forward_block(params, bank, block, 0, pos, extra_past=cache, want_regular_kv=True)
            nxt = np.argmax(res.logits.data[:, -1, :], axis=-1).astype(np.int64)
            if eos is not None:
                nxt = np.where(done, eos, nxt)
                done |= nxt == eos
            out = np.concatenate([out, nxt[:, None]], axis=1)
            if eos is not None and done.all():
                break
            pos += block.shape[1]
            cache = [
                (kr, vr) if cache is None else (nc.concat([cache[i][0], kr], axis=1), nc.concat([cache[i][1], vr], axis=1))
                for i, (kr, vr) in enumerate(res.regular_kv)
            ]
            if probe is not None:
                probe.resident_scalars = bank.n_scalars() + sum(k.data.size + v.data.size for k, v in cache)
            block = nxt[:, None]
            if pos + 1 > cfg.max_position:
                break
    return out[0] if squeeze else out


@dataclass
class ProfileReport:
    peak_attention_width: int
    bank_entries_final: int
    peak_live_scalars: int
    wall_ms: float
    segments: int


@dataclass
class EpisodeResult:
    answer_tokens: np.ndarray
    bank_stats: dict
    profile: ProfileReport
    layout: SegmentedLayout | None = field(default=None, repr=False)
    bank: MemoryBank | None = field(default=None, repr=False)


def _bank_stats(bank: MemoryBank) -> dict:
    return {"P": bank.size, "segments": bank.n_segments, "segment_offsets": list(bank.segment_offsets),
            "per_layer": [bank.keys(i).shape[1] for i in range(bank.n_layers)]}


def _run_batch(params: ModelParams, samples: list[TaskSample], max_new: int, vocab: Vocabulary,
               history: bool, eos: int | None) -> tuple[np.ndarray, MemoryBank, SegmentedLayout, AttentionProbe, float]:
    layout = batch_layouts(samples, params.config, vocab.split)
    probe = AttentionProbe()
    t0 = time.perf_counter()
    with nc.no_grad(), probe.activate():
        bank = MemoryBank(params.config.n_layers)
        for block in layout.segments:
            if not history:
                bank = MemoryBank(params.config.n_layers)
            probe.resident_scalars = bank.n_scalars()
            process_segment(params, bank, block)
        probe.resident_scalars = bank.n_scalars()
        answers = decode_answer(params, bank, layout.final_block.question_tokens, max_new,
                                layout.final_block.start_pos, vocab.split, eos)
    wall = (time.perf_counter() - t0) * 1000.0
    return answers, bank, layout, probe, wall


def run_episode(params: ModelParams, sample: TaskSample, vocab: Vocabulary | None = None, *,
                max_new: int | None = None, history: bool = True, eos: int | None = None) -> EpisodeResult:
    vocab = vocab or Vocabulary.standard()
    if max_new is None:
        max_new = len(sample.answer)
    answers, bank, layout, probe, wall = _run_batch(params, [sample], max_new, vocab, history, eos)
    report = ProfileReport(
        peak_attention_width=probe.peak_width,
        bank_entries_final=bank.size,
        peak_live_scalars=probe.peak_live,
        wall_ms=wall,
        segments=len(layout.segments),
    )
    single = plan_layout(sample.frames, sample.question, params.config, vocab.split)
    return EpisodeResult(answers[0], _bank_stats(bank), report, single, bank)


def run_episodes(params: ModelParams, samples: list[TaskSample], vocab: Vocabulary | None = None, *,
                 max_new: int | None = None, history: bool = True, eos: int | None = None,
                 batch_size: int = 64) -> list[np.ndarray]:
    """Decoded answers for many samples, batching those with identical layouts."""
    vocab = vocab or Vocabulary.standard()
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(samples):
        n = len(s.answer) if max_new is None else max_new
        groups.setdefault((s.T, len(s.question), n), []).append(i)
    results: list[np.ndarray | None] = [None] * len(samples)
    for (_, _, n), idx in groups.items():
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo: lo + batch_size]
            answers, *_ = _run_batch(params, [samples[i] for i in chunk], n, vocab, history, eos)
            for j, i in enumerate(chunk):
                results[i] = answers[j]
    return results
