"""Accuracy, needle grids, clue-grounding mIoU, and the efficiency profiler."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from . import numcore as nc
from .model import AttentionProbe, ModelParams, forward_block
from .pipeline import ProfileReport, mem_count, plan_layout, run_episode, run_episodes
from .tasks import TaskSample, expand_frames, gen_needle, gen_split
from .vocab import Vocabulary

__all__ = [
    "accuracy",
    "NiahGrid",
    "niah_grid",
    "write_niah_csv",
    "read_niah_csv",
    "write_niah_svg",
    "max_matching",
    "miou_at_theta",
    "parse_timestamps",
    "GroundingReport",
    "clue_grounding_eval",
    "write_miou_csv",
    "read_miou_csv",
    "read_timestamp_file",
    "score_miou_files",
    "ProfileRow",
    "profile_run",
    "write_profile_csv",
    "read_profile_csv",
    "AblationRow",
    "ablation_sweep",
    "ablation_means",
    "write_ablation_csv",
]

log = logging.getLogger(__name__)

Predictor = Callable[[list[TaskSample]], list[np.ndarray]]


def _model_predictor(params: ModelParams, vocab: Vocabulary, **kw) -> Predictor:
    return lambda samples: run_episodes(params, samples, vocab, **kw)


def accuracy(params: ModelParams | None, samples: list[TaskSample], vocab: Vocabulary | None = None, *,
             predict: Predictor | None = None, history: bool = True) -> float:
    """Exact-match rate of decoded answers against the stored ones."""
    if not samples:
        raise ValueError("accuracy needs at least one sample")
    vocab = vocab or Vocabulary.standard()
    predict = predict or _model_predictor(params, vocab, history=history)
    preds = predict(samples)
    return float(np.mean([np.array_equal(p, s.answer) for p, s in zip(preds, samples)]))


# ---------------------------------------------------------------------------
# needle grid


@dataclass
class NiahGrid:
    lengths: list[int]
    depths: list[float]
    cells: np.ndarray  # [len(depths), len(lengths)]
    trials_per_cell: int
    failed: int = 0

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.float64)
        if self.cells.shape != (len(self.depths), len(self.lengths)):
            raise ValueError(f"cells shaped {self.cells.shape} for {len(self.depths)} depths x {len(self.lengths)} lengths")
        if np.any((self.cells < 0) | (self.cells > 1)):
            raise ValueError("cell accuracies must lie in [0, 1]")

    def __eq__(self, other) -> bool:
        return (isinstance(other, NiahGrid) and self.lengths == other.lengths and self.depths == other.depths
                and self.trials_per_cell == other.trials_per_cell and self.failed == other.failed
                and np.array_equal(self.cells, other.cells))


def _cell_seed(seed: int, li: int, di: int, trial: int) -> int:
    # a fresh, reproducible sample per (length, depth, trial)
    ss = np.random.SeedSequence([seed, li, di, trial])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def niah_grid(params: ModelParams | None, lengths: Sequence[int], depths: Sequence[float], trials: int,
              seed: int, vocab: Vocabulary | None = None, *, predict: Predictor | None = None) -> NiahGrid:
    """Needle accuracy per (depth, length) cell over ``trials`` fresh samples.

    An episode that raises counts as a wrong answer and is tallied in ``failed``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    vocab = vocab or Vocabulary.standard()
    predict = predict or _model_predictor(params, vocab)
    cells = np.zeros((len(depths), len(lengths)))
    failed = 0
    for li, T in enumerate(lengths):
        for di, depth in enumerate(depths):
            samples = [gen_needle(_cell_seed(seed, li, di, t), int(T), float(depth), vocab) for t in range(trials)]
            try:
                preds = predict(samples)
            except Exception:
                preds = []
                for s in samples:
                    try:
                        preds.append(predict([s])[0])
                    except Exception as exc:
                        log.warning("needle episode T=%d depth=%g seed=%d failed: %s", T, depth, s.seed, exc)
                        preds.append(None)
                        failed += 1
            hits = sum(p is not None and np.array_equal(p, s.answer) for p, s in zip(preds, samples))
            cells[di, li] = hits / trials
    return NiahGrid([int(t) for t in lengths], [float(d) for d in depths], cells, trials, failed)


def write_niah_csv(grid: NiahGrid, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["depth\\length"] + [str(t) for t in grid.lengths])
        for d, row in zip(grid.depths, grid.cells):
            w.writerow([repr(d)] + [f"{v:.6f}" for v in row])
        fh.write(f"# trials={grid.trials_per_cell} failed={grid.failed}\n")
    return path


def read_niah_csv(path) -> NiahGrid:
    text = Path(path).read_text()
    body = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    footer = dict(kv.split("=") for ln in text.splitlines() if ln.startswith("#") for kv in ln[1:].split())
    rows = list(csv.reader(io.StringIO("\n".join(body))))
    if not rows or rows[0][0] != "depth\\length":
        raise ValueError(f"{path}: not a needle grid CSV")
    trials = int(footer["trials"])
    lengths = [int(x) for x in rows[0][1:]]
    depths = [float(r[0]) for r in rows[1:]]
    # cells are hit counts over trials; undo the 6-decimal rounding exactly
    cells = np.array([[round(float(v) * trials) / trials for v in r[1:]] for r in rows[1:]]).reshape(len(depths), len(lengths))
    return NiahGrid(lengths, depths, cells, trials, int(footer.get("failed", 0)))


def _heat_colour(acc: float) -> str:
    # red at 0, green at 1
    r = int(round(220 * (1.0 - acc)))
    g = int(round(180 * acc + 20))
    return f"rgb({r},{g},40)"


def write_niah_svg(grid: NiahGrid, path, cell: int = 48) -> Path:
    path = Path(path)
    left, top = 70, 30
    width = left + cell * len(grid.lengths) + 10
    height = top + cell * len(grid.depths) + 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">']
    for li, T in enumerate(grid.lengths):
        x = left + li * cell + cell // 2
        out.append(f'<text x="{x}" y="{top + cell * len(grid.depths) + 16}" text-anchor="middle">{T}</text>')
    for di, d in enumerate(grid.depths):
        y = top + di * cell + cell // 2 + 4
        out.append(f'<text x="{left - 6}" y="{y}" text-anchor="end">{d:g}</text>')
        for li in range(len(grid.lengths)):
            acc = float(grid.cells[di, li])
            out.append(f'<rect x="{left + li * cell}" y="{top + di * cell}" width="{cell}" height="{cell}" '
                       f'fill="{_heat_colour(acc)}" stroke="white"><title>{acc:.6f}</title></rect>')
    out.append(f'<text x="{left}" y="{top - 10}">needle accuracy (depth x length)</text>')
    out.append("</svg>")
    path.write_text("\n".join(out) + "\n")
    return path


# ---------------------------------------------------------------------------
# tolerance matching


def max_matching(pred: Sequence[float], gt: Sequence[float], theta: float) -> int:
    """Size of a maximum matching where p and g may pair iff |p - g| <= theta."""
    if len(pred) == 0 or len(gt) == 0:
        return 0
    adj = np.abs(np.subtract.outer(np.asarray(pred, float), np.asarray(gt, float))) <= theta
    if not adj.any():
        return 0
    match = maximum_bipartite_matching(csr_matrix(adj.astype(np.int8)), perm_type="column")
    return int((match >= 0).sum())


def miou_at_theta(pred: Sequence[float], gt: Sequence[float], theta: float) -> float:
    """Jaccard score over a maximum tolerance matching; two empty sets score 1."""
    if theta < 0 or math.isnan(theta):
        raise ValueError(f"theta must be >= 0, got {theta}")
    if not pred and not gt:
        return 1.0
    m = max_matching(pred, gt, theta)
    return m / (len(pred) + len(gt) - m)


def parse_timestamps(tokens, vocab: Vocabulary | None = None) -> tuple[list[float], bool]:
    """Read ``SEMI d.. TSEP d.. TSEP .. EOS`` out of a decoded answer.

    Returns (timestamps, ok). Anything malformed gives ([], False).
    """
    vocab = vocab or Vocabulary.standard()
    toks = [int(t) for t in tokens]
    if vocab.semi not in toks:
        return [], False
    digits = {d: i for i, d in enumerate(vocab.digits)}
    out: list[float] = []
    cur: list[int] = []
    closed = False
    for t in toks[toks.index(vocab.semi) + 1:]:
        if t in digits:
            cur.append(digits[t])
        elif t == vocab.tsep:
            if not cur:
                return [], False
            out.append(float(int("".join(map(str, cur)))))
            cur = []
        elif t == vocab.eos:
            closed = True
            break
        else:
            return [], False
    if cur or not closed:
        return [], False
    return out, True


@dataclass
class GroundingReport:
    thetas: list[float]
    means: list[float]
    n: int
    flagged: list[int] = field(default_factory=list)  # indices with unparseable timestamps

    def rows(self) -> list[tuple[float, float, int]]:
        return [(t, m, self.n) for t, m in zip(self.thetas, self.means)]


def _score_sets(preds: list[list[float]], gts: list[list[float]], thetas: Sequence[float]) -> list[float]:
    if not preds:
        raise ValueError("no samples to score")
    return [float(np.mean([miou_at_theta(p, g, th) for p, g in zip(preds, gts)])) for th in thetas]


def clue_grounding_eval(params: ModelParams | None, samples: list[TaskSample], thetas: Sequence[float],
                        vocab: Vocabulary | None = None, *, predict: Predictor | None = None,
                        extra_tokens: int = 8) -> GroundingReport:
    """Mean mIoU at each tolerance between decoded and true clue timestamps.

    Answers are decoded greedily up to EOS (with ``extra_tokens`` of slack past
    the reference length); unparseable tails count as empty predictions.
    """
    vocab = vocab or Vocabulary.standard()
    if any(t < 0 for t in thetas):
        raise ValueError("thetas must be >= 0")
    if predict is None:
        max_new = max(len(s.answer) for s in samples) + extra_tokens
        predict = _model_predictor(params, vocab, max_new=max_new, eos=vocab.eos)
    decoded = predict(samples)
    preds, flagged = [], []
    for i, toks in enumerate(decoded):
        ts, ok = parse_timestamps(toks, vocab)
        if not ok:
            flagged.append(i)
        preds.append(ts)
    means = _score_sets(preds, [list(s.clue_timestamps) for s in samples], thetas)
    return GroundingReport([float(t) for t in thetas], means, len(samples), flagged)


def write_miou_csv(report: GroundingReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "mean_miou", "n"])
        for t, m, n in report.rows():
            w.writerow([repr(t), repr(m), n])
    return path


def read_miou_csv(path) -> GroundingReport:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    n = int(rows[0]["n"]) if rows else 0
    return GroundingReport([float(r["theta"]) for r in rows], [float(r["mean_miou"]) for r in rows], n)


def read_timestamp_file(path) -> list[list[float]]:
    """One sample per line, whitespace-separated seconds; a blank line is an empty set."""
    lines = Path(path).read_text().splitlines()
    return [[float(x) for x in ln.replace(",", " ").split()] for ln in lines]


def score_miou_files(pred_path, gt_path, thetas: Sequence[float]) -> GroundingReport:
    preds, gts = read_timestamp_file(pred_path), read_timestamp_file(gt_path)
    if len(preds) != len(gts):
        raise ValueError(f"{pred_path} has {len(preds)} lines but {gt_path} has {len(gts)}")
    if any(t < 0 for t in thetas):
        raise ValueError("thetas must be >= 0")
    return GroundingReport([float(t) for t in thetas], _score_sets(preds, gts, thetas), len(preds))


# ---------------------------------------------------------------------------
# efficiency profile


@dataclass
class ProfileRow:
    T: int
    S: int
    P_final: int
    peak_width: int
    peak_scalars: int
    wall_ms: float
    baseline_width: int
    baseline_scalars: int | None  # None when the budget forbade running it
    ratio: float
    predicted_width: int = 0

    @property
    def budget_exceeded(self) -> bool:
        return self.baseline_scalars is None


def _baseline_scalars(W: int, cfg) -> int:
    # mirrors the probe's count for one full-causal block: q, K, V, scores, probs
    return 3 * W * cfg.d_model + 2 * cfg.n_heads * W * W


def profile_run(params: ModelParams, T: int, vocab: Vocabulary | None = None, *, seed: int = 0,
                budget_scalars: int = 200_000_000, tokens_per_frame: int = 1,
                run_baseline: bool = True) -> ProfileRow:
    """Measure one recurrent episode at length T against a full-attention forward.

    The baseline is a single causal block over ``frames + question`` with no
    memory rows. If its predicted live-scalar count exceeds ``budget_scalars``
    it is not run and ``baseline_scalars`` is reported as None.
    """
    vocab = vocab or Vocabulary.standard()
    cfg = params.config
    if T < cfg.seg_len:
        raise ValueError(f"T={T} must be >= seg_len={cfg.seg_len}")
    sample = gen_needle(seed, T, 0.5, vocab)
    if tokens_per_frame > 1:
        sample = TaskSample(sample.kind, sample.seed, expand_frames(sample.frames, tokens_per_frame),
                            sample.question, sample.answer, sample.clue_timestamps, sample.meta)
    res = run_episode(params, sample, vocab, max_new=1)
    layout = plan_layout(sample.frames, sample.question, cfg, vocab.split)
    rep: ProfileReport = res.profile
    W = len(sample.frames) + len(sample.question)
    predicted = _baseline_scalars(W, cfg)
    measured = None
    if run_baseline and predicted <= budget_scalars:
        if W > cfg.max_position:
            raise ValueError(f"baseline width {W} exceeds max_position={cfg.max_position}")
        probe = AttentionProbe()
        tokens = np.concatenate([sample.frames, sample.question])[None, :]
        with nc.no_grad(), probe.activate():
            forward_block(params, None, tokens, 0, 0)
        if probe.peak_width != W:
            raise AssertionError(f"baseline width {probe.peak_width} != {W}")
        measured = probe.peak_live
    return ProfileRow(
        T=T,
        S=rep.segments,
        P_final=rep.bank_entries_final,
        peak_width=rep.peak_attention_width,
        peak_scalars=rep.peak_live_scalars,
        wall_ms=rep.wall_ms,
        baseline_width=W,
        baseline_scalars=measured,
        ratio=W / rep.peak_attention_width,
        predicted_width=layout.peak_width(1),
    )


PROFILE_FIELDS = ["T", "S", "P_final", "peak_width", "peak_scalars", "wall_ms", "baseline_width",
                  "baseline_scalars", "ratio"]


def write_profile_csv(rows: list[ProfileRow], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PROFILE_FIELDS)
        for r in rows:
            base = "budget-exceeded" if r.baseline_scalars is None else r.baseline_scalars
            w.writerow([r.T, r.S, r.P_final, r.peak_width, r.peak_scalars, f"{r.wall_ms:.3f}", r.baseline_width,
                        base, repr(r.ratio)])
    return path


def read_profile_csv(path) -> list[ProfileRow]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            base = None if r["baseline_scalars"] == "budget-exceeded" else int(r["baseline_scalars"])
            out.append(ProfileRow(int(r["T"]), int(r["S"]), int(r["P_final"]), int(r["peak_width"]),
                                  int(r["peak_scalars"]), float(r["wall_ms"]), int(r["baseline_width"]), base,
                                  float(r["ratio"])))
    return out


# ---------------------------------------------------------------------------
# compression ablation


@dataclass
class AblationRow:
    alpha: int
    seed: int
    accuracy: float
    mean_memory: float  # average P_final over the test set


def ablation_sweep(run_cfg, alphas: Sequence[int], seeds: Sequence[int], out_dir=None,
                   vocab: Vocabulary | None = None) -> list[AblationRow]:
    """Train and test one model per (alpha, seed) on the configured task.

    Data is generated once from ``run_cfg.task`` so every alpha sees the same
    samples; the seed varies initialisation and batch order.
    """
    import dataclasses

    from .train import run_training

    vocab = vocab or Vocabulary.standard()
    splits = gen_split(run_cfg.task, vocab)
    rows = []
    for alpha in alphas:
        for seed in seeds:
            model = dataclasses.replace(run_cfg.model, alpha=int(alpha),
                                        max_memory_slots=max(run_cfg.model.max_memory_slots,
                                                             -(-run_cfg.model.seg_len // int(alpha))))
            cfg = dataclasses.replace(run_cfg, model=model, train=dataclasses.replace(run_cfg.train, seed=int(seed)))
            t0 = time.perf_counter()
            params, _, _ = run_training(cfg, None, splits=splits, vocab=vocab, save=False)
            acc = accuracy(params, splits["test"], vocab)
            mem = float(np.mean([sum(mem_count(min(model.seg_len, s.T - i), model.alpha)
                                     for i in range(0, s.T, model.seg_len)) for s in splits["test"]]))
            log.info("alpha=%d seed=%d acc=%.3f (%.0f s)", alpha, seed, acc, time.perf_counter() - t0)
            rows.append(AblationRow(int(alpha), int(seed), acc, mem))
    if out_dir is not None:
        write_ablation_csv(rows, Path(out_dir) / "ablation.csv")
    return rows


def ablation_means(rows: list[AblationRow]) -> dict[int, float]:
    out: dict[int, list[float]] = {}
    for r in rows:
        out.setdefault(r.alpha, []).append(r.accuracy)
    return {a: float(np.mean(v)) for a, v in out.items()}


def write_ablation_csv(rows: list[AblationRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "seed", "accuracy", "mean_memory"])
        for r in rows:
            w.writerow([r.alpha, r.seed, f"{r.accuracy:.6f}", f"{r.mean_memory:.3f}"])
    return path
