"""Command-line entry point: ``memseeker <subcommand> [--config F] [--set k=v ...]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evalkit
from .config import ConfigError, RunConfig, parse_config, parse_config_text
from .model import ModelParams
from .persist import CheckpointError, load_checkpoint
from .tasks import gen_split
from .vocab import Vocabulary

log = logging.getLogger("memseeker")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _load_config(args) -> RunConfig:
    if args.config:
        return parse_config(args.config, args.set)
    return parse_config_text("", args.set)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else Path(cfg.paths.out_dir) / "checkpoint.vdet"


def _load_params(cfg: RunConfig, *, required: bool = True) -> tuple[ModelParams, Vocabulary]:
    path = _checkpoint_path(cfg)
    if not path.exists():
        if required:
            raise FileNotFoundError(f"no checkpoint at {path} (set paths.checkpoint or run train first)")
        log.info("no checkpoint at %s; using freshly initialised weights", path)
        return ModelParams.init(cfg.model, seed=cfg.train.seed), Vocabulary.standard()
    ck = load_checkpoint(path, cfg.model)
    return ck.params, ck.vocab


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args, cfg: RunConfig) -> int:
    from .train import run_training

    out = _out_dir(cfg)
    params = None
    if cfg.paths.checkpoint:
        # continue from an earlier stage (e.g. after the memory-only warmup)
        params, _ = _load_params(cfg)
        if cfg.train.precision == "f64":
            params = params.astype(np.float64)
    _, _, tlog = run_training(cfg, out, params=params)
    final = tlog.evals[-1][1] if tlog.evals else None
    print(f"trained {cfg.train.steps} steps; final loss {tlog.rows[-1][1]:.4f}"
          + (f"; eval_acc {final:.4f}" if final is not None else ""))
    print(f"wrote {out / 'checkpoint.vdet'}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    params, vocab = _load_params(cfg)
    out = _out_dir(cfg)
    test = gen_split(cfg.task, vocab)["test"]
    acc = evalkit.accuracy(params, test, vocab)
    lines = [f"accuracy,{acc:.6f},{len(test)}"]
    print(f"accuracy {acc:.4f} on {len(test)} test samples")
    if cfg.task.kind == "multiclue" and cfg.task.with_timestamps:
        rep = evalkit.clue_grounding_eval(params, test, cfg.eval.thetas, vocab)
        evalkit.write_miou_csv(rep, out / "miou.csv")
        for t, m, n in rep.rows():
            print(f"mIoU@{t:g} {m:.4f} (n={n})")
        if rep.flagged:
            print(f"{len(rep.flagged)} predictions had unparseable timestamps")
    (out / "eval.csv").write_text("metric,value,n\n" + "\n".join(lines) + "\n")
    return 0


def cmd_niah(args, cfg: RunConfig) -> int:
    params, vocab = _load_params(cfg)
    out = _out_dir(cfg)
    lengths = _int_list(args.lengths) if args.lengths else cfg.eval.lengths
    depths = _float_list(args.depths) if args.depths else cfg.eval.depths
    grid = evalkit.niah_grid(params, lengths, depths, cfg.eval.trials, cfg.eval.seed, vocab)
    csv_path = evalkit.write_niah_csv(grid, out / "niah.csv")
    svg_path = evalkit.write_niah_svg(grid, out / "niah.svg")
    print(csv_path.read_text(), end="")
    print(f"wrote {csv_path} and {svg_path}")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    seeds = list(range(cfg.train.seed, cfg.train.seed + args.seeds))
    rows = evalkit.ablation_sweep(cfg, _int_list(args.alphas), seeds, out)
    for alpha, mean in evalkit.ablation_means(rows).items():
        print(f"alpha={alpha} mean_accuracy={mean:.4f}")
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def cmd_profile(args, cfg: RunConfig) -> int:
    params, vocab = _load_params(cfg, required=False)
    out = _out_dir(cfg)
    rows = [
        evalkit.profile_run(params, T, vocab, seed=cfg.eval.seed, budget_scalars=cfg.eval.budget_scalars,
                            tokens_per_frame=cfg.eval.tokens_per_frame)
        for T in _int_list(args.lengths)
    ]
    path = evalkit.write_profile_csv(rows, out / "profile.csv")
    print(path.read_text(), end="")
    return 0


def cmd_score_miou(args, cfg: RunConfig) -> int:
    thetas = _float_list(args.theta) if args.theta else cfg.eval.thetas
    rep = evalkit.score_miou_files(args.pred, args.gt, thetas)
    print("theta,mean_miou,n")
    for t, m, n in rep.rows():
        print(f"{t:g},{m:.6f},{n}")
    if args.out:
        evalkit.write_miou_csv(rep, args.out)
    return 0


def cmd_inspect(args, cfg: RunConfig) -> int:
    path = Path(args.path) if args.path else _checkpoint_path(cfg)
    ck = load_checkpoint(path)
    p = ck.params
    total = sum(t.data.size for t in p.tensors.values())
    mc = ck.config.model
    print(f"checkpoint {path} ({path.stat().st_size} bytes)")
    print(f"model: d_model={mc.d_model} layers={mc.n_layers} heads={mc.n_heads} alpha={mc.alpha} "
          f"seg_len={mc.seg_len} vocab={mc.vocab_size}")
    print(f"vocabulary: {len(ck.vocab)} symbols")
    print(f"tensors: {len(p.tensors)} ({total} scalars, {p.dtype.name})")
    for name, t in p.tensors.items():
        print(f"  {name:24s} {str(t.shape):14s} rms={float(np.sqrt(np.mean(t.data.astype(np.float64) ** 2))):.4g}")
    if ck.opt_state is not None:
        print(f"optimizer state: step {int(ck.opt_state['step'][0])}")
    print(f"rng state: {'present' if ck.rng_state else 'absent'}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "niah": cmd_niah,
    "ablate": cmd_ablate,
    "profile": cmd_profile,
    "score-miou": cmd_score_miou,
    "inspect-ckpt": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat section.key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="memseeker", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("train", parents=[common], help="train a model")
    sub.add_parser("eval", parents=[common], help="test-set accuracy and clue grounding")
    p = sub.add_parser("niah", parents=[common], help="needle accuracy grid (CSV + SVG)")
    p.add_argument("--lengths", help="comma-separated stream lengths (default eval.lengths)")
    p.add_argument("--depths", help="comma-separated depths (default eval.depths)")
    p = sub.add_parser("ablate", parents=[common], help="compression-ratio sweep")
    p.add_argument("--alphas", default="2,8,32")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, counting up from train.seed")
    p = sub.add_parser("profile", parents=[common], help="attention width and memory profile")
    p.add_argument("--lengths", default="512,1024,2048,4096")
    p = sub.add_parser("score-miou", parents=[common], help="score timestamp files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--theta", help="comma-separated tolerances in seconds (default eval.thetas)")
    p.add_argument("--out", help="also write the table as CSV here")
    p = sub.add_parser("inspect-ckpt", parents=[common], help="summarise a checkpoint")
    p.add_argument("path", nargs="?", help="checkpoint file (default paths.checkpoint)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors (exit 2) and --help (exit 0)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    threads = os.environ.get("MEMSEEKER_THREADS")
    if threads is not None and (not threads.isdigit() or int(threads) < 1):
        print(f"memseeker: error: MEMSEEKER_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return 2
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"memseeker {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
