"""Command line: phantom-gen, train, predict, evaluate, agree, ablate.

Diagnostics go to stderr; stdout carries only contracted values (the
predict timing line).  Exit code 0 means no errors.  Heavy imports are
deferred until after the thread count is pinned, because the math
libraries read their thread environment variables at import time.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

log = logging.getLogger(__name__)

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "NUMBA_NUM_THREADS",
)


def _set_threads(n: int) -> None:
    """Pin the math libraries before numpy/numba load.  1 = deterministic."""
    if n < 1:
        raise ValueError(f"threads must be >= 1, got {n}")
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(n)


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"--dims wants X,Y,Z, got {text!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--dims wants three ints, got {text!r}")
    return dims


def _parse_split(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            f"--split wants TRAIN,VAL,TEST counts, got {text!r}"
        )
    try:
        counts = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--split wants three ints, got {text!r}")
    return counts


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration file (key = value lines)")
    p.add_argument("--variant", help="mres-multi | mres-single | unet-baseline")
    p.add_argument("--out", help="run directory")
    p.add_argument("--manifest", help="dataset manifest (subject\\tvolume\\tlabels\\tsplit)")
    p.add_argument("--seed", type=int, help="master seed for every random stream")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--depth", type=int)
    p.add_argument("--base-channels", type=int, dest="base_channels")
    p.add_argument("--crop", help="'none' or HxW preprocessing window")
    p.add_argument("--threads", type=int, help="math library threads (default 1)")


_TRAIN_OVERRIDE_KEYS = (
    "variant",
    "out",
    "manifest",
    "seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "depth",
    "base_channels",
    "crop",
)


def _merged_config(args: argparse.Namespace):
    """File values plus flag overrides; pins threads before heavy imports."""
    from .config import parse_config_text

    values: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            values = parse_config_text(f.read(), source=args.config)
    threads = args.threads if args.threads is not None else values.get("threads", 1)
    _set_threads(threads)

    from dataclasses import replace

    from .config import RunConfig

    overrides = {k: getattr(args, k) for k in _TRAIN_OVERRIDE_KEYS}
    values.update({k: v for k, v in overrides.items() if v is not None})
    values["threads"] = threads
    return replace(RunConfig(), **values).validate()


def _cmd_phantom_gen(args: argparse.Namespace) -> int:
    _set_threads(args.threads if args.threads is not None else 1)
    from pathlib import Path

    from .errors import ConfigError

    out_path = Path(args.out)
    if out_path.exists() and any(out_path.iterdir()) and not args.force:
        raise ConfigError(
            f"output directory {out_path} is not empty; pass --force to write into it"
        )
    from .phantom import generate_dataset

    manifest = generate_dataset(
        args.out, args.count, args.seed, dims=args.dims, split_counts=args.split
    )
    log.info("wrote %d phantoms and %s", args.count, manifest)
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = _merged_config(args)
    from .train import train_cascade

    result = train_cascade(config)
    last = result.stage2_entries[-1]
    log.info(
        "run complete in %s: val dice %.3f/%.3f/%.3f",
        result.out_dir,
        last.val_dice_prostate,
        last.val_dice_cg,
        last.val_dice_pz,
    )
    return 0


def _cmd_predict(args: argparse.Namespace) -> int:
    _set_threads(args.threads if args.threads is not None else 1)
    from pathlib import Path

    from .cascade import segment_volume
    from .mvol import read_mvol, write_mvol
    from .train import load_cascade

    cascade, _ = load_cascade(args.weights)
    volume = read_mvol(args.in_path)
    result = segment_volume(cascade, volume, dump_probs=args.dump_probs)
    write_mvol(result.labels, args.out)
    if args.dump_probs:
        out_path = Path(args.out)
        stem = out_path.with_suffix("")
        write_mvol(result.prostate_probs, f"{stem}_prostate_probs.mvol")
        write_mvol(result.gland_probs, f"{stem}_gland_probs.mvol")
        log.info("probability volumes written next to %s", out_path)
    print(f"mean_per_slice_seconds={result.mean_slice_seconds}")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    _set_threads(args.threads if args.threads is not None else 1)
    from .dataset import read_manifest
    from .evaluate import evaluate_cascade
    from .train import load_cascade

    cascade, _ = load_cascade(args.weights)
    records = [r for r in read_manifest(args.manifest) if r.split == "test"]
    result = evaluate_cascade(cascade, records, args.out)
    log.info(
        "evaluated %d subjects (%d skipped) into %s",
        result.n_subjects,
        len(result.skipped),
        args.out,
    )
    return 0


def _cmd_agree(args: argparse.Namespace) -> int:
    _set_threads(1)
    from pathlib import Path

    from .errors import ConfigError
    from .metrics import bland_altman
    from .report import emit_svg_scatter, read_tpv_csv, write_ba_csv

    records = read_tpv_csv(args.tpv_csv)
    if len(records) < 2:
        raise ConfigError(
            f"agreement statistics need at least 2 subjects, {args.tpv_csv} has "
            f"{len(records)}"
        )
    pairs = [(r.gt_ml, r.pred_ml) for r in records]
    stats = bland_altman(pairs)
    out_path = Path(args.out)
    out_path.mkdir(parents=True, exist_ok=True)
    write_ba_csv(stats, out_path / "ba.csv")
    emit_svg_scatter(pairs, stats, out_path / "agreement.svg")
    log.info("agreement tables for %d subjects written to %s", len(pairs), out_path)
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    config = _merged_config(args)
    from .evaluate import run_ablation

    rows = run_ablation(config, config.out)
    log.info("comparison over %d variants written to %s", len(rows), config.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zoneseg",
        description="Cascaded two-stage prostate zone segmentation on MVOL volumes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True, help="number of phantoms")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dims", type=_parse_dims, default=(64, 64, 32), help="X,Y,Z grid")
    p.add_argument(
        "--split", type=_parse_split, default=None,
        help="TRAIN,VAL,TEST subject counts (default: about 70/15/15)",
    )
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_phantom_gen)

    p = sub.add_parser("train", help="train the two-stage cascade")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="segment one volume with a trained run")
    p.add_argument("--weights", required=True, help="training run directory")
    p.add_argument("--in", dest="in_path", required=True, help="input .mvol volume")
    p.add_argument("--out", required=True, help="output .mvol label volume")
    p.add_argument(
        "--dump-probs", action="store_true", dest="dump_probs",
        help="also write per-stage probability volumes",
    )
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="score a trained run on the test split")
    p.add_argument("--weights", required=True, help="training run directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("agree", help="agreement statistics from a volume table")
    p.add_argument("--tpv-csv", required=True, dest="tpv_csv")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=_cmd_agree)

    p = sub.add_parser("ablate", help="train and compare all three variants")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, RuntimeError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
