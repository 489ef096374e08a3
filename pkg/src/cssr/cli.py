"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import NonFiniteError
from .data import DataError, Dataset, gen_gaussian_2d, load_idx_dir, make_open_split, split_from_known
from .head import HeadConfig
from .models import AE_MODES, MODES

log = logging.getLogger("cssr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
BACKGROUND_POINTS = 2000
BACKGROUND_BOX = 6.0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file mirroring TrainConfig fields")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", type=Path, help="directory with IDX files (train-*/t10k-*)")
    p.add_argument("--dataset", choices=("idx", "gaussian2d"), default="idx")
    p.add_argument("--out", type=Path)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--error", choices=("mae", "mse"), default=None)
    p.add_argument("--strategy", choices=("sm-ap", "ap-sm"), default=None)
    p.add_argument("--gamma", type=float, default=None, help="magnitude; the sign follows the mode")
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--weights", default=None, help="w1,w2,w3 fusion weights")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--known-classes", default=None, help="comma-separated known class ids")
    p.add_argument("--n-known", type=int, default=6)
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("--checkpoint", type=Path, help="checkpoint to read")
    p.add_argument("--verbose", "-v", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cssr", description="Class-specific semantic reconstruction for open-set recognition")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in (("train", "train a model and fit its score statistics"),
                            ("eval", "evaluate a checkpoint on the test split"),
                            ("infer", "write per-sample decisions for the test split"),
                            ("stats", "refit score statistics for a checkpoint"),
                            ("render2d", "render the accept/reject map of a 2-D model"),
                            ("gradcheck", "finite-difference check of every primitive"),
                            ("theorems", "MSE counterexample and MAE monotonicity check")):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        if name == "render2d":
            p.add_argument("--bounds", default="-6,6,-6,6", help="xmin,xmax,ymin,ymax")
            p.add_argument("--resolution", type=int, default=128)
    return parser


# --- helpers --------------------------------------------------------------------

def _floats(text: str, n: int, flag: str):
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{flag}: expected {n} comma-separated numbers, got {text!r}") from None
    if len(values) != n:
        raise UsageError(f"{flag}: expected {n} comma-separated numbers, got {text!r}")
    return values


def _split(args, class_count: int):
    if args.dataset == "gaussian2d":
        return split_from_known(class_count, range(class_count))
    if args.known_classes:
        try:
            known = [int(v) for v in args.known_classes.split(",")]
        except ValueError:
            raise UsageError(f"--known-classes: bad list {args.known_classes!r}") from None
        return split_from_known(class_count, known, args.trial)
    return make_open_split(class_count, args.n_known, args.trial)


def _load_data(args, meta: Optional[dict] = None):
    """(train, test) with raw labels."""
    dataset = (meta or {}).get("dataset", args.dataset)
    seed = (meta or {}).get("data_seed", args.seed or 0)
    if dataset == "gaussian2d":
        train = gen_gaussian_2d(seed=seed)
        known_test = gen_gaussian_2d(seed=seed + 1)
        bg = np.random.default_rng([seed, 2]).uniform(-BACKGROUND_BOX, BACKGROUND_BOX, (BACKGROUND_POINTS, 2))
        test = Dataset(np.concatenate([known_test.x, bg]),
                       np.concatenate([known_test.y, np.full(len(bg), train.class_count)]), train.class_count)
        return train, test
    if args.data is None:
        raise UsageError("--data DIR is required for the idx dataset")
    return load_idx_dir(args.data, "train"), load_idx_dir(args.data, "test")


def _config(args, num_classes: int):
    from .train import TrainConfig, gaussian2d_preset, image_preset

    mode = args.mode or "cssr"
    seed = args.seed if args.seed is not None else 0
    if args.config:
        try:
            cfg = TrainConfig.from_dict(json.loads(args.config.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{args.config}: {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{args.config}: {exc}") from exc
        if args.mode:
            cfg = replace(cfg, mode=mode)
        if args.seed is not None:
            cfg = replace(cfg, seed=seed)
    elif args.dataset == "gaussian2d":
        cfg = gaussian2d_preset(mode, seed)
    else:
        cfg = image_preset(mode, num_classes, seed)
    head = cfg.head
    gamma = args.gamma if args.gamma is not None else abs(head.gamma)
    head_mode = cfg.mode if cfg.mode in AE_MODES else "cssr"
    head = HeadConfig.for_mode(head_mode, gamma, error_norm=args.error or head.error_norm,
                               strategy=args.strategy or head.strategy, num_classes=num_classes,
                               latent_dim=args.latent_dim or head.latent_dim, seed=head.seed)
    cfg = replace(cfg, head=head)
    if args.weights:
        cfg = replace(cfg, weights=_floats(args.weights, 3, "--weights"))
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    try:
        cfg.validate()
        head.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _known_part(data: Dataset, split) -> Dataset:
    part = data.subset(split.known_mask(data.y))
    return Dataset(part.x, split.remap(part.y), split.num_known)


def _need_checkpoint(args):
    from .checkpoint import load_checkpoint

    if args.checkpoint is None:
        raise UsageError("--checkpoint PATH is required")
    if not args.checkpoint.exists():
        raise DataError(f"{args.checkpoint}: no such checkpoint")
    return load_checkpoint(args.checkpoint)


def _checkpoint_split(ckpt):
    from .data import OpenSetSplit

    s = ckpt.meta["split"]
    return OpenSetSplit(tuple(s["known"]), tuple(s["unknown"]), s["trial_seed"])


def _write_json(path: Optional[Path], payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path is None:
        print(text)
    else:
        path.write_text(text + "\n")


# --- subcommands ----------------------------------------------------------------

def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .pipeline import build_stats
    from .train import train

    if args.out is None:
        raise UsageError("--out PATH is required for train")
    train_raw, _ = _load_data(args)
    split = _split(args, train_raw.class_count)
    cfg = _config(args, split.num_known)
    known = _known_part(train_raw, split)
    model, history = train(cfg, known, verbose=args.verbose)
    stats = None
    if model.mode in AE_MODES:
        stats = build_stats(model, known.x, cfg.augment, cfg.weights, cfg.gram_power)
    meta = {"dataset": args.dataset, "data_seed": args.seed or 0,
            "split": {"known": list(split.known_classes), "unknown": list(split.unknown_classes),
                      "trial_seed": split.trial_seed}}
    save_checkpoint(model, stats, args.out, cfg, meta)
    print(f"trained {cfg.mode} on {len(known)} samples in {history.seconds:.1f}s, "
          f"final accuracy {history.epoch_accuracy[-1]:.4f}; checkpoint {args.out}")
    return EXIT_OK


def _run_pipeline(args, ckpt):
    from .pipeline import run_unknown_inference_pipeline

    train_raw, test_raw = _load_data(args, ckpt.meta)
    split = _checkpoint_split(ckpt)
    known = _known_part(train_raw, split)
    test = Dataset(test_raw.x, split.remap(test_raw.y), split.num_known + 1)
    cfg = ckpt.config
    result = run_unknown_inference_pipeline(ckpt.model, known, test, cfg.augment, cfg.weights,
                                            cfg.gram_power, stats=ckpt.stats)
    return result, test, split, test_raw


def cmd_eval(args) -> int:
    from .pipeline import evaluate_result, score_breakdown

    ckpt = _need_checkpoint(args)
    result, test, split, test_raw = _run_pipeline(args, ckpt)
    m = split.num_known
    report = evaluate_result(result, test.y, m, n_test_classes=test_raw.class_count)
    print(report.summary())
    _write_json(args.out, {"report": report.to_dict(), "auroc_by_score": score_breakdown(result, test.y, m),
                           "threshold": result.threshold})
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = _need_checkpoint(args)
    result, test, split, _ = _run_pipeline(args, ckpt)
    rows = [{"index": i, "score": float(s), "predicted": int(p), "decision": int(d),
             "accepted": bool(d < split.num_known)}
            for i, (s, p, d) in enumerate(zip(result.scores, result.predicted, result.decisions))]
    _write_json(args.out, {"threshold": result.threshold, "unknown_label": split.num_known, "samples": rows})
    if args.out:
        print(f"{len(rows)} decisions written to {args.out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    from .checkpoint import save_checkpoint
    from .pipeline import build_stats

    ckpt = _need_checkpoint(args)
    if ckpt.model.mode not in AE_MODES:
        raise UsageError(f"mode {ckpt.model.mode!r} has no score statistics")
    train_raw, _ = _load_data(args, ckpt.meta)
    known = _known_part(train_raw, _checkpoint_split(ckpt))
    cfg = ckpt.config
    if args.weights:
        cfg = replace(cfg, weights=_floats(args.weights, 3, "--weights"))
    stats = build_stats(ckpt.model, known.x, cfg.augment, cfg.weights, cfg.gram_power)
    out = args.out or args.checkpoint
    save_checkpoint(ckpt.model, stats, out, cfg, ckpt.meta)
    print(f"threshold {stats.threshold:.6g}; means {stats.means}; stds {stats.stds}; written to {out}")
    return EXIT_OK


def cmd_render2d(args) -> int:
    from .render import render_open_space_map, write_pgm

    ckpt = _need_checkpoint(args)
    if ckpt.stats is None:
        raise UsageError("checkpoint has no score statistics; run the stats subcommand")
    if args.out is None:
        raise UsageError("--out PATH is required for render2d")
    try:
        grid = render_open_space_map(ckpt.model, ckpt.stats, _floats(args.bounds, 4, "--bounds"), args.resolution)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_pgm(args.out, grid)
    print(f"{grid.accepted.mean():.3f} of {grid.accepted.size} cells accepted; map written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_end_to_end, check_primitives

    seed = args.seed or 0
    prim = check_primitives(seed)
    print(prim.summary())
    ok = prim.passed
    for mode in MODES:
        rep = check_end_to_end(mode, seed=seed, error_norm=args.error or "mae", strategy=args.strategy or "sm-ap")
        worst = max(r.max_rel_error for r in rep.results)
        print(f"{'PASS' if rep.passed else 'FAIL'} end-to-end {mode:6s} max_rel_err={worst:.3e}")
        ok = ok and rep.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_theorems(args) -> int:
    from .prototype import check_mae_monotonicity, find_mse_counterexample

    seed = args.seed or 0
    print(find_mse_counterexample(seed).summary())
    report = check_mae_monotonicity(seed=seed)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "stats": cmd_stats,
            "render2d": cmd_render2d, "gradcheck": cmd_gradcheck, "theorems": cmd_theorems}


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .train import TrainingDiverged

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
