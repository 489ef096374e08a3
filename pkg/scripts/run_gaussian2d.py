"""Train an auto-encoder head on four 2-D Gaussians and map its accepted region.

Usage: python scripts/run_gaussian2d.py [--mode cssr] [--error mae] [--out-dir runs/g2d]

Prints closed accuracy, per-score AUROC against uniform background points and
the fraction of a [-10, 10]^2 grid that is accepted, and writes a PGM map.
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from cssr.data import Dataset, gen_gaussian_2d
from cssr.pipeline import evaluate_result, run_unknown_inference_pipeline, score_breakdown
from cssr.render import render_open_space_map, write_pgm
from cssr.train import gaussian2d_preset, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--mode", choices=("cssr", "rcssr"), default="cssr")
    p.add_argument("--error", choices=("mae", "mse"), default="mae")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--bounds", type=float, default=10.0, help="half-width of the rendered square")
    p.add_argument("--out-dir", type=Path, default=Path("runs/gaussian2d"))
    args = p.parse_args()

    cfg = gaussian2d_preset(args.mode, args.seed, args.error)
    if args.epochs:
        cfg = replace(cfg, epochs=args.epochs)
    data = gen_gaussian_2d(seed=args.seed)
    model, history = train(cfg, data)
    known = gen_gaussian_2d(seed=args.seed + 1)
    bg = np.random.default_rng(args.seed + 2).uniform(-6, 6, (2000, 2))
    test = Dataset(np.concatenate([known.x, bg]), np.concatenate([known.y, np.full(len(bg), 4)]), 5)
    result = run_unknown_inference_pipeline(model, data, test, cfg.augment, cfg.weights, cfg.gram_power)
    report = evaluate_result(result, test.y, 4)
    breakdown = score_breakdown(result, test.y, 4)
    b = args.bounds
    grid = render_open_space_map(model, result.stats, (-b, b, -b, b), 128)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_pgm(args.out_dir / "open_space.pgm", grid)
    summary = {"report": report.to_dict(), "auroc_by_score": breakdown, "threshold": result.threshold,
               "accepted_fraction": float(grid.accepted.mean()), "train_seconds": history.seconds}
    (args.out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(report.summary())
    print("AUROC by score:", {k: round(v, 4) for k, v in breakdown.items()})
    print(f"accepted fraction of [-{b:g},{b:g}]^2: {grid.accepted.mean():.3f}; outputs in {args.out_dir}")


if __name__ == "__main__":
    main()
