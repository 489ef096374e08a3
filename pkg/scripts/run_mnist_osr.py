"""Open-set recognition on an MNIST-format IDX directory: CSSR against baselines.

Usage: python scripts/run_mnist_osr.py DATA_DIR [--modes cssr,linear] [--trials 1] [--out results.json]

Each trial draws a 6/4 known/unknown split from its trial seed, trains every
mode on the known classes and reports mean and std of each metric.
"""

import argparse
import json
import logging
from dataclasses import replace

from cssr.data import load_idx_dir, make_open_split
from cssr.pipeline import run_experiment
from cssr.models import MODES
from cssr.train import image_preset


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("data_dir")
    p.add_argument("--modes", default="cssr,linear")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--n-known", type=int, default=6)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    train_data = load_idx_dir(args.data_dir, "train")
    test_data = load_idx_dir(args.data_dir, "test")
    splits = [make_open_split(train_data.class_count, args.n_known, t) for t in range(args.trials)]
    results = {}
    for mode in args.modes.split(","):
        if mode not in MODES:
            p.error(f"unknown mode {mode!r}; choose from {MODES}")
        cfg = image_preset(mode, args.n_known)
        if args.epochs:
            cfg = replace(cfg, epochs=args.epochs)
        report = run_experiment(cfg, train_data, test_data, splits, verbose=args.verbose)
        print(f"== {mode}\n{report.summary()}")
        results[mode] = report.to_dict()
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
