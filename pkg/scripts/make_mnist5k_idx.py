"""Export the 5,000-digit MNIST subset shipped with mlxtend as IDX files.

Usage: python scripts/make_mnist5k_idx.py OUT_DIR [--test-fraction 0.2]
"""

import argparse

from cssr.data import export_mnist5k, load_idx_dir


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out_dir")
    p.add_argument("--test-fraction", type=float, default=0.2)
    args = p.parse_args()
    d = export_mnist5k(args.out_dir, args.test_fraction)
    for part in ("train", "test"):
        ds = load_idx_dir(d, part)
        print(f"{part}: {len(ds)} images of shape {ds.x.shape[1:]}")


if __name__ == "__main__":
    main()
