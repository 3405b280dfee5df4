"""Write scikit-learn's bundled 8x8 digits as MNIST-layout IDX files.

No MNIST download is needed: the output directory gets train/test image and
label files that ``llap.data.read_idx`` parses exactly like MNIST.

    python scripts/make_digits_idx.py --out data/digits
"""
import argparse
import os

import numpy as np
from sklearn.datasets import load_digits

from llap.data import write_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/digits")
    ap.add_argument("--test-fraction", type=float, default=1 / 3)
    ap.add_argument("--seed", type=int, default=0, help="seed of the fixed train/test split")
    args = ap.parse_args()

    digits = load_digits()
    images = np.rint(digits.images * (255.0 / 16.0)).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    n_test = int(round(len(labels) * args.test_fraction))
    test, train = order[:n_test], order[n_test:]

    os.makedirs(args.out, exist_ok=True)
    for split, idx in (("train", train), ("test", test)):
        write_idx(os.path.join(args.out, f"{split}-images.idx"), images[idx])
        write_idx(os.path.join(args.out, f"{split}-labels.idx"), labels[idx])
    print(f"wrote {len(train)} train / {len(test)} test digits to {args.out}")


if __name__ == "__main__":
    main()
