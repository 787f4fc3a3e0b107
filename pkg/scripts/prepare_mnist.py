"""Build the desk-scale MNIST split as gzipped IDX files.

Source is the 5000-image MNIST subset bundled with mlxtend
(``mlxtend/data/data/mnist_5k.csv.gz``: 784 pixel columns then the label,
500 images per class).  Each class is shuffled with a fixed seed and split
400 / 100, giving 4000 training and 1000 test images.

    python scripts/prepare_mnist.py --out data/mnist
    python scripts/prepare_mnist.py --csv path/to/mnist_5k.csv.gz --out data/mnist
"""

import argparse
import gzip
import shutil
from pathlib import Path

import numpy as np

from fpd.data import load_idx, write_idx


def bundled_csv() -> Path:
    import mlxtend  # only needed when --csv is not given

    return Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz"


def split(labels: np.ndarray, per_class_test: int, seed: int):
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test.append(idx[:per_class_test])
        train.append(idx[per_class_test:])
    # interleave classes deterministically
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--csv", type=Path, help="mnist_5k.csv[.gz]; default: the copy inside mlxtend")
    ap.add_argument("--out", type=Path, default=Path("data/mnist"))
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    src = args.csv or bundled_csv()
    table = np.loadtxt(src, delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1].astype(np.uint8), table[:, -1].astype(np.uint8)
    images = pixels.reshape(-1, 28, 28)
    tr, te = split(labels, args.test_per_class, args.seed)
    # shuffle within each split so consecutive images differ in class
    rng = np.random.default_rng(args.seed + 1)
    tr, te = rng.permutation(tr), rng.permutation(te)

    args.out.mkdir(parents=True, exist_ok=True)
    for prefix, idx in (("train", tr), ("t10k", te)):
        ip = args.out / f"{prefix}-images-idx3-ubyte"
        lp = args.out / f"{prefix}-labels-idx1-ubyte"
        write_idx(images[idx], labels[idx], ip, lp)
        check = load_idx(ip, lp)
        assert np.array_equal(check.images, images[idx]) and np.array_equal(check.labels, labels[idx])
        for p in (ip, lp):
            with open(p, "rb") as fi, gzip.GzipFile(str(p) + ".gz", "wb", mtime=0) as fo:
                shutil.copyfileobj(fi, fo)
            p.unlink()
        print(f"{prefix}: {len(idx)} images, class counts {np.bincount(labels[idx]).tolist()}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
