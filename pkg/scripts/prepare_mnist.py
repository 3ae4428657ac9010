"""Write MNIST as gzipped IDX files under data/mnist/.

With the official four files available (``--idx-dir``), they are verified
and copied. Otherwise the 5000-digit CSV subset shipped inside the mlxtend
wheel is converted (pixels then label per row). That file is sorted by
label, so the split is per class: the first 80% of each digit's rows train,
the rest test.

    python scripts/prepare_mnist.py --wheel mlxtend-0.24.0-py3-none-any.whl
    python scripts/prepare_mnist.py --csv mnist_5k.csv.gz
    python scripts/prepare_mnist.py --idx-dir ~/Downloads/mnist
"""

import argparse
import gzip
import io
import shutil
import zipfile
from pathlib import Path

import numpy as np

from dropgrad.data import read_idx_images, read_idx_labels, write_idx_images, write_idx_labels

OFFICIAL = ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz",
            "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz")
WHEEL_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
TRAIN_SHARE = 0.8


def from_csv_bytes(blob):
    rows = np.loadtxt(io.BytesIO(gzip.decompress(blob)), delimiter=",", dtype=np.int64)
    pixels, labels = rows[:, :-1], rows[:, -1]
    if pixels.shape[1] != 784 or pixels.min() < 0 or pixels.max() > 255:
        raise SystemExit("unexpected CSV layout")
    return pixels.reshape(-1, 28, 28).astype(np.uint8), labels.astype(np.uint8)


def stratified_split(labels, share):
    """Row indices, kept in file order, with ``share`` of every class in the first part."""
    train = np.zeros(labels.shape[0], dtype=bool)
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        train[rows[:int(round(share * rows.size))]] = True
    return np.flatnonzero(train), np.flatnonzero(~train)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--idx-dir", type=Path)
    src.add_argument("--wheel", type=Path)
    src.add_argument("--csv", type=Path)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data/mnist")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    if args.idx_dir:
        for name in OFFICIAL:
            reader = read_idx_images if "images" in name else read_idx_labels
            reader(args.idx_dir / name)
            shutil.copy(args.idx_dir / name, args.out / name)
        print(f"copied official files to {args.out}")
        return

    if args.wheel:
        with zipfile.ZipFile(args.wheel) as zf:
            blob = zf.read(WHEEL_MEMBER)
    else:
        blob = args.csv.read_bytes()
    images, labels = from_csv_bytes(blob)
    train_idx, test_idx = stratified_split(labels, TRAIN_SHARE)
    write_idx_images(args.out / OFFICIAL[0], images[train_idx])
    write_idx_labels(args.out / OFFICIAL[1], labels[train_idx])
    write_idx_images(args.out / OFFICIAL[2], images[test_idx])
    write_idx_labels(args.out / OFFICIAL[3], labels[test_idx])
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test digits to {args.out}")


if __name__ == "__main__":
    main()
