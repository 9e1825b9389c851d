"""Build a small MNIST stand-in from the 5000 digits bundled with mlxtend.

Writes the four standard IDX files (gzip-compressed) with a stratified
4000/1000 train/test split.  Point ``data.dir`` or ``FUNCNORM_DATA_DIR`` at
a directory with the official files to use full MNIST instead.

    pip install --no-deps mlxtend
    python scripts/prepare_mnist5k.py data/mnist5k
"""

import argparse
import gzip
import io
from importlib import resources
from pathlib import Path

import numpy as np

from funcnorm.harness import MNIST_FILES, write_mnist_idx


def load_bundled():
    raw = resources.files("mlxtend.data").joinpath("data/mnist_5k.csv.gz").read_bytes()
    table = np.loadtxt(io.TextIOWrapper(gzip.GzipFile(fileobj=io.BytesIO(raw))), delimiter=",",
                       dtype=np.int64)
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.uint8)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    images, labels = load_bundled()
    rng = np.random.default_rng(args.seed)
    test_idx = np.concatenate([rng.permutation(np.flatnonzero(labels == c))[: args.test_per_class]
                               for c in range(10)])
    test_idx.sort()
    train_idx = np.setdiff1d(np.arange(len(labels)), test_idx)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train_idx), ("test", test_idx)):
        img_name, lab_name = MNIST_FILES[split]
        write_mnist_idx(args.out_dir / (img_name + ".gz"), args.out_dir / (lab_name + ".gz"),
                        images[idx], labels[idx])
        print(f"{split}: {len(idx)} images")


if __name__ == "__main__":
    main()
