"""Build the bundled 5000-image MNIST subset in IDX format.

The source is ``mnist_5k.csv.gz`` (500 digits per class, one image per row,
784 pixel bytes followed by the label) shipped inside the ``mlxtend`` wheel.
Rows are shuffled with a fixed seed and written as gzipped IDX files: 4000
training and 1000 test images.

    python scripts/make_mnist_subset.py path/to/mlxtend-*.whl [out_dir]
"""

from __future__ import annotations

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from cnngp.data import MNIST_FILES, write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
SEED = 20180501
N_TRAIN = 4000


def main(argv: list[str]) -> None:
    wheel = Path(argv[0])
    out = Path(argv[1]) if len(argv) > 1 else Path(__file__).resolve().parents[1] / "data" / "mnist-subset"
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    assert table.shape == (5000, 785) and table.min() >= 0 and table[:, :784].max() <= 255
    order = np.random.Generator(np.random.Philox(SEED)).permutation(len(table))
    table = table[order]
    images = table[:, :784].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, 784].astype(np.uint8)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / MNIST_FILES["train_images"], images[:N_TRAIN])
    write_idx(out / MNIST_FILES["train_labels"], labels[:N_TRAIN])
    write_idx(out / MNIST_FILES["test_images"], images[N_TRAIN:])
    write_idx(out / MNIST_FILES["test_labels"], labels[N_TRAIN:])
    print(f"wrote {N_TRAIN} train / {len(table) - N_TRAIN} test images to {out}")


if __name__ == "__main__":
    main(sys.argv[1:])
