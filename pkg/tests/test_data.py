import gzip
import hashlib
import struct

import numpy as np
import pytest

from cnngp.data import (
    IMAGE_MAGIC,
    LabelledDataset,
    load_idx,
    mnist_paths,
    read_idx,
    split,
    write_idx,
)
from cnngp.errors import DataError

from conftest import FIXTURES

GOLDEN_IMAGES = FIXTURES / "golden-images-idx3-ubyte"
GOLDEN_LABELS = FIXTURES / "golden-labels-idx1-ubyte"
GOLDEN_SHA256 = {
    GOLDEN_IMAGES: "cd76118fa350f08ae831c824aeeea51aa3b3dd96ea1a1508b0a2c2775e950422",
    GOLDEN_LABELS: "f56856a625e570f4360ac2c5fa7df922347bd0f5294464e12ccb68d82c63b1f5",
}


def test_golden_fixtures_unchanged():
    for path, digest in GOLDEN_SHA256.items():
        assert hashlib.sha256(path.read_bytes()).hexdigest() == digest


def test_golden_round_trip_byte_exact():
    raw = read_idx(GOLDEN_IMAGES, IMAGE_MAGIC)
    assert raw.shape == (3, 28, 28) and raw.dtype == np.uint8
    i, r, c = np.meshgrid(np.arange(3), np.arange(28), np.arange(28), indexing="ij")
    np.testing.assert_array_equal(raw, (i * 31 + r * 7 + c * 3) % 256)
    ds = load_idx(GOLDEN_IMAGES, GOLDEN_LABELS)
    assert ds.images.shape == (3, 1, 28, 28)
    assert ds.labels.tolist() == [7, 0, 9]
    np.testing.assert_array_equal(ds.images[:, 0] * 255, raw)
    raw_mode = load_idx(GOLDEN_IMAGES, GOLDEN_LABELS, normalize=False)
    np.testing.assert_array_equal(raw_mode.images[:, 0], raw)


def test_header_arithmetic(tmp_path):
    header = bytes.fromhex("00000803 00000002 0000001C 0000001C".replace(" ", ""))
    p = tmp_path / "img"
    p.write_bytes(header + bytes(2 * 28 * 28))
    assert read_idx(p, IMAGE_MAGIC).shape == (2, 28, 28)


def test_normalisation_endpoints(tmp_path):
    img = np.zeros((1, 2, 2), np.uint8)
    img[0, 0, 0] = 255
    write_idx(tmp_path / "i", img)
    write_idx(tmp_path / "l", np.array([4], np.uint8))
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images[0, 0, 0, 0] == 1.0 and ds.images[0, 0, 1, 1] == 0.0
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_bad_magic_rejected():
    with pytest.raises(DataError, match="magic"):
        load_idx(FIXTURES / "bad-magic-idx3-ubyte", GOLDEN_LABELS)
    # image file passed as labels
    with pytest.raises(DataError, match="magic"):
        load_idx(GOLDEN_IMAGES, GOLDEN_IMAGES)


def test_truncated_and_mismatched(tmp_path):
    data = GOLDEN_IMAGES.read_bytes()
    (tmp_path / "short").write_bytes(data[:-1])
    with pytest.raises(DataError, match="truncated"):
        load_idx(tmp_path / "short", GOLDEN_LABELS)
    (tmp_path / "hdr").write_bytes(data[:10])
    with pytest.raises(DataError, match="truncated"):
        read_idx(tmp_path / "hdr", IMAGE_MAGIC)
    (tmp_path / "lab").write_bytes(struct.pack(">II", 0x801, 2) + bytes([1, 2]))
    with pytest.raises(DataError, match="labels"):
        load_idx(GOLDEN_IMAGES, tmp_path / "lab")
    with pytest.raises(DataError):
        load_idx(tmp_path / "missing", GOLDEN_LABELS)


def test_gzip_and_writer_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (4, 5, 6), dtype=np.uint8)
    write_idx(tmp_path / "x.gz", img)
    assert gzip.decompress((tmp_path / "x.gz").read_bytes())[:4] == bytes.fromhex("00000803")
    np.testing.assert_array_equal(read_idx(tmp_path / "x.gz", IMAGE_MAGIC), img)


def test_bundled_subset(mnist):
    train, test = mnist
    assert train.images.shape == (4000, 1, 28, 28) and len(test) == 1000
    assert set(np.unique(train.labels)) == set(range(10))
    assert mnist_paths()["train_images"].exists()


def _toy(n):
    return LabelledDataset(np.arange(n, dtype=float).reshape(n, 1, 1, 1), np.arange(n) % 3)


def test_split_examples():
    ds = _toy(5)
    a, b = split(ds, 5, 0)
    assert len(a) == 5 and len(b) == 0
    with pytest.raises(DataError):
        split(ds, 4, 3)
    big = LabelledDataset(np.zeros((60000, 1, 1, 1)), np.zeros(60000, int))
    tr, va = split(big, 50000, 10000)
    assert (len(tr), len(va)) == (50000, 10000)


@pytest.mark.parametrize("seed", [None, 0, 7])
def test_split_disjoint_and_exhaustive(seed):
    ds = _toy(20)
    a, b = split(ds, 12, 6, seed)
    ia, ib = a.images.ravel().astype(int), b.images.ravel().astype(int)
    assert not set(ia) & set(ib)
    if seed is None:
        assert ia.tolist() == list(range(12)) and ib.tolist() == list(range(12, 18))
    else:
        assert split(ds, 12, 6, seed)[0].images.tobytes() == a.images.tobytes()


def test_dataset_invariants():
    with pytest.raises(DataError):
        LabelledDataset(np.zeros((2, 1, 3, 3)), np.zeros(3, int))
