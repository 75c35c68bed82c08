import gzip
import struct

import numpy as np
import pytest
from conftest import MNIST_DIR
from hypothesis import given
from hypothesis import strategies as st

from qdiff.data import (IMAGES_MAGIC, Dataset, IdxFormatError, batch_indices, batches, denormalize, load_idx,
                        load_split, normalize, parse_idx, write_idx)


def write_pair(tmp_path, images, labels, gz=False):
    suffix = ".gz" if gz else ""
    ip, lp = tmp_path / f"img{suffix}", tmp_path / f"lab{suffix}"
    write_idx(ip, images, compress=gz)
    write_idx(lp, labels, compress=gz)
    return ip, lp


def test_load_synthetic_pair(tmp_path, rng):
    imgs = rng.integers(0, 256, (5, 28, 28)).astype(np.uint8)
    labels = np.array([3, 1, 4, 1, 5], dtype=np.uint8)
    ds = load_idx(*write_pair(tmp_path, imgs, labels))
    assert ds.images.shape == (5, 1, 28, 28) and ds.labels.dtype == np.int64
    np.testing.assert_array_equal(ds.labels, labels)
    np.testing.assert_array_equal(denormalize(ds.images[:, 0]), imgs)
    assert ds.images.min() >= -1 and ds.images.max() <= 1


def test_all_zero_body_normalizes_to_minus_one(tmp_path):
    ds = load_idx(*write_pair(tmp_path, np.zeros((2, 28, 28), np.uint8), np.zeros(2, np.uint8)))
    assert (ds.images == -1.0).all()


def test_gzip_is_transparent(tmp_path, rng):
    imgs = rng.integers(0, 256, (3, 4, 4)).astype(np.uint8)
    labels = np.array([0, 1, 2], dtype=np.uint8)
    raw = load_idx(*write_pair(tmp_path / "", imgs, labels))
    (tmp_path / "z").mkdir()
    packed = load_idx(*write_pair(tmp_path / "z", imgs, labels, gz=True))
    assert (tmp_path / "z" / "img.gz").read_bytes()[:2] == b"\x1f\x8b"
    np.testing.assert_array_equal(raw.images, packed.images)


def test_header_layout_is_big_endian(tmp_path):
    write_idx(tmp_path / "a", np.zeros((2, 3, 4), np.uint8))
    blob = (tmp_path / "a").read_bytes()
    assert struct.unpack(">IIII", blob[:16]) == (IMAGES_MAGIC, 2, 3, 4) and len(blob) == 16 + 24


def idx_blob(dims, body_len=None):
    magic = 0x00000800 | len(dims)
    size = int(np.prod(dims)) if body_len is None else body_len
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(size)


@pytest.mark.parametrize("blob,needle", [
    (b"\x00\x00", "missing magic number at byte 2"),
    (struct.pack(">I", IMAGES_MAGIC) + struct.pack(">I", 5), "missing dimension 1 at byte 8"),
    (idx_blob((2, 2, 2), body_len=7), "data ends at byte 23, header promises 24"),
    (idx_blob((2, 2, 2), body_len=9), "unexpected bytes after byte 24"),
    (idx_blob((4,)), "magic 0x00000801 at byte 0"),
])
def test_format_errors_name_field_and_offset(blob, needle):
    with pytest.raises(IdxFormatError, match=needle):
        parse_idx(blob, IMAGES_MAGIC, "images")


def test_image_label_count_mismatch(tmp_path):
    with pytest.raises(IdxFormatError, match="3 images"):
        load_idx(*write_pair(tmp_path, np.zeros((3, 2, 2), np.uint8), np.zeros(2, np.uint8)))


def test_image_rank_checked(tmp_path):
    write_idx(tmp_path / "i", np.zeros((3, 4), np.uint8))
    write_idx(tmp_path / "l", np.zeros(3, np.uint8))
    blob = (tmp_path / "i").read_bytes()
    (tmp_path / "i").write_bytes(struct.pack(">I", IMAGES_MAGIC) + blob[4:])
    with pytest.raises(IdxFormatError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_dataset_rejects_mismatch():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2)), np.zeros(3, np.int64))


def test_round_trip_all_bytes():
    p = np.arange(256, dtype=np.uint8)
    np.testing.assert_array_equal(denormalize(normalize(p)), p)
    assert normalize(p)[0] == -1.0 and normalize(p)[-1] == 1.0


def make_ds(n):
    return Dataset(np.arange(n, dtype=float).reshape(n, 1, 1, 1), np.arange(n) % 10)


@given(st.integers(1, 60), st.integers(1, 70), st.integers(0, 5), st.integers(0, 3))
def test_batches_cover_each_item_once(n, bs, seed, epoch):
    got = np.concatenate([b.reshape(-1) for b in batches(make_ds(n), bs, seed, epoch)])
    assert sorted(got.tolist()) == list(range(n))
    sizes = [len(b) for b in batches(make_ds(n), bs, seed, epoch)]
    assert all(s == bs for s in sizes[:-1]) and 1 <= sizes[-1] <= bs


def test_batches_deterministic_and_epoch_dependent():
    ds = make_ds(40)
    a = [b.copy() for b in batches(ds, 7, 3, 0)]
    b = [b.copy() for b in batches(ds, 7, 3, 0)]
    c = [b.copy() for b in batches(ds, 7, 3, 1)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))
    idx = np.concatenate(list(batch_indices(40, 7, 3, 0)))
    np.testing.assert_array_equal(ds.images[idx], np.concatenate(a))


def test_full_batch_is_identity_multiset():
    (only,) = list(batches(make_ds(9), 9, 0, 0))
    assert sorted(only.reshape(-1).tolist()) == list(range(9))


def test_batch_size_validation():
    with pytest.raises(ValueError):
        next(batches(make_ds(3), 0, 0, 0))


def test_subset_modes():
    ds = make_ds(20)
    np.testing.assert_array_equal(ds.subset(4).labels, [0, 1, 2, 3])
    a, b = ds.subset(5, seed=1), ds.subset(5, seed=1)
    np.testing.assert_array_equal(a.images, b.images)
    assert len(set(a.images.reshape(-1).tolist())) == 5
    with pytest.raises(ValueError):
        ds.subset(21)


def test_load_split_accepts_plain_and_gz(tmp_path):
    write_idx(tmp_path / "t10k-images-idx3-ubyte", np.zeros((2, 28, 28), np.uint8))
    (tmp_path / "t10k-labels-idx1-ubyte.gz").write_bytes(gzip.compress(idx_blob((2,))))
    assert len(load_split(tmp_path, "test")) == 2
    with pytest.raises(FileNotFoundError):
        load_split(tmp_path, "train")


@pytest.mark.skipif(not any(MNIST_DIR.glob("train-images-idx3-ubyte*")), reason="MNIST files not present")
def test_official_mnist_train_split():
    ds = load_split(MNIST_DIR, "train")
    assert len(ds) == 60000 and ds.images.shape[1:] == (1, 28, 28)
    assert set(np.unique(ds.labels).tolist()) == set(range(10))
