"""Loader and window-geometry tests on synthetic files written to tmp_path."""

import gzip
import struct

import numpy as np
import pytest

from namgrow.data_io import (
    CIFAR10_RECORD_BYTES,
    Dataset,
    InputRange,
    base_grid_ranges,
    extract_patch,
    extract_patches,
    full_perception_ranges,
    load_cifar10,
    load_cifar10_batch,
    load_mnist,
    normalize_pixels,
    range_flat_indices,
    sha256_file,
)


def write_cifar_batch(path, images_u8, labels):
    """images_u8: [n,3,32,32] uint8 laid out as the binary format expects."""
    with open(path, "wb") as fh:
        for img, y in zip(images_u8, labels):
            fh.write(bytes([y]))
            fh.write(img.tobytes())


def write_idx(path, array, magic, compress=False):
    header = magic.to_bytes(4, "big")
    for d in array.shape:
        header += struct.pack(">I", d)
    blob = header + array.tobytes()
    if compress:
        with gzip.open(path, "wb") as fh:
            fh.write(blob)
    else:
        with open(path, "wb") as fh:
            fh.write(blob)


@pytest.fixture
def cifar_dir(tmp_path):
    rng = np.random.default_rng(42)
    for i in range(1, 6):
        imgs = rng.integers(0, 256, size=(4, 3, 32, 32), dtype=np.uint8)
        write_cifar_batch(tmp_path / f"data_batch_{i}.bin", imgs,
                          rng.integers(0, 10, size=4))
    imgs = rng.integers(0, 256, size=(6, 3, 32, 32), dtype=np.uint8)
    write_cifar_batch(tmp_path / "test_batch.bin", imgs,
                      rng.integers(0, 10, size=6))
    return tmp_path


@pytest.fixture
def mnist_dir(tmp_path):
    rng = np.random.default_rng(7)
    tr_img = rng.integers(0, 256, size=(12, 28, 28), dtype=np.uint8)
    tr_lab = rng.integers(0, 10, size=12, dtype=np.uint8)
    te_img = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    te_lab = rng.integers(0, 10, size=5, dtype=np.uint8)
    write_idx(tmp_path / "train-images-idx3-ubyte", tr_img, 2051)
    write_idx(tmp_path / "train-labels-idx1-ubyte", tr_lab, 2049)
    write_idx(tmp_path / "t10k-images.idx3-ubyte", te_img, 2051, compress=False)
    write_idx(tmp_path / "t10k-labels.idx1-ubyte", te_lab, 2049)
    return tmp_path, tr_img, tr_lab, te_img, te_lab


def test_normalize_pixels_range():
    raw = np.array([0, 255, 128], dtype=np.uint8)
    out = normalize_pixels(raw)
    np.testing.assert_allclose(out, [-0.5, 0.5, 128 / 255 - 0.5], rtol=0, atol=1e-15)
    assert out.dtype == np.float64


def test_cifar_record_count_comes_from_file_size(tmp_path, cifar_dir):
    images, labels = load_cifar10_batch(cifar_dir / "test_batch.bin")
    assert images.shape == (6, 3, 32, 32)
    assert labels.shape == (6,)
    # truncated file -> size not a multiple of the record length
    blob = (cifar_dir / "data_batch_1.bin").read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(blob[:-10])
    with pytest.raises(ValueError, match="multiple"):
        load_cifar10_batch(bad)


def test_cifar_train_concatenates_batches(cifar_dir):
    ds = load_cifar10(cifar_dir, "train")
    assert ds.n == 20 and ds.shape == (3, 32, 32)
    assert ds.images.min() >= -0.5 and ds.images.max() <= 0.5
    assert ds.n_classes == 10


def test_cifar_pixel_layout_roundtrip(cifar_dir):
    # first record of batch 1: label byte then 3072 bytes channel-major row-major
    raw = (cifar_dir / "data_batch_1.bin").read_bytes()[:CIFAR10_RECORD_BYTES]
    ds = load_cifar10(cifar_dir, "train")
    expected = normalize_pixels(
        np.frombuffer(raw[1:], dtype=np.uint8).reshape(3, 32, 32))
    np.testing.assert_array_equal(ds.images[0], expected)
    assert ds.labels[0] == raw[0]


def test_cifar_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path, "train")


def test_mnist_loads_both_filename_styles(mnist_dir):
    d, tr_img, tr_lab, te_img, te_lab = mnist_dir
    train = load_mnist(d, "train")
    test = load_mnist(d, "test")
    assert train.n == 12 and test.n == 5
    assert train.shape == (1, 28, 28)
    np.testing.assert_array_equal(train.labels, tr_lab)
    np.testing.assert_array_equal(test.labels, te_lab)
    np.testing.assert_allclose(train.images[:, 0], normalize_pixels(tr_img),
                               rtol=0, atol=0)


def test_mnist_gzip_transparent(tmp_path):
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, size=(3, 28, 28), dtype=np.uint8)
    lab = rng.integers(0, 10, size=3, dtype=np.uint8)
    write_idx(tmp_path / "train-images-idx3-ubyte.gz", img, 2051, compress=True)
    write_idx(tmp_path / "train-labels-idx1-ubyte.gz", lab, 2049, compress=True)
    ds = load_mnist(tmp_path, "train")
    np.testing.assert_array_equal(ds.labels, lab)


def test_mnist_magic_checked_before_load(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(2, 28, 28), dtype=np.uint8)
    write_idx(tmp_path / "train-images-idx3-ubyte", img, 2052)  # wrong magic
    write_idx(tmp_path / "train-labels-idx1-ubyte",
              np.zeros(2, dtype=np.uint8), 2049)
    with pytest.raises(ValueError, match="magic"):
        load_mnist(tmp_path, "train")


def test_mnist_count_mismatch(tmp_path):
    rng = np.random.default_rng(1)
    write_idx(tmp_path / "train-images-idx3-ubyte",
              rng.integers(0, 256, size=(2, 28, 28), dtype=np.uint8), 2051)
    write_idx(tmp_path / "train-labels-idx1-ubyte",
              np.zeros(3, dtype=np.uint8), 2049)
    with pytest.raises(ValueError, match="counts differ"):
        load_mnist(tmp_path, "train")


def test_base_grid_counts_and_order():
    ranges = base_grid_ranges((3, 32, 32))
    assert len(ranges) == 75  # 3 channels x 5x5 grid at 6-pixel spacing
    assert ranges[0] == InputRange(0, 0, 0)
    assert ranges[1] == InputRange(0, 0, 6)    # columns fastest
    assert ranges[5] == InputRange(0, 6, 0)    # then rows
    assert ranges[25] == InputRange(1, 0, 0)   # channels outermost
    starts = {(r.row_start, r.col_start) for r in ranges}
    assert starts == {(6 * i, 6 * j) for i in range(5) for j in range(5)}


def test_full_perception_counts():
    assert len(full_perception_ranges((3, 32, 32))) == 300  # 3 x 10 x 10
    assert len(full_perception_ranges((1, 28, 28))) == 81   # 1 x 9 x 9
    for r in full_perception_ranges((3, 32, 32)):
        assert r.row_start + r.size <= 32 and r.col_start + r.size <= 32


def test_extract_patch_row_major():
    img = np.arange(2 * 5 * 5, dtype=np.float64).reshape(2, 5, 5)
    patch = extract_patch(img, InputRange(1, 1, 2))
    expected = img[1, 1:4, 2:5].reshape(-1)
    np.testing.assert_array_equal(patch, expected)
    # row-major means consecutive triples come from consecutive rows
    assert patch[3] == img[1, 2, 2]


def test_extract_patches_matches_single():
    rng = np.random.default_rng(42)
    images = rng.uniform(-0.5, 0.5, size=(7, 3, 32, 32))
    ranges = base_grid_ranges((3, 32, 32))[:10] + [InputRange(2, 29, 29)]
    batch = extract_patches(images, ranges)
    assert batch.shape == (11, 7, 9)
    for k, r in enumerate(ranges):
        for i in range(7):
            np.testing.assert_array_equal(batch[k, i], extract_patch(images[i], r))


def test_range_flat_indices_bounds():
    with pytest.raises(ValueError):
        range_flat_indices(InputRange(0, 30, 30), (3, 32, 32))
    with pytest.raises(ValueError):
        range_flat_indices(InputRange(3, 0, 0), (3, 32, 32))
    idx = range_flat_indices(InputRange(1, 0, 0), (3, 32, 32))
    assert idx[0] == 32 * 32 and idx.shape == (9,)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 4, 4)), np.array([0, 10]), "t", 10)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 4, 4)), np.array([0]), "t", 10)


def test_sha256_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"abc")
    assert sha256_file(p) == (
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")
