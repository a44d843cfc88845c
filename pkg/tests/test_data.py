import gzip
import struct

import numpy as np
import pytest

from bnnkit.data import (Dataset, augment_batch, encode_idx, load_idx, load_idx_dataset, load_train_test,
                         parse_idx, separable_images, write_idx)
from bnnkit.errors import InvalidInputError, ParseError

from conftest import DIGITS


def crafted_images():
    # 4 images of 8x8: image k has pixel value 10*k + row
    pix = np.array([[[10 * k + r] * 8 for r in range(8)] for k in range(4)], np.uint8)
    raw = b"\x00\x00\x08\x03" + struct.pack(">3I", 4, 8, 8) + pix.tobytes()
    return raw, pix


def test_hand_written_idx_fixture(tmp_path):
    raw, pix = crafted_images()
    (tmp_path / "img").write_bytes(raw)
    (tmp_path / "lab").write_bytes(b"\x00\x00\x08\x01" + struct.pack(">I", 4) + bytes([3, 1, 4, 1]))
    arr = load_idx(tmp_path / "img")
    assert arr.shape == (4, 8, 8) and arr.dtype == np.uint8
    np.testing.assert_array_equal(arr, pix)
    ds = load_idx_dataset(tmp_path / "img", tmp_path / "lab", normalize=False)
    assert ds.images.shape == (4, 1, 8, 8)
    assert ds.images[2, 0, 5, 0] == pytest.approx(25 / 255)
    np.testing.assert_array_equal(ds.labels, [3, 1, 4, 1])
    norm = load_idx_dataset(tmp_path / "img", tmp_path / "lab")
    assert norm.images.mean() == pytest.approx(0.0, abs=1e-6)
    assert norm.images.std() == pytest.approx(1.0, abs=1e-5)


def test_big_endian_payloads_and_gzip(tmp_path):
    a = np.arange(6, dtype=np.int32).reshape(2, 3) - 3
    write_idx(tmp_path / "a.gz", a)
    assert gzip.decompress((tmp_path / "a.gz").read_bytes())[:4] == b"\x00\x00\x0c\x02"
    np.testing.assert_array_equal(load_idx(tmp_path / "a.gz"), a)
    f = np.array([1.5, -2.0], np.float32)
    assert encode_idx(f)[8:12] == struct.pack(">f", 1.5)
    np.testing.assert_array_equal(parse_idx(encode_idx(f)), f)


def test_zero_image_file_is_empty_dataset(tmp_path):
    write_idx(tmp_path / "i", np.zeros((0, 5, 5), np.uint8))
    write_idx(tmp_path / "l", np.zeros(0, np.uint8))
    ds = load_idx_dataset(tmp_path / "i", tmp_path / "l")
    assert len(ds) == 0 and ds.images.shape == (0, 1, 5, 5)


@pytest.mark.parametrize("raw, offset", [
    (b"\x01\x00\x08\x01\x00\x00\x00\x01\x05", 0),
    (b"\x00\x00\x07\x01\x00\x00\x00\x01\x05", 2),
    (b"\x00\x00\x08\x02\x00\x00\x00\x01", 8),
    (b"\x00\x00\x08\x01\x00\x00\x00\x05\x01\x02", 10),
    (b"\x00\x00", 2),
])
def test_parse_errors_report_offsets(raw, offset):
    with pytest.raises(ParseError) as exc:
        parse_idx(raw)
    assert exc.value.offset == offset
    assert f"offset {offset}" in str(exc.value)


def test_dimension_overflow_is_a_parse_error():
    raw = b"\x00\x00\x08\x03" + struct.pack(">3I", 2**31, 2**31, 2**31)
    with pytest.raises(ParseError, match="overflow"):
        parse_idx(raw)


def test_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", np.zeros((3, 2, 2), np.uint8))
    write_idx(tmp_path / "l", np.zeros(2, np.uint8))
    with pytest.raises(InvalidInputError):
        load_idx_dataset(tmp_path / "i", tmp_path / "l")


def test_bundled_digits_split():
    train, test = load_train_test(DIGITS)
    assert train.images.shape == (8500, 1, 28, 28) and test.images.shape == (1500, 1, 28, 28)
    assert set(np.unique(train.labels)) == set(range(10))
    assert test.mean == train.mean and test.std == train.std
    assert abs(float(train.images.mean())) < 1e-3


def test_augment_batch_is_seeded_and_shape_preserving(rng):
    x = np.arange(2 * 1 * 4 * 4, dtype=np.float32).reshape(2, 1, 4, 4)
    a = augment_batch(x, np.random.default_rng(0), hflip=True, crop_pad=1)
    b = augment_batch(x, np.random.default_rng(0), hflip=True, crop_pad=1)
    np.testing.assert_array_equal(a, b)
    assert a.shape == x.shape
    flipped = augment_batch(x, np.random.default_rng(3), hflip=True)
    for i in range(2):
        assert np.array_equal(flipped[i], x[i]) or np.array_equal(flipped[i], x[i, :, :, ::-1])


def test_separable_set_and_dataset_contract():
    ds = separable_images(50, (3, 8, 8), seed=1)
    assert ds.num_classes == 2 and ds.images.dtype == np.float32
    left = ds.images[:, :, :, :4].mean(axis=(1, 2, 3)) > ds.images[:, :, :, 4:].mean(axis=(1, 2, 3))
    np.testing.assert_array_equal(left, ds.labels == 0)
    with pytest.raises(InvalidInputError):
        Dataset(np.zeros((2, 1, 2, 2)), np.zeros(3, np.int64))
