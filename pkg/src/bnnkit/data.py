"""Image datasets: IDX container parsing, normalization, augmentation and
small synthetic sets for smoke training."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bnnkit.errors import InvalidInputError, ParseError

# IDX type codes -> big-endian numpy dtypes
_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in _IDX_DTYPES.items()}
_MAX_ELEMENTS = 2**34


@dataclass
class Dataset:
    images: np.ndarray  # float32 NCHW, normalized
    labels: np.ndarray  # int64 class ids
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.labels.ndim != 1 or len(self.images) != len(self.labels):
            raise InvalidInputError(
                f"dataset needs N x C x H x W images and N labels, got {self.images.shape} and {self.labels.shape}"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.mean, self.std)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX buffer: 2 zero bytes, type code, ndim, big-endian dims, payload."""
    if len(raw) < 4:
        raise ParseError("IDX header truncated", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise ParseError(f"bad IDX magic {raw[:4].hex()}", 0)
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise ParseError(f"unknown IDX type code 0x{code:02x}", 2)
    if ndim == 0:
        raise ParseError("IDX file declares zero dimensions", 3)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"IDX dimension table truncated ({ndim} dims declared)", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise ParseError(f"IDX dims {dims} overflow the element limit", 4)
    dtype = _IDX_DTYPES[code]
    need = count * dtype.itemsize
    if len(raw) - header < need:
        raise ParseError(f"IDX payload truncated: need {need} bytes, have {len(raw) - header}", len(raw))
    return np.frombuffer(raw, dtype=dtype, count=count, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def load_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed)."""
    return parse_idx(_read_bytes(path))


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise InvalidInputError(f"dtype {array.dtype} has no IDX type code")
    head = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    return head + array.astype(_IDX_DTYPES[code]).tobytes()


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    data = encode_idx(array)
    path = Path(path)
    if compress or (compress is None and path.suffix == ".gz"):
        data = gzip.compress(data, mtime=0)
    path.write_bytes(data)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 2, 3)).astype(np.float32)
    std = images.std(axis=(0, 2, 3)).astype(np.float32)
    return mean, np.where(std > 0, std, 1.0).astype(np.float32)


def load_idx_dataset(images_path, labels_path, mean=None, std=None, normalize: bool = True) -> Dataset:
    """Load an image/label IDX pair as a normalized NCHW float dataset.

    Pixels are scaled to [0, 1] (8-bit payloads) and then standardized per
    channel. Without explicit ``mean``/``std`` the statistics come from the
    images themselves; pass the training statistics when loading a test split.
    """
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if labels.ndim != 1:
        raise ParseError(f"labels must be 1-d, got shape {labels.shape}", 3)
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise ParseError(f"images must be N x H x W or N x C x H x W, got {images.shape}", 3)
    if len(images) != len(labels):
        raise InvalidInputError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float32)
    if images.dtype == np.uint8:
        x /= 255.0
    if normalize and len(x):
        if mean is None or std is None:
            mean, std = channel_stats(x)
        x = (x - np.asarray(mean, np.float32)[None, :, None, None]) / np.asarray(std, np.float32)[None, :, None, None]
    return Dataset(np.ascontiguousarray(x), labels.astype(np.int64), mean, std)


SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).is_file():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_split_dir(directory, split: str, mean=None, std=None) -> Dataset:
    """Load ``train`` or ``test`` from a directory using the MNIST file names."""
    directory = Path(directory)
    img, lab = SPLIT_FILES[split]
    return load_idx_dataset(_find(directory, img), _find(directory, lab), mean, std)


def load_train_test(directory) -> tuple[Dataset, Dataset | None]:
    train = load_split_dir(directory, "train")
    try:
        test = load_split_dir(directory, "test", train.mean, train.std)
    except FileNotFoundError:
        test = None
    return train, test


def augment_batch(x: np.ndarray, rng: np.random.Generator, hflip: bool = True, crop_pad: int = 0) -> np.ndarray:
    """Random horizontal flip (p = 1/2) and random pad-and-crop."""
    out = x.copy()
    n, _, h, w = x.shape
    if hflip:
        flip = rng.random(n) < 0.5
        out[flip] = out[flip, :, :, ::-1]
    if crop_pad > 0:
        p = crop_pad
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        dy = rng.integers(0, 2 * p + 1, n)
        dx = rng.integers(0, 2 * p + 1, n)
        for i in range(n):
            out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    return out


def separable_images(n: int, shape=(3, 16, 16), seed: int = 0, noise: float = 0.5) -> Dataset:
    """Two classes told apart by which half of the image is brighter."""
    rng = np.random.default_rng(seed)
    c, h, w = shape
    labels = rng.integers(0, 2, n)
    x = rng.normal(0.0, noise, (n, c, h, w)).astype(np.float32)
    half = w // 2
    x[labels == 0, :, :, :half] += 1.0
    x[labels == 1, :, :, half:] += 1.0
    mean, std = channel_stats(x)
    x = (x - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(x.astype(np.float32), labels.astype(np.int64), mean, std)
