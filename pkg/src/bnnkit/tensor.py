"""Dense and bit-packed tensor types, sign binarization and its STE backward.

Dense tensors are plain ``numpy`` arrays in NCHW order. Binary tensors are
packed channel-major: for every (n, h, w) position the ``c`` channel bits
occupy ``ceil(c / 64)`` consecutive 64-bit words, least-significant bit first,
with bit 1 encoding +1 and bit 0 encoding -1. Unused high bits of the last
word are always zero so that popcount reductions never see them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bnnkit.errors import ContractError, InvalidInputError

WORD_BITS = 64
DEFAULT_T_CLIP = 1.3

_LE_WORD = np.dtype("<u8")


def words_for(channels: int) -> int:
    return -(-channels // WORD_BITS)


def _pack_bool_rows(bits: np.ndarray) -> np.ndarray:
    """Pack the last axis of a boolean array into little-endian uint64 words."""
    c = bits.shape[-1]
    nwords = words_for(c)
    padded = np.zeros(bits.shape[:-1] + (nwords * WORD_BITS,), dtype=bool)
    padded[..., :c] = bits
    packed = np.packbits(padded, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view(_LE_WORD).astype(np.uint64)


def _unpack_bool_rows(words: np.ndarray, c: int) -> np.ndarray:
    raw = np.ascontiguousarray(words.astype(_LE_WORD)).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little")
    return bits[..., :c].astype(bool)


@dataclass(frozen=True)
class BitTensor:
    """A {-1, +1} tensor of logical shape (n, c, h, w) stored as packed words.

    ``words`` has shape ``(n, h, w, ceil(c / 64))`` and dtype uint64.
    """

    shape: tuple[int, int, int, int]
    words: np.ndarray

    def __post_init__(self):
        if len(self.shape) != 4 or any(int(s) < 0 for s in self.shape):
            raise ContractError(f"BitTensor shape must be 4 nonnegative counts, got {self.shape}")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        n, c, h, w = self.shape
        expected = (n, h, w, words_for(c))
        if self.words.shape != expected or self.words.dtype != np.uint64:
            raise ContractError(
                f"words must be uint64 of shape {expected}, got {self.words.dtype} {self.words.shape}"
            )
        self.words.setflags(write=False)

    @property
    def channels(self) -> int:
        return self.shape[1]

    @property
    def words_per_position(self) -> int:
        return self.words.shape[-1]

    @property
    def pad_bits(self) -> int:
        return self.words_per_position * WORD_BITS - self.channels

    def pad_popcount(self) -> int:
        """Number of set bits in the pad region; zero for every valid tensor."""
        if self.pad_bits == 0 or self.words.size == 0:
            return 0
        used = self.channels - (self.words_per_position - 1) * WORD_BITS
        mask = np.uint64(((1 << WORD_BITS) - 1) ^ ((1 << used) - 1))
        return int(np.bitwise_count(self.words[..., -1] & mask).sum())

    def to_bool(self) -> np.ndarray:
        """Bits as a boolean NCHW array (True for +1)."""
        return _unpack_bool_rows(self.words, self.channels).transpose(0, 3, 1, 2)

    def channel_slice(self, start: int, stop: int) -> BitTensor:
        """Repack channels ``[start, stop)`` into a fresh, word-aligned BitTensor."""
        n, c, h, w = self.shape
        if not 0 <= start <= stop <= c:
            raise ContractError(f"channel slice [{start}, {stop}) outside 0..{c}")
        if start == 0 and stop == c:
            return self
        if start % WORD_BITS == 0 and stop % WORD_BITS == 0:
            sub = self.words[..., start // WORD_BITS : stop // WORD_BITS]
            return BitTensor((n, stop - start, h, w), np.ascontiguousarray(sub))
        bits = _unpack_bool_rows(self.words, c)[..., start:stop]
        return BitTensor((n, stop - start, h, w), _pack_bool_rows(bits))

    def __eq__(self, other):
        if not isinstance(other, BitTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.words, other.words)

    __hash__ = None


def _from_bool_nchw(bits: np.ndarray) -> BitTensor:
    return BitTensor(bits.shape, _pack_bool_rows(bits.transpose(0, 2, 3, 1)))


def _as_nchw(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ContractError(f"expected a 4-d NCHW tensor, got shape {x.shape}")
    return x


def sign_forward(x: np.ndarray) -> BitTensor:
    """Binarize with sign(x) = +1 for x >= 0, -1 otherwise."""
    x = _as_nchw(x)
    return _from_bool_nchw(x >= 0)


def sign_dense(x: np.ndarray) -> np.ndarray:
    """Same binarization as :func:`sign_forward`, kept as a dense ±1 array."""
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype if x.dtype.kind == "f" else np.float32)


def ste_backward(x: np.ndarray, upstream: np.ndarray, t_clip: float = DEFAULT_T_CLIP) -> np.ndarray:
    """Pass ``upstream`` through where ``|x| <= t_clip`` and zero it elsewhere."""
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if x.shape != upstream.shape:
        raise ContractError(f"STE shape mismatch: input {x.shape} vs upstream {upstream.shape}")
    if not t_clip > 0:
        raise InvalidInputError(f"t_clip must be positive, got {t_clip}")
    return np.where(np.abs(x) <= t_clip, upstream, np.zeros_like(upstream))


def pack_bits(x: np.ndarray) -> BitTensor:
    """Pack an NCHW tensor whose entries are exactly -1.0 or +1.0."""
    x = _as_nchw(x)
    plus = x == 1
    if not np.all(plus | (x == -1)):
        bad = x[~(plus | (x == -1))].flat[0]
        raise InvalidInputError(f"pack_bits expects only -1/+1 values, found {bad!r}")
    return _from_bool_nchw(plus)


def unpack_bits(b: BitTensor, dtype=np.float32) -> np.ndarray:
    """Expand a BitTensor back to a dense ±1 NCHW array."""
    return np.where(b.to_bool(), 1.0, -1.0).astype(dtype)
