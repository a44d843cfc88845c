"""MNBW weight files: the inference parameters of a graph, binary convs bit-packed.

Layout (all integers little-endian)::

    header   "MNBW" | u16 version | u32 tensor_count
    record   u16 name_len | name (UTF-8) | u8 dtype | u32 ndim | u32 dims[ndim] | payload

``dtype`` 0 stores float32 values in C order. ``dtype`` 1 stores a {-1, +1}
tensor whose first dimension is the output channel: each output channel is
one row of ``prod(dims[1:])`` bits in C order, LSB-first, bit 1 = +1,
padded with zero bits to a whole number of 64-bit words.

Only what inference needs is written. Binary conv weights are stored as
their signs, and every batch norm is folded into a per-channel ``scale`` and
``shift`` (``y = x * scale + shift``), so the file size tracks the cost
model's size estimate.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np

from bnnkit.errors import ContractError, ParseError
from bnnkit.graph import ModelGraph
from bnnkit.tensor import WORD_BITS, _pack_bool_rows, _unpack_bool_rows, words_for

MAGIC = b"MNBW"
VERSION = 1
DTYPE_F32 = 0
DTYPE_BITS = 1

_HEADER = struct.Struct("<4sHI")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U8 = struct.Struct("<B")


def fold_batchnorm(gamma, beta, mean, var, eps) -> tuple[np.ndarray, np.ndarray]:
    """Inference-time batch norm as an affine map per channel."""
    gamma, beta, mean, var = (np.asarray(a, np.float64) for a in (gamma, beta, mean, var))
    scale = gamma / np.sqrt(var + eps)
    return scale.astype(np.float32), (beta - mean * scale).astype(np.float32)


def inference_parameters(g: ModelGraph) -> dict[str, np.ndarray]:
    """The parameter map a weight file stores for ``g``, in graph order.

    Binary conv weights become float32 signs (+1 for nonnegative latents),
    batch norms become ``{id}.scale`` / ``{id}.shift``.
    """
    out: dict[str, np.ndarray] = {}
    p = g.parameters
    for layer in g.layers:
        lid = layer.id
        if layer.kind == "binary-conv":
            out[f"{lid}.weight"] = np.where(p[f"{lid}.weight"] >= 0, 1.0, -1.0).astype(np.float32)
        elif layer.kind == "fp-conv":
            out[f"{lid}.weight"] = p[f"{lid}.weight"].astype(np.float32)
        elif layer.kind == "fully-connected":
            out[f"{lid}.weight"] = p[f"{lid}.weight"].astype(np.float32)
            out[f"{lid}.bias"] = p[f"{lid}.bias"].astype(np.float32)
        elif layer.kind == "batchnorm":
            s = g.bn_state(lid)
            out[f"{lid}.scale"], out[f"{lid}.shift"] = fold_batchnorm(
                s.gamma, s.beta, s.running_mean, s.running_var, s.eps
            )
    return out


def _binary_names(g: ModelGraph) -> set[str]:
    return set(g.binary_weight_names())


def _encode_record(name: str, arr: np.ndarray, packed: bool) -> bytes:
    raw_name = name.encode("utf-8")
    if len(raw_name) > 0xFFFF:
        raise ContractError(f"tensor name too long: {name[:40]}...")
    dims = arr.shape
    parts = [_U16.pack(len(raw_name)), raw_name, _U8.pack(DTYPE_BITS if packed else DTYPE_F32),
             _U32.pack(len(dims)), struct.pack(f"<{len(dims)}I", *dims)]
    if packed:
        if arr.ndim < 1:
            raise ContractError(f"packed tensor {name} needs an output-channel dimension")
        if not np.all((arr == 1) | (arr == -1)):
            raise ContractError(f"packed tensor {name} holds values other than +1/-1")
        rows = (arr > 0).reshape(dims[0], -1)
        parts.append(_pack_bool_rows(rows).astype("<u8").tobytes())
    else:
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def encode_weights(params: dict[str, np.ndarray], packed: set[str] | frozenset = frozenset()) -> bytes:
    """Serialize a name -> array map; names in ``packed`` are stored as bits."""
    chunks = [_HEADER.pack(MAGIC, VERSION, len(params))]
    for name, arr in params.items():
        chunks.append(_encode_record(name, np.asarray(arr), name in packed))
    return b"".join(chunks)


def export_weights(g: ModelGraph, path) -> int:
    """Write the inference parameters of ``g``; returns the file size in bytes."""
    data = encode_weights(inference_parameters(g), _binary_names(g))
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise ParseError(f"truncated {what}: need {n} bytes, have {len(self.raw) - self.pos}", self.pos)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))


def decode_weights(raw: bytes) -> tuple[dict[str, np.ndarray], set[str]]:
    """Parse an MNBW buffer into (parameter map, names stored packed)."""
    r = _Reader(raw)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise ParseError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0)
    _, version, count = r.unpack(_HEADER, "header")
    if version != VERSION:
        raise ParseError(f"unsupported MNBW version {version}", 4)
    params: dict[str, np.ndarray] = {}
    packed: set[str] = set()
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack(_U16, "name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("tensor name is not UTF-8", start + 2) from None
        if name in params:
            raise ParseError(f"duplicate tensor {name!r}", start)
        code_at = r.pos
        (code,) = r.unpack(_U8, "dtype code")
        if code not in (DTYPE_F32, DTYPE_BITS):
            raise ParseError(f"unknown dtype code {code} for {name!r}", code_at)
        (ndim,) = r.unpack(_U32, "ndim")
        if ndim > 8:
            raise ParseError(f"tensor {name!r} declares {ndim} dimensions", code_at + 1)
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "dimension table"))
        count_el = 1
        for d in dims:
            count_el *= d
        if code == DTYPE_F32:
            data = r.take(4 * count_el, f"payload of {name!r}")
            arr = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)
        else:
            if ndim < 1:
                raise ParseError(f"packed tensor {name!r} has no output-channel dimension", code_at + 1)
            row = count_el // dims[0] if dims[0] else 0
            nwords = words_for(row)
            payload_at = r.pos
            words = np.frombuffer(r.take(8 * nwords * dims[0], f"payload of {name!r}"), dtype="<u8")
            words = words.reshape(dims[0], nwords)
            pad = nwords * WORD_BITS - row
            if pad and words.size and np.any(words[:, -1] >> np.uint64(WORD_BITS - pad)):
                raise ParseError(f"nonzero pad bits in {name!r}", payload_at)
            bits = _unpack_bool_rows(words, row)
            arr = np.where(bits, 1.0, -1.0).astype(np.float32).reshape(dims)
            packed.add(name)
        params[name] = arr
    if r.pos != len(raw):
        raise ParseError(f"{len(raw) - r.pos} trailing bytes after {count} tensors", r.pos)
    return params, packed


def import_weights(path) -> dict[str, np.ndarray]:
    """Read a weight file into a name -> float32 array map."""
    return decode_weights(Path(path).read_bytes())[0]


def load_weights(g: ModelGraph, source) -> ModelGraph:
    """Copy of ``g`` carrying the parameters of a weight file (or parameter map).

    Folded batch norms are restored as ``gamma = scale``, ``beta = shift``
    with zero mean, unit variance and ``eps = 0``, which evaluates exactly
    to the stored affine map. Binary weights load as their ±1 signs.
    """
    params = source if isinstance(source, dict) else import_weights(source)
    expected = inference_parameters(g)
    missing = [k for k in expected if k not in params]
    extra = [k for k in params if k not in expected]
    if missing or extra:
        raise ContractError(f"weights do not match graph: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, ref in expected.items():
        if params[k].shape != ref.shape:
            raise ContractError(f"parameter {k} has shape {params[k].shape}, graph expects {ref.shape}")
    dtype = g.dtype
    out = g.copy()
    layers = []
    for layer in g.layers:
        lid = layer.id
        if layer.kind == "batchnorm":
            scale, shift = params[f"{lid}.scale"], params[f"{lid}.shift"]
            out.parameters[f"{lid}.gamma"] = scale.astype(dtype)
            out.parameters[f"{lid}.beta"] = shift.astype(dtype)
            out.parameters[f"{lid}.running_mean"] = np.zeros_like(scale, dtype=dtype)
            out.parameters[f"{lid}.running_var"] = np.ones_like(scale, dtype=dtype)
            layer = dataclasses.replace(layer, params={**layer.params, "eps": 0.0})
        else:
            for suffix in ("weight", "bias"):
                key = f"{lid}.{suffix}"
                if key in params:
                    out.parameters[key] = params[key].astype(dtype)
        layers.append(layer)
    return ModelGraph(layers, out.parameters, g.input_channels, g.config)
