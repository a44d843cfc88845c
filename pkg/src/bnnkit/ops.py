"""Layer kernels: the exact xnor/popcount convolution and the 32-bit layers
around it (reference convolution, batch norm, pooling, shuffle, dense head).

Every forward kernel with trainable inputs has a matching ``*_backward``.
Dense tensors are NCHW numpy arrays; computation happens in the input dtype
so the same kernels serve float32 training and float64 gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bnnkit.errors import ContractError, InvalidInputError
from bnnkit.tensor import BitTensor


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class ConvParams:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1

    def __post_init__(self):
        for name in ("kernel", "stride", "padding"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        g = self.groups
        if g < 1 or self.in_channels % g or self.out_channels % g:
            raise ContractError(
                f"channels {self.in_channels}->{self.out_channels} not divisible by groups={g}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ContractError(f"invalid kernel/stride/padding in {self}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise ContractError(f"kernel {self.kernel} larger than padded input {h}x{w}")
        return oh, ow


def _check_conv(x_shape, w_shape, p: ConvParams):
    if len(x_shape) != 4:
        raise ContractError(f"conv input must be NCHW, got shape {tuple(x_shape)}")
    if x_shape[1] != p.in_channels:
        raise ContractError(f"conv expects {p.in_channels} input channels, got {x_shape[1]}")
    if tuple(w_shape) != p.weight_shape:
        raise ContractError(f"conv weight shape {tuple(w_shape)} != expected {p.weight_shape}")


def _tap_slices(p: ConvParams, oh: int, ow: int):
    (kh, kw), (sh, sw) = p.kernel, p.stride
    for ky in range(kh):
        for kx in range(kw):
            yield ky, kx, slice(ky, ky + sh * (oh - 1) + 1, sh), slice(kx, kx + sw * (ow - 1) + 1, sw)


def _padded_nhwc(x: np.ndarray, p: ConvParams) -> np.ndarray:
    ph, pw = p.padding
    xh = x.transpose(0, 2, 3, 1)
    if ph or pw:
        xh = np.pad(xh, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    return np.ascontiguousarray(xh)


def _im2col(xp: np.ndarray, p: ConvParams, oh: int, ow: int) -> np.ndarray:
    """Gather padded NHWC input into per-group patch rows, shape (g, m, kh*kw*cg)."""
    n, c = xp.shape[0], xp.shape[3]
    g = p.groups
    cg = c // g
    kh, kw = p.kernel
    cols = np.empty((g, n, oh, ow, kh * kw, cg), dtype=xp.dtype)
    for t, (ky, kx, ys, xs) in enumerate(_tap_slices(p, oh, ow)):
        tap = xp[:, ys, xs, :].reshape(n, oh, ow, g, cg)
        cols[:, :, :, :, t, :] = tap.transpose(3, 0, 1, 2, 4)
    return cols.reshape(g, n * oh * ow, kh * kw * cg)


def _weight_matrix(w: np.ndarray, g: int) -> np.ndarray:
    # (cout, cg, kh, kw) -> (g, kh*kw*cg, og) matching the im2col layout
    cout, cg, kh, kw = w.shape
    return w.reshape(g, cout // g, cg, kh * kw).transpose(0, 3, 2, 1).reshape(g, kh * kw * cg, cout // g)


def conv2d_reference(x: np.ndarray, w: np.ndarray, p: ConvParams) -> np.ndarray:
    """Grouped cross-correlation with zero padding (im2col + matmul per group)."""
    _check_conv(x.shape, w.shape, p)
    dtype = np.result_type(x.dtype, w.dtype, np.float32)
    n, c, h, wd = x.shape
    oh, ow = p.output_hw(h, wd)
    g = p.groups
    cols = _im2col(_padded_nhwc(x.astype(dtype, copy=False), p), p, oh, ow)
    out = np.matmul(cols, _weight_matrix(w.astype(dtype, copy=False), g))
    return np.ascontiguousarray(out.transpose(1, 0, 2).reshape(n, oh, ow, p.out_channels).transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, p: ConvParams):
    """Gradients of :func:`conv2d_reference` w.r.t. input and weights."""
    _check_conv(x.shape, w.shape, p)
    dtype = np.result_type(x.dtype, w.dtype, grad_out.dtype, np.float32)
    n, c, h, wd = x.shape
    oh, ow = p.output_hw(h, wd)
    if grad_out.shape != (n, p.out_channels, oh, ow):
        raise ContractError(f"conv grad shape {grad_out.shape} != {(n, p.out_channels, oh, ow)}")
    g = p.groups
    cg, og = c // g, p.out_channels // g
    kh, kw = p.kernel
    ph, pw = p.padding
    m = n * oh * ow
    xp = _padded_nhwc(x.astype(dtype, copy=False), p)
    cols = _im2col(xp, p, oh, ow)
    go = grad_out.astype(dtype, copy=False).transpose(0, 2, 3, 1).reshape(m, g, og).transpose(1, 0, 2)
    gwm = np.matmul(cols.transpose(0, 2, 1), go)  # (g, kh*kw*cg, og)
    gw = gwm.reshape(g, kh * kw, cg, og).transpose(0, 3, 2, 1).reshape(p.weight_shape)
    gcols = np.matmul(go, _weight_matrix(w.astype(dtype, copy=False), g).transpose(0, 2, 1))
    gcols = gcols.reshape(g, n, oh, ow, kh * kw, cg)
    gxp = np.zeros_like(xp)
    for t, (ky, kx, ys, xs) in enumerate(_tap_slices(p, oh, ow)):
        gxp[:, ys, xs, :] += gcols[:, :, :, :, t, :].transpose(1, 2, 3, 0, 4).reshape(n, oh, ow, c)
    gx = gxp[:, ph : ph + h, pw : pw + wd, :].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw)


def conv2d_xnor(x: BitTensor, w: BitTensor, p: ConvParams) -> np.ndarray:
    """Binary convolution as ``n_valid - 2 * popcount(x xor w)`` over packed words.

    Taps falling on padding are excluded from both the popcount and
    ``n_valid``, which makes the result identical to :func:`conv2d_reference`
    applied to the unpacked ±1 tensors with zero padding.
    """
    _check_conv(x.shape, w.shape, p)
    n, c, h, wd = x.shape
    oh, ow = p.output_hw(h, wd)
    g = p.groups
    cg, og = c // g, p.out_channels // g
    ph, pw = p.padding
    valid = np.zeros((h + 2 * ph, wd + 2 * pw), dtype=bool)
    valid[ph : ph + h, pw : pw + wd] = True
    out = np.zeros((n, oh, ow, p.out_channels), dtype=np.int64)
    for gi in range(g):
        xg = x.channel_slice(gi * cg, (gi + 1) * cg).words
        wg = w.words[gi * og : (gi + 1) * og]
        xg = np.pad(xg, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        acc = out[..., gi * og : (gi + 1) * og]
        for ky, kx, ys, xs in _tap_slices(p, oh, ow):
            v = valid[ys, xs]
            if not v.any():
                continue
            disagree = np.bitwise_count(xg[:, ys, xs, None, :] ^ wg[None, None, None, :, ky, kx, :])
            agree = cg - 2 * disagree.sum(axis=-1, dtype=np.int64)
            acc += np.where(v[None, :, :, None], agree, 0)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)).astype(np.float32)


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> BatchNormState:
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _bn_check(x: np.ndarray, s: BatchNormState):
    if x.ndim != 4 or x.shape[1] != s.channels:
        raise ContractError(f"batchnorm over {s.channels} channels got input shape {x.shape}")


def _bn_moments(x: np.ndarray):
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def batchnorm_forward(x: np.ndarray, s: BatchNormState, training: bool, update_stats: bool = True) -> np.ndarray:
    """Per-channel normalization; training mode uses (and records) batch moments."""
    _bn_check(x, s)
    if training:
        if x.shape[0] * x.shape[2] * x.shape[3] == 0:
            raise InvalidInputError("batchnorm training step on an empty batch")
        mean, var = _bn_moments(x)
        if update_stats:
            mom = s.momentum
            s.running_mean[...] = mom * s.running_mean + (1 - mom) * mean
            s.running_var[...] = mom * s.running_var + (1 - mom) * var
    else:
        mean, var = s.running_mean, s.running_var
    dtype = x.dtype
    scale = (s.gamma / np.sqrt(var + s.eps)).astype(dtype)
    shift = (s.beta - mean * scale).astype(dtype)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def batchnorm_backward(x: np.ndarray, upstream: np.ndarray, s: BatchNormState):
    """Training-mode batch norm gradients: ``(grad_x, grad_gamma, grad_beta)``."""
    _bn_check(x, s)
    if upstream.shape != x.shape:
        raise ContractError(f"batchnorm grad shape {upstream.shape} != input {x.shape}")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean, var = _bn_moments(x)
    inv_std = 1.0 / np.sqrt(var + s.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    grad_beta = upstream.sum(axis=(0, 2, 3))
    grad_gamma = (upstream * xhat).sum(axis=(0, 2, 3))
    gxhat = upstream * s.gamma[None, :, None, None].astype(x.dtype)
    grad_x = (inv_std[None, :, None, None] / m) * (
        m * gxhat
        - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return grad_x.astype(x.dtype), grad_gamma.astype(x.dtype), grad_beta.astype(x.dtype)


def _pool_windows(x: np.ndarray, kernel, stride, padding):
    (kh, kw), (sh, sw), (ph, pw) = _pair(kernel), _pair(stride), _pair(padding)
    n, c, h, w = x.shape
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ContractError(f"pool window {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf) if ph or pw else x
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :oh, :ow]
    return win.reshape(n, c, oh, ow, kh * kw), (kh, kw), (sh, sw), (ph, pw)


def maxpool2d(x: np.ndarray, kernel=2, stride=2, padding=0) -> np.ndarray:
    win, *_ = _pool_windows(x, kernel, stride, padding)
    return win.max(axis=-1)


def maxpool2d_argmax(x: np.ndarray, kernel=2, stride=2, padding=0) -> np.ndarray:
    """Index within each window of the element :func:`maxpool2d` selects."""
    win, *_ = _pool_windows(x, kernel, stride, padding)
    return win.argmax(axis=-1)


def maxpool2d_gather(x: np.ndarray, arg: np.ndarray, kernel=2, stride=2, padding=0) -> np.ndarray:
    """Pool with a fixed per-window selection instead of the current maximum."""
    win, *_ = _pool_windows(x, kernel, stride, padding)
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]


def maxpool2d_backward(x: np.ndarray, upstream: np.ndarray, kernel=2, stride=2, padding=0) -> np.ndarray:
    """Route each output gradient to the first maximal element of its window."""
    win, (kh, kw), (sh, sw), (ph, pw) = _pool_windows(x, kernel, stride, padding)
    arg = win.argmax(axis=-1)
    n, c, h, w = x.shape
    oh, ow = arg.shape[2:]
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=upstream.dtype)
    for t in range(kh * kw):
        ky, kx = divmod(t, kw)
        gxp[:, :, ky : ky + sh * (oh - 1) + 1 : sh, kx : kx + sw * (ow - 1) + 1 : sw] += np.where(
            arg == t, upstream, 0
        )
    return gxp[:, :, ph : ph + h, pw : pw + w]


def global_avgpool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), keepdims=True)


def global_avgpool_backward(x_shape, upstream: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to(upstream / (h * w), (n, c, h, w)).copy()


def channel_shuffle(x: np.ndarray, groups: int) -> np.ndarray:
    """Interleave group slices: output channel ``r * groups + k`` takes input
    channel ``k * (c // groups) + r``."""
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise InvalidInputError(f"cannot shuffle {c} channels into {groups} groups")
    if groups == 1:
        return x
    return np.ascontiguousarray(x.reshape(n, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w))


def channel_shuffle_backward(upstream: np.ndarray, groups: int) -> np.ndarray:
    c = upstream.shape[1]
    return channel_shuffle(upstream, c // groups) if groups > 1 else upstream


def fully_connected(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense head: ``x`` is n×c×1×1 (or n×c), ``w`` is k×c, result is n×k."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ContractError(f"fully connected shapes {x.shape}, {w.shape}, {b.shape} disagree")
    return flat @ w.T + b


def fully_connected_backward(x: np.ndarray, w: np.ndarray, upstream: np.ndarray):
    flat = x.reshape(x.shape[0], -1)
    gx = (upstream @ w).reshape(x.shape)
    return gx, upstream.T @ flat, upstream.sum(axis=0)
