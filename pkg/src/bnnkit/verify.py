"""Randomized self-checks: xnor convolution against the dense reference and
the sign / straight-through estimator against elementwise oracles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bnnkit.ops import ConvParams, conv2d_reference, conv2d_xnor
from bnnkit.tensor import DEFAULT_T_CLIP, pack_bits, sign_forward, ste_backward, unpack_bits


@dataclass
class CheckResult:
    name: str
    trials: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def random_conv_case(rng: np.random.Generator):
    """One (x, w, params) draw from the shape/stride/padding/groups sweep."""
    groups = int(rng.choice([1, 1, 2, 3, 4, 8]))
    cg = int(rng.choice([1, 3, 17, 63, 64, 65, 100, 128, 130]))
    og = int(rng.integers(1, 5))
    kh, kw = (int(k) for k in rng.integers(1, 4, 2))
    sh, sw = (int(s) for s in rng.integers(1, 3, 2))
    ph, pw = (int(p) for p in rng.integers(0, 3, 2))
    h = int(rng.integers(max(1, kh - 2 * ph), 8))
    wd = int(rng.integers(max(1, kw - 2 * pw), 8))
    n = int(rng.integers(1, 3))
    p = ConvParams(groups * cg, groups * og, (kh, kw), (sh, sw), (ph, pw), groups)
    x = rng.choice(np.array([-1.0, 1.0], np.float32), size=(n, p.in_channels, h, wd))
    w = rng.choice(np.array([-1.0, 1.0], np.float32), size=p.weight_shape)
    return x, w, p


def check_xnor_conv(trials: int, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    res = CheckResult("xnor-conv")
    for i in range(trials):
        x, w, p = random_conv_case(rng)
        got = conv2d_xnor(pack_bits(x), pack_bits(w), p)
        want = conv2d_reference(x, w, p)
        res.trials += 1
        if got.shape != want.shape or not np.array_equal(got, want):
            res.failures.append(f"case {i}: {p} input {x.shape}")
    return res


def sign_oracle(x: np.ndarray) -> np.ndarray:
    return np.array([1.0 if v >= 0 else -1.0 for v in np.ravel(x)], np.float32).reshape(np.shape(x))


def ste_oracle(x: np.ndarray, upstream: np.ndarray, t_clip: float = DEFAULT_T_CLIP) -> np.ndarray:
    flat = [u if abs(v) <= t_clip else 0.0 for v, u in zip(np.ravel(x), np.ravel(upstream))]
    return np.array(flat, dtype=np.result_type(upstream)).reshape(np.shape(x))


def check_ste(trials: int, seed: int = 0, t_clip: float = DEFAULT_T_CLIP) -> CheckResult:
    """Sign and STE on ``trials`` scalars, with the clip boundary and zero forced in."""
    rng = np.random.default_rng(seed)
    res = CheckResult("sign-ste")
    specials = np.array([0.0, -0.0, t_clip, -t_clip, np.nextafter(t_clip, 2 * t_clip),
                         np.nextafter(-t_clip, -2 * t_clip), np.nextafter(t_clip, 0), 1.0, -1.0])
    x = np.concatenate([specials, rng.uniform(-2 * t_clip, 2 * t_clip, max(trials - specials.size, 0))])[:max(trials, 1)]
    x = x.reshape(1, -1, 1, 1)
    up = rng.normal(size=x.shape)
    res.trials = x.size
    got = ste_backward(x, up, t_clip)
    want = ste_oracle(x, up, t_clip)
    bad = np.flatnonzero(got.ravel() != want.ravel())
    res.failures += [f"ste x={x.ravel()[i]!r}" for i in bad[:10]]
    s = unpack_bits(sign_forward(x))
    bad = np.flatnonzero(s.ravel() != sign_oracle(x).ravel())
    res.failures += [f"sign x={x.ravel()[i]!r}" for i in bad[:10]]
    return res


def run_all(trials: int, seed: int = 0) -> list[CheckResult]:
    return [check_xnor_conv(trials, seed), check_ste(max(trials, 100) * 10, seed)]
