"""Central finite-difference checks of the analytic backward pass.

Sign and max-pool are piecewise: a perturbation can move an input across a
kink and the difference quotient then measures a jump, not a slope. The
check records one forward pass, pins every sign output and pooling
selection to that pass, and differentiates the resulting smooth function.
Its exact gradient is what ``backward`` computes with ``sign_grad="zero"``
(binarized graphs) or on the real-valued surrogate (``binarize=False``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bnnkit.graph import ModelGraph, forward, piece_snapshot
from bnnkit.training import backward, cross_entropy_loss


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)  # worst relative error per tensor
    checked: int = 0

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def worst_tensor(self) -> str | None:
        return max(self.errors, key=self.errors.get) if self.errors else None


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(g: ModelGraph, x: np.ndarray, labels: np.ndarray, *, binarize: bool = True,
                   names: list[str] | None = None, per_tensor: int = 5, h: float = 1e-3,
                   seed: int = 0, training: bool = True) -> GradCheckReport:
    """Compare analytic and central-difference gradients of the mean cross-entropy.

    Runs in float64 on a copy of ``g``. ``names`` defaults to every trainable
    tensor on the surrogate and to the 32-bit tensors (all but binary conv
    weights) when binarized. ``per_tensor`` elements are sampled per tensor.
    """
    g = g.astype(np.float64)
    x = np.asarray(x, np.float64)
    binary = set(g.binary_weight_names())
    if names is None:
        names = [n for n in g.trainable_names() if not (binarize and n in binary)]
    logits, trace = forward(g, x, training, record=True, binarize=binarize, update_stats=False)
    _, glogits = cross_entropy_loss(logits, labels)
    grads = backward(g, trace, glogits, sign_grad="zero" if binarize else "ste")
    frozen = piece_snapshot(g, trace)

    def loss() -> float:
        out = forward(g, x, training, binarize=binarize, update_stats=False, frozen=frozen, kernel="float")
        return cross_entropy_loss(out, labels)[0]

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name in names:
        p = g.parameters[name]
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        worst = 0.0
        for i in picks:
            keep = flat[i]
            flat[i] = keep + h
            up = loss()
            flat[i] = keep - h
            down = loss()
            flat[i] = keep
            numeric = (up - down) / (2 * h)
            worst = max(worst, relative_error(float(grads[name].reshape(-1)[i]), numeric))
            report.checked += 1
        report.errors[name] = worst
    return report
