"""Backpropagation through model graphs and the desk-scale training loop.

Binary convolutions keep 32-bit latent weights. The forward pass binarizes
them with ``sign`` and the backward pass routes gradients through the same
clipped straight-through rule used for activations, so the optimizer
always updates the latents.
"""

from __future__ import annotations

import csv
import logging
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from bnnkit import ops
from bnnkit.data import Dataset, augment_batch
from bnnkit.errors import ConfigError, ContractError, InvalidInputError
from bnnkit.graph import ModelGraph, Trace, forward
from bnnkit.tensor import DEFAULT_T_CLIP, sign_dense, ste_backward

log = logging.getLogger(__name__)

FLIP_PERCENTILES = (50, 75, 90, 95, 99)
FLIP_CSV_COLUMNS = (
    "epoch", "optimizer", "layer", "n_weights", "frac_stable",
    *(f"p{q}" for q in FLIP_PERCENTILES), "max", "total_flips",
)
TRAIN_CSV_COLUMNS = (
    "epoch", "steps", "loss", "top1", "lr", "eval_top1",
    "flips_frac_stable", *(f"flips_p{q}" for q in FLIP_PERCENTILES),
)


@dataclass
class TrainConfig:
    epochs: int = 120
    base_lr: float = 0.002
    warmup_epochs: int = 5
    t_clip: float = DEFAULT_T_CLIP
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    hflip: bool = True
    crop_pad: int = 0
    reset_flips_each_epoch: bool = True

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs} and {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise InvalidInputError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)


def backward(g: ModelGraph, trace: Trace, grad_output: np.ndarray, *, t_clip: float | None = None,
             sign_grad: str = "ste") -> dict[str, np.ndarray]:
    """Gradients of every trainable parameter given d(loss)/d(output).

    ``sign_grad="ste"`` uses the clipped straight-through rule for sign
    layers and binary weights; ``"zero"`` uses the true (almost everywhere)
    derivative of sign, which is zero. In surrogate traces
    (``binarize=False``) sign is the identity and gradients pass unchanged.
    """
    if trace is None or g.output not in trace.values:
        raise ContractError("backward needs a recorded forward trace (forward(..., record=True))")
    if sign_grad not in ("ste", "zero"):
        raise ValueError(f"sign_grad must be 'ste' or 'zero', got {sign_grad!r}")
    vals = trace.values
    grads: dict[str, np.ndarray] = {g.output: grad_output}
    pgrads: dict[str, np.ndarray] = {}
    params = g.parameters

    def send(src: str, grad: np.ndarray):
        if src in grads:
            grads[src] = grads[src] + grad
        else:
            grads[src] = grad

    for layer in reversed(g.layers):
        gout = grads.pop(layer.id, None)
        if gout is None:
            continue
        kind, p, lid = layer.kind, layer.params, layer.id
        ins = [vals[s] for s in layer.inputs]
        clip = t_clip if t_clip is not None else p.get("t_clip", DEFAULT_T_CLIP)
        if kind == "fp-conv":
            gx, gw = ops.conv2d_backward(ins[0], params[f"{lid}.weight"], gout, p["conv"])
            pgrads[f"{lid}.weight"] = gw
            send(layer.inputs[0], gx)
        elif kind == "binary-conv":
            latent = params[f"{lid}.weight"]
            w = sign_dense(latent) if trace.binarize else latent
            gx, gw = ops.conv2d_backward(ins[0], w, gout, p["conv"])
            if trace.binarize:
                gw = ste_backward(latent, gw, clip) if sign_grad == "ste" else np.zeros_like(gw)
            pgrads[f"{lid}.weight"] = gw
            send(layer.inputs[0], gx)
        elif kind == "sign":
            if not trace.binarize:
                send(layer.inputs[0], gout)
            elif sign_grad == "ste":
                send(layer.inputs[0], ste_backward(ins[0], gout, clip))
        elif kind == "batchnorm":
            state = g.bn_state(lid)
            if trace.training:
                gx, gg, gb = ops.batchnorm_backward(ins[0], gout, state)
            else:
                inv = 1.0 / np.sqrt(state.running_var + state.eps)
                xhat = (ins[0] - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
                gx = gout * (state.gamma * inv)[None, :, None, None]
                gg, gb = (gout * xhat).sum(axis=(0, 2, 3)), gout.sum(axis=(0, 2, 3))
            pgrads[f"{lid}.gamma"], pgrads[f"{lid}.beta"] = gg, gb
            send(layer.inputs[0], gx)
        elif kind == "maxpool":
            send(layer.inputs[0], ops.maxpool2d_backward(ins[0], gout, p["kernel"], p["stride"], p["padding"]))
        elif kind == "channel-shuffle":
            send(layer.inputs[0], ops.channel_shuffle_backward(gout, p["groups"]))
        elif kind == "concat":
            start = 0
            for src, v in zip(layer.inputs, ins):
                c = v.shape[1]
                send(src, gout[:, start : start + c])
                start += c
        elif kind == "slice-add":
            send(layer.inputs[0], gout)
            send(layer.inputs[1], gout[:, p["start"] :])
        elif kind == "avgpool-global":
            send(layer.inputs[0], ops.global_avgpool_backward(ins[0].shape, gout))
        elif kind == "fully-connected":
            gx, gw, gb = ops.fully_connected_backward(ins[0], params[f"{lid}.weight"], gout)
            pgrads[f"{lid}.weight"], pgrads[f"{lid}.bias"] = gw, gb
            send(layer.inputs[0], gx)
    for name in g.trainable_names():
        pgrads.setdefault(name, np.zeros_like(params[name]))
    return pgrads


def loss_and_grads(g: ModelGraph, x: np.ndarray, labels: np.ndarray, *, training: bool = True,
                   binarize: bool = True, t_clip: float | None = None, sign_grad: str = "ste",
                   update_stats: bool = True):
    """Forward in recording mode, cross-entropy, then backward.

    Returns ``(loss, grads, logits)``.
    """
    logits, trace = forward(g, x, training, record=True, binarize=binarize, update_stats=update_stats)
    loss, glogits = cross_entropy_loss(logits, labels)
    grads = backward(g, trace, glogits, t_clip=t_clip, sign_grad=sign_grad)
    return loss, grads, logits


def lr_schedule(t: float, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero.

    ``t`` is the fraction of training completed, in [0, 1].
    """
    t = min(max(t, 0.0), 1.0)
    warm = cfg.warmup_epochs / cfg.epochs
    if warm > 0 and t < warm:
        return cfg.base_lr * t / warm
    u = (t - warm) / (1.0 - warm)
    return cfg.base_lr * (1.0 + math.cos(math.pi * u)) / 2.0


@dataclass
class OptimizerState:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update, applied in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.first.setdefault(name, np.zeros_like(g))
        v = state.second.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[name] -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(params[name].dtype)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """SGD with heavy-ball momentum, applied in place."""
    state.step += 1
    for name, g in grads.items():
        buf = state.first.setdefault(name, np.zeros_like(g))
        buf *= state.momentum
        buf += g
        params[name] -= (lr * buf).astype(params[name].dtype)


def optimizer_step(params, grads, state: OptimizerState, lr: float) -> None:
    (adam_step if state.kind == "adam" else sgd_step)(params, grads, state, lr)


@dataclass
class FlipCounter:
    """Per-weight counts of sign changes between consecutive optimizer steps."""

    reset_each_epoch: bool = True
    prev_signs: dict[str, np.ndarray] = field(default_factory=dict)
    counts: dict[str, np.ndarray] = field(default_factory=dict)
    totals: dict[str, np.ndarray] = field(default_factory=dict)
    epoch_marks: list[int] = field(default_factory=list)
    steps: int = 0

    @classmethod
    def start(cls, latents: dict[str, np.ndarray], reset_each_epoch: bool = True) -> FlipCounter:
        c = cls(reset_each_epoch)
        for name, w in latents.items():
            c.prev_signs[name] = w >= 0
            c.counts[name] = np.zeros(w.shape, np.int64)
            c.totals[name] = np.zeros(w.shape, np.int64)
        return c

    def summary(self, percentiles=FLIP_PERCENTILES) -> dict[str, dict]:
        out = {}
        for name, cnt in self.counts.items():
            flat = cnt.ravel()
            row = {
                "n_weights": flat.size,
                "frac_stable": float(np.mean(flat == 0)) if flat.size else 1.0,
                **{f"p{q}": float(np.percentile(flat, q)) for q in percentiles},
                "max": int(flat.max()) if flat.size else 0,
                "total_flips": int(flat.sum()),
            }
            out[name] = row
        return out

    def overall(self, percentiles=FLIP_PERCENTILES) -> dict:
        """Summary pooled over every binary weight of the model."""
        flat = np.concatenate([c.ravel() for c in self.counts.values()]) if self.counts else np.zeros(0, np.int64)
        return {
            "n_weights": flat.size,
            "frac_stable": float(np.mean(flat == 0)) if flat.size else 1.0,
            **{f"p{q}": float(np.percentile(flat, q)) if flat.size else 0.0 for q in percentiles},
            "max": int(flat.max()) if flat.size else 0,
            "total_flips": int(flat.sum()),
        }

    def end_epoch(self) -> dict[str, dict]:
        """Mark an epoch boundary; returns the summary of the finished epoch."""
        summary = self.summary()
        self.epoch_marks.append(self.steps)
        if self.reset_each_epoch:
            for cnt in self.counts.values():
                cnt[...] = 0
        return summary


def count_weight_flips(prev_signs: dict[str, np.ndarray], new_latent_weights: dict[str, np.ndarray],
                       counter: FlipCounter) -> FlipCounter:
    """Increment each weight's counter where its sign differs from ``prev_signs``."""
    for name, w in new_latent_weights.items():
        now = w >= 0
        flipped = now != prev_signs[name]
        counter.counts[name] += flipped
        counter.totals[name] += flipped
        counter.prev_signs[name] = now
    counter.steps += 1
    return counter


@dataclass
class TrainState:
    optimizer: OptimizerState
    flips: FlipCounter
    rng: np.random.Generator
    total_steps: int
    step: int = 0
    epoch: int = 0


def init_train_state(g: ModelGraph, dataset: Dataset, cfg: TrainConfig) -> TrainState:
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    latents = {n: g.parameters[n] for n in g.binary_weight_names()}
    return TrainState(
        optimizer=OptimizerState(kind=cfg.optimizer, momentum=cfg.momentum),
        flips=FlipCounter.start(latents, cfg.reset_flips_each_epoch),
        rng=np.random.default_rng(cfg.seed),
        total_steps=steps_per_epoch * cfg.epochs,
    )


@dataclass
class EpochMetrics:
    epoch: int
    steps: int
    loss: float
    top1: float
    lr: float
    flips: dict[str, dict]
    eval_top1: float | None = None
    flips_overall: dict | None = None

    def csv_row(self) -> dict:
        overall = self.flips_overall or _merge_flip_summary(self.flips)
        return {
            "epoch": self.epoch,
            "steps": self.steps,
            "loss": f"{self.loss:.6f}",
            "top1": f"{self.top1:.6f}",
            "lr": f"{self.lr:.8f}",
            "eval_top1": "" if self.eval_top1 is None else f"{self.eval_top1:.6f}",
            "flips_frac_stable": f"{overall['frac_stable']:.6f}",
            **{f"flips_p{q}": f"{overall[f'p{q}']:.2f}" for q in FLIP_PERCENTILES},
        }


def _merge_flip_summary(flips: dict[str, dict]) -> dict:
    # fallback when only per-layer rows are known: the max is an upper bound
    if not flips:
        return {"frac_stable": 1.0, **{f"p{q}": 0.0 for q in FLIP_PERCENTILES}}
    total = sum(r["n_weights"] for r in flips.values())
    return {
        "frac_stable": sum(r["frac_stable"] * r["n_weights"] for r in flips.values()) / total,
        **{f"p{q}": max(r[f"p{q}"] for r in flips.values()) for q in FLIP_PERCENTILES},
    }


def flip_csv_rows(history: list[EpochMetrics], optimizer: str) -> list[dict]:
    """Rows of the flip CSV: one per (epoch, binary layer) plus a pooled ``all`` row."""
    rows = []
    for m in history:
        per_layer = list(m.flips.items())
        if m.flips_overall is not None:
            per_layer.append(("all", m.flips_overall))
        for layer, r in per_layer:
            rows.append({
                "epoch": m.epoch,
                "optimizer": optimizer,
                "layer": layer.removesuffix(".weight"),
                "n_weights": r["n_weights"],
                "frac_stable": f"{r['frac_stable']:.6f}",
                **{f"p{q}": f"{r[f'p{q}']:.2f}" for q in FLIP_PERCENTILES},
                "max": r["max"],
                "total_flips": r["total_flips"],
            })
    return rows


def write_csv(path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        w.writerows(rows)


def train_epoch(g: ModelGraph, dataset: Dataset, cfg: TrainConfig, state: TrainState, on_step=None) -> EpochMetrics:
    """One pass over ``dataset`` in a seed-determined order."""
    if len(dataset) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    order = state.rng.permutation(len(dataset))
    binary = g.binary_weight_names()
    loss_sum = 0.0
    correct = 0
    lr = 0.0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        x = dataset.images[idx]
        if cfg.hflip or cfg.crop_pad:
            x = augment_batch(x, state.rng, cfg.hflip, cfg.crop_pad)
        loss, grads, logits = loss_and_grads(g, x, dataset.labels[idx], t_clip=cfg.t_clip)
        lr = lr_schedule(state.step / state.total_steps, cfg)
        optimizer_step(g.parameters, grads, state.optimizer, lr)
        count_weight_flips(state.flips.prev_signs, {n: g.parameters[n] for n in binary}, state.flips)
        state.step += 1
        loss_sum += loss * len(idx)
        correct += int((logits.argmax(axis=1) == dataset.labels[idx]).sum())
        if on_step is not None:
            on_step(state, {n: g.parameters[n] for n in binary})
    state.epoch += 1
    overall = state.flips.overall()
    return EpochMetrics(
        epoch=state.epoch,
        steps=state.step,
        loss=loss_sum / len(dataset),
        top1=correct / len(dataset),
        lr=lr,
        flips=state.flips.end_epoch(),
        flips_overall=overall,
    )


def predict(g: ModelGraph, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [forward(g, images[i : i + batch_size]).argmax(axis=1) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def evaluate(g: ModelGraph, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in inference mode."""
    if len(dataset) == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(g, dataset.images, batch_size) == dataset.labels))


def fit(g: ModelGraph, train: Dataset, cfg: TrainConfig, test: Dataset | None = None,
        log_stream=sys.stdout, csv_path=None, stop_at: float | None = None) -> list[EpochMetrics]:
    """Train for ``cfg.epochs`` epochs, writing one log record per epoch.

    ``stop_at`` ends training early once test (or train, without a test
    set) accuracy reaches the given value.
    """
    state = init_train_state(g, train, cfg)
    history: list[EpochMetrics] = []
    writer = None
    handle = open(csv_path, "w", newline="") if csv_path else None
    try:
        if handle:
            writer = csv.DictWriter(handle, fieldnames=TRAIN_CSV_COLUMNS)
            writer.writeheader()
        for _ in range(cfg.epochs):
            m = train_epoch(g, train, cfg, state)
            m.eval_top1 = evaluate(g, test if test is not None else train)
            history.append(m)
            row = m.csv_row()
            if log_stream is not None:
                print(" ".join(f"{k}={row[k]}" for k in TRAIN_CSV_COLUMNS), file=log_stream, flush=True)
            if writer:
                writer.writerow(row)
                handle.flush()
            if stop_at is not None and m.eval_top1 >= stop_at:
                break
    finally:
        if handle:
            handle.close()
    return history
