"""Model graphs built from dense blocks, improvement blocks and transitions.

A :class:`ModelGraph` is an ordered list of :class:`LayerSpec` records plus a
flat parameter map. The same graph drives inference, training and cost
accounting, so every layer carries enough parameters to derive its shape,
its cost and its gradient.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import numpy as np

from bnnkit import ops
from bnnkit.errors import ConfigError, ContractError
from bnnkit.ops import BatchNormState, ConvParams
from bnnkit.tensor import DEFAULT_T_CLIP, BitTensor, sign_dense, sign_forward

LAYER_KINDS = (
    "binary-conv",
    "fp-conv",
    "batchnorm",
    "sign",
    "maxpool",
    "avgpool-global",
    "channel-shuffle",
    "concat",
    "slice-add",
    "fully-connected",
)
STEMS = ("grouped-stem", "conv7x7")
BLOCK_STYLES = ("melius", "naive-residual", "dense-only")
INPUT = "input"


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    params: dict
    inputs: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r} for layer {self.id}")
        object.__setattr__(self, "inputs", tuple(self.inputs))


@dataclass(frozen=True)
class ArchConfig:
    name: str
    block_counts: tuple[int, int, int, int]
    reduction_fractions: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]
    growth: int = 64
    downsample_groups: int = 1
    stem: str = "grouped-stem"
    num_classes: int = 1000
    input_shape: tuple[int, int, int] = (3, 224, 224)
    block_style: str = "melius"
    # Stride of the first stem conv and whether the stem ends in a 3x3/2 max
    # pool; defaults give the 4x reduction used at 224x224. Small desk-scale
    # inputs turn one or both off to keep four stages of spatial extent.
    stem_stride: int = 2
    stem_pool: bool = True

    def __post_init__(self):
        object.__setattr__(self, "block_counts", tuple(int(b) for b in self.block_counts))
        object.__setattr__(
            self, "reduction_fractions", tuple((int(a), int(b)) for a, b in self.reduction_fractions)
        )
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if len(self.block_counts) != 4 or min(self.block_counts) < 0:
            raise ConfigError(f"block_counts must be four nonnegative counts, got {self.block_counts}")
        if len(self.reduction_fractions) != 3:
            raise ConfigError("exactly three transition reduction fractions are required")
        for num, den in self.reduction_fractions:
            if not 0 < num < den:
                raise ConfigError(f"reduction fraction {num}/{den} must lie in (0, 1)")
        if self.growth <= 0:
            raise ConfigError(f"growth must be positive, got {self.growth}")
        if self.downsample_groups < 1:
            raise ConfigError("downsample_groups must be >= 1")
        if self.stem not in STEMS:
            raise ConfigError(f"unknown stem {self.stem!r}; choose from {STEMS}")
        if self.block_style not in BLOCK_STYLES:
            raise ConfigError(f"unknown block_style {self.block_style!r}; choose from {BLOCK_STYLES}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (c, h, w), got {self.input_shape}")
        if self.num_classes < 1 or self.stem_stride < 1:
            raise ConfigError("num_classes and stem_stride must be positive")

    def replace(self, **changes) -> ArchConfig:
        return dataclasses.replace(self, **changes)

    def stage_channels(self) -> list[tuple[int, int]]:
        """(channels entering, channels leaving) for each of the four stages."""
        c = STEM_CHANNELS
        trace = []
        for s, blocks in enumerate(self.block_counts):
            out = c + blocks * self.growth
            trace.append((c, out))
            if s < 3:
                c = transition_channels(out, self.reduction_fractions[s])
        return trace


STEM_CHANNELS = 64


def transition_channels(c_in: int, fraction: tuple[int, int]) -> int:
    c_out = Fraction(c_in) * Fraction(*fraction)
    if c_out.denominator != 1:
        raise ConfigError(f"reduction {fraction[0]}/{fraction[1]} of {c_in} channels is not an integer")
    return int(c_out)


def _preset(name, blocks, fractions, groups=1):
    return ArchConfig(name=name, block_counts=blocks, reduction_fractions=fractions, downsample_groups=groups)


PRESETS: dict[str, ArchConfig] = {
    cfg.name: cfg
    for cfg in (
        _preset("meliusnet22", (4, 5, 4, 4), ((160, 320), (224, 480), (256, 480))),
        _preset("meliusnet29", (4, 6, 8, 6), ((128, 320), (192, 512), (256, 704))),
        _preset("meliusnet42", (5, 8, 14, 10), ((160, 384), (256, 672), (416, 1152))),
        _preset("meliusnet59", (6, 12, 24, 12), ((192, 448), (320, 960), (544, 1856))),
        _preset("meliusnetA", (4, 5, 5, 6), ((160, 320), (256, 480), (288, 576)), groups=4),
        _preset("meliusnetB", (4, 6, 8, 6), ((160, 320), (224, 544), (320, 736)), groups=2),
        # The published third fraction (224/704) cannot follow ten 64-channel
        # blocks from 192 channels; 288/832 reproduces all four cost columns.
        _preset("meliusnetC", (3, 5, 10, 6), ((128, 256), (192, 448), (288, 832)), groups=4),
    )
}

# Transition fractions as printed in the published table, kept for auditing.
PUBLISHED_FRACTIONS: dict[str, tuple[tuple[int, int], ...]] = {
    **{name: cfg.reduction_fractions for name, cfg in PRESETS.items()},
    "meliusnetC": ((128, 256), (192, 448), (224, 704)),
}


def get_preset(name: str) -> ArchConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known presets: {', '.join(PRESETS)}") from None


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def parse_shape(text: str) -> tuple[int, int, int]:
    parts = text.lower().replace("×", "x").split("x")
    try:
        shape = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"shape must look like CxHxW, got {text!r}") from None
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigError(f"shape must look like CxHxW, got {text!r}")
    return shape


def parse_arch_config(text: str) -> ArchConfig:
    """Parse ``key = value`` lines into an :class:`ArchConfig`.

    Recognized keys: ``base`` (preset to start from), ``name``,
    ``block_counts`` (``4,5,4,4``), ``reductions`` (``160/320, 224/480,
    256/480``), ``growth``, ``downsample_groups``, ``stem``,
    ``num_classes``, ``input_shape`` (``3x224x224``), ``block_style``,
    ``stem_stride``, ``stem_pool``. ``#`` starts a comment.
    """
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        entries[key] = value

    fields: dict = {}
    if "base" in entries:
        fields = dataclasses.asdict(get_preset(entries.pop("base")))
    converters = {
        "name": str,
        "block_counts": lambda v: tuple(int(x) for x in v.split(",")),
        "reductions": lambda v: tuple(tuple(int(y) for y in x.split("/")) for x in v.split(",")),
        "growth": int,
        "downsample_groups": int,
        "stem": str,
        "num_classes": int,
        "input_shape": parse_shape,
        "block_style": str,
        "stem_stride": int,
        "stem_pool": _parse_bool,
    }
    for key, value in entries.items():
        if key not in converters:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            converted = converters[key](value)
        except (ValueError, TypeError):
            raise ConfigError(f"bad value for {key}: {value!r}") from None
        fields["reduction_fractions" if key == "reductions" else key] = converted
    fields.setdefault("name", "custom")
    missing = {"block_counts", "reduction_fractions"} - fields.keys()
    if missing:
        raise ConfigError(f"config is missing {sorted(missing)}")
    return ArchConfig(**fields)


def format_arch_config(cfg: ArchConfig) -> str:
    red = ", ".join(f"{a}/{b}" for a, b in cfg.reduction_fractions)
    lines = [
        f"name = {cfg.name}",
        f"block_counts = {','.join(map(str, cfg.block_counts))}",
        f"reductions = {red}",
        f"growth = {cfg.growth}",
        f"downsample_groups = {cfg.downsample_groups}",
        f"stem = {cfg.stem}",
        f"stem_stride = {cfg.stem_stride}",
        f"stem_pool = {str(cfg.stem_pool).lower()}",
        f"num_classes = {cfg.num_classes}",
        f"input_shape = {'x'.join(map(str, cfg.input_shape))}",
        f"block_style = {cfg.block_style}",
    ]
    return "\n".join(lines) + "\n"


def load_arch(ref: str) -> ArchConfig:
    """Resolve a preset name or a path to a config file."""
    if ref in PRESETS:
        return PRESETS[ref]
    path = Path(ref)
    if path.is_file():
        return parse_arch_config(path.read_text())
    return get_preset(ref)


@dataclass
class ModelGraph:
    layers: list[LayerSpec]
    parameters: dict[str, np.ndarray]
    input_channels: int
    config: ArchConfig | None = None
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {layer.id: i for i, layer in enumerate(self.layers)}

    @property
    def output(self) -> str:
        return self.layers[-1].id if self.layers else INPUT

    @property
    def dtype(self):
        for v in self.parameters.values():
            return v.dtype
        return np.dtype(np.float32)

    def layer(self, layer_id: str) -> LayerSpec:
        return self.layers[self._index[layer_id]]

    def bn_state(self, layer_id: str) -> BatchNormState:
        lp = self.layer(layer_id).params
        p = self.parameters
        return BatchNormState(
            gamma=p[f"{layer_id}.gamma"],
            beta=p[f"{layer_id}.beta"],
            running_mean=p[f"{layer_id}.running_mean"],
            running_var=p[f"{layer_id}.running_var"],
            eps=lp["eps"],
            momentum=lp["momentum"],
        )

    def binary_weight_names(self) -> list[str]:
        return [f"{layer.id}.weight" for layer in self.layers if layer.kind == "binary-conv"]

    def trainable_names(self) -> list[str]:
        return [k for k in self.parameters if not k.endswith((".running_mean", ".running_var"))]

    def layers_of(self, kind: str) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind == kind]

    def copy(self) -> ModelGraph:
        return ModelGraph(
            list(self.layers),
            {k: v.copy() for k, v in self.parameters.items()},
            self.input_channels,
            self.config,
        )

    def astype(self, dtype) -> ModelGraph:
        g = self.copy()
        g.parameters = {k: v.astype(dtype) for k, v in g.parameters.items()}
        return g

    def validate(self, check_parameters: bool = True) -> None:
        """Check ordering, acyclicity and (optionally) parameter shapes."""
        seen = {INPUT}
        for layer in self.layers:
            if layer.id in seen:
                raise ContractError(f"duplicate layer id {layer.id}")
            for src in layer.inputs:
                if src not in seen:
                    raise ContractError(f"layer {layer.id} reads {src!r} before it is defined")
            seen.add(layer.id)
            if not check_parameters:
                continue
            for name, shape in expected_parameter_shapes(layer).items():
                arr = self.parameters.get(name)
                if arr is None:
                    raise ContractError(f"layer {layer.id} is missing parameter {name}")
                if arr.shape != shape:
                    raise ContractError(f"parameter {name} has shape {arr.shape}, expected {shape}")

    def forward(self, x: np.ndarray, training: bool = False, **kw) -> np.ndarray:
        return forward(self, x, training, **kw)


def expected_parameter_shapes(layer: LayerSpec) -> dict[str, tuple[int, ...]]:
    p = layer.params
    if layer.kind in ("binary-conv", "fp-conv"):
        return {f"{layer.id}.weight": p["conv"].weight_shape}
    if layer.kind == "batchnorm":
        c = p["channels"]
        return {f"{layer.id}.{k}": (c,) for k in ("gamma", "beta", "running_mean", "running_var")}
    if layer.kind == "fully-connected":
        return {f"{layer.id}.weight": (p["out_features"], p["in_features"]), f"{layer.id}.bias": (p["out_features"],)}
    return {}


def glorot_uniform(rng: np.random.Generator, conv: ConvParams, dtype=np.float32) -> np.ndarray:
    """Fan-average uniform init with fans counted per group."""
    kh, kw = conv.kernel
    fan_in = conv.in_channels // conv.groups * kh * kw
    fan_out = conv.out_channels // conv.groups * kh * kw
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, conv.weight_shape).astype(dtype)


class GraphBuilder:
    """Appends layers while tracking the channel count of every node."""

    def __init__(self, input_channels: int, rng: np.random.Generator | None = None,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.9, t_clip: float = DEFAULT_T_CLIP,
                 materialize: bool = True):
        self.input_channels = input_channels
        # Structure-only builds (cost accounting) skip parameter allocation.
        self.materialize = materialize
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.layers: list[LayerSpec] = []
        self.parameters: dict[str, np.ndarray] = {}
        self.channels: dict[str, int] = {INPUT: input_channels}
        self.bn_eps, self.bn_momentum, self.t_clip = bn_eps, bn_momentum, t_clip

    def _add(self, layer_id: str, kind: str, params: dict, inputs: Iterable[str], channels: int) -> str:
        if layer_id in self.channels:
            raise ContractError(f"duplicate layer id {layer_id}")
        self.layers.append(LayerSpec(layer_id, kind, params, tuple(inputs)))
        self.channels[layer_id] = channels
        return layer_id

    def conv(self, src: str, layer_id: str, out_channels: int, kernel=3, stride=1, padding=0,
             groups=1, binary=False) -> str:
        conv = ConvParams(self.channels[src], out_channels, kernel, stride, padding, groups)
        if self.materialize:
            self.parameters[f"{layer_id}.weight"] = glorot_uniform(self.rng, conv)
        return self._add(layer_id, "binary-conv" if binary else "fp-conv", {"conv": conv}, [src], out_channels)

    def batchnorm(self, src: str, layer_id: str) -> str:
        c = self.channels[src]
        if self.materialize:
            st = BatchNormState.fresh(c)
            for k in ("gamma", "beta", "running_mean", "running_var"):
                self.parameters[f"{layer_id}.{k}"] = getattr(st, k)
        return self._add(layer_id, "batchnorm", {"channels": c, "eps": self.bn_eps, "momentum": self.bn_momentum}, [src], c)

    def sign(self, src: str, layer_id: str) -> str:
        return self._add(layer_id, "sign", {"t_clip": self.t_clip}, [src], self.channels[src])

    def maxpool(self, src: str, layer_id: str, kernel=2, stride=2, padding=0) -> str:
        params = {"kernel": kernel, "stride": stride, "padding": padding}
        return self._add(layer_id, "maxpool", params, [src], self.channels[src])

    def shuffle(self, src: str, layer_id: str, groups: int) -> str:
        if self.channels[src] % groups:
            raise ConfigError(f"{layer_id}: {self.channels[src]} channels not divisible by {groups} groups")
        return self._add(layer_id, "channel-shuffle", {"groups": groups}, [src], self.channels[src])

    def concat(self, srcs: list[str], layer_id: str) -> str:
        return self._add(layer_id, "concat", {}, srcs, sum(self.channels[s] for s in srcs))

    def slice_add(self, base: str, residual: str, layer_id: str) -> str:
        cb, cr = self.channels[base], self.channels[residual]
        if cr > cb:
            raise ConfigError(f"{layer_id}: residual of {cr} channels cannot land on {cb}")
        return self._add(layer_id, "slice-add", {"start": cb - cr}, [base, residual], cb)

    def global_avgpool(self, src: str, layer_id: str) -> str:
        return self._add(layer_id, "avgpool-global", {}, [src], self.channels[src])

    def fully_connected(self, src: str, layer_id: str, out_features: int) -> str:
        c = self.channels[src]
        if self.materialize:
            limit = math.sqrt(6.0 / (c + out_features))
            self.parameters[f"{layer_id}.weight"] = self.rng.uniform(-limit, limit, (out_features, c)).astype(np.float32)
            self.parameters[f"{layer_id}.bias"] = np.zeros(out_features, np.float32)
        return self._add(layer_id, "fully-connected", {"in_features": c, "out_features": out_features}, [src], out_features)

    def binary_unit(self, src: str, prefix: str, out_channels: int) -> str:
        """BatchNorm -> sign -> binary 3x3 conv (stride 1, pad 1)."""
        x = self.batchnorm(src, f"{prefix}.bn")
        x = self.sign(x, f"{prefix}.sign")
        return self.conv(x, f"{prefix}.conv", out_channels, 3, 1, 1, binary=True)

    def dense_block(self, src: str, prefix: str, growth: int) -> str:
        if self.channels[src] <= 0:
            raise ConfigError(f"{prefix}: dense block needs a nonempty input")
        new = self.binary_unit(src, prefix, growth)
        return self.concat([src, new], f"{prefix}.concat")

    def improvement_block(self, src: str, prefix: str, growth: int) -> str:
        c = self.channels[src]
        if c <= growth:
            raise ConfigError(f"{prefix}: improvement block needs more than {growth} input channels, got {c}")
        res = self.binary_unit(src, prefix, growth)
        return self.slice_add(src, res, f"{prefix}.add")

    def residual_block(self, src: str, prefix: str) -> str:
        res = self.binary_unit(src, prefix, self.channels[src])
        return self.slice_add(src, res, f"{prefix}.add")

    def transition(self, src: str, prefix: str, c_out: int, groups: int = 1) -> str:
        c_in = self.channels[src]
        if not c_out < c_in:
            raise ConfigError(f"{prefix}: transition must reduce channels, got {c_in} -> {c_out}")
        if c_in % groups or c_out % groups:
            raise ConfigError(f"{prefix}: {c_in} -> {c_out} channels not divisible by {groups} groups")
        x = self.maxpool(src, f"{prefix}.pool", 2, 2, 0)
        if groups > 1:
            x = self.shuffle(x, f"{prefix}.shuffle", groups)
        x = self.conv(x, f"{prefix}.conv", c_out, 1, 1, 0, groups)
        return self.batchnorm(x, f"{prefix}.bn")

    def grouped_stem(self, src: str, prefix: str = "stem", stride: int = 2, pool: bool = True) -> str:
        x = self.conv(src, f"{prefix}.conv1", 32, 3, stride, 1)
        x = self.batchnorm(x, f"{prefix}.bn1")
        x = self.conv(x, f"{prefix}.conv2", 32, 3, 1, 1, groups=4)
        x = self.batchnorm(x, f"{prefix}.bn2")
        x = self.conv(x, f"{prefix}.conv3", STEM_CHANNELS, 3, 1, 1, groups=8)
        x = self.batchnorm(x, f"{prefix}.bn3")
        return self.maxpool(x, f"{prefix}.pool", 3, 2, 1) if pool else x

    def stem_7x7(self, src: str, prefix: str = "stem", stride: int = 2, pool: bool = True) -> str:
        x = self.conv(src, f"{prefix}.conv", STEM_CHANNELS, 7, stride, 3)
        x = self.batchnorm(x, f"{prefix}.bn")
        return self.maxpool(x, f"{prefix}.pool", 3, 2, 1) if pool else x

    def finish(self, config: ArchConfig | None = None) -> ModelGraph:
        g = ModelGraph(list(self.layers), dict(self.parameters), self.input_channels, config)
        g.validate(check_parameters=self.materialize)
        return g


def _standalone(c_in, seed, build) -> ModelGraph:
    b = GraphBuilder(c_in, np.random.default_rng(seed))
    build(b)
    return b.finish()


def build_dense_block(c_in: int, growth: int = 64, seed: int = 0) -> ModelGraph:
    if c_in <= 0:
        raise ConfigError("dense block needs c_in > 0")
    return _standalone(c_in, seed, lambda b: b.dense_block(INPUT, "dense", growth))


def build_improvement_block(c_in: int, growth: int = 64, seed: int = 0) -> ModelGraph:
    return _standalone(c_in, seed, lambda b: b.improvement_block(INPUT, "improve", growth))


def build_residual_block(c_in: int, seed: int = 0) -> ModelGraph:
    return _standalone(c_in, seed, lambda b: b.residual_block(INPUT, "residual"))


def build_transition(c_in: int, c_out: int, groups: int = 1, seed: int = 0) -> ModelGraph:
    return _standalone(c_in, seed, lambda b: b.transition(INPUT, "transition", c_out, groups))


def build_grouped_stem(c_img: int = 3, stride: int = 2, pool: bool = True, seed: int = 0) -> ModelGraph:
    return _standalone(c_img, seed, lambda b: b.grouped_stem(INPUT, "stem", stride, pool))


def build_stem_7x7(c_img: int = 3, stride: int = 2, pool: bool = True, seed: int = 0) -> ModelGraph:
    return _standalone(c_img, seed, lambda b: b.stem_7x7(INPUT, "stem", stride, pool))


def build_model(cfg: ArchConfig | str, seed: int = 0, materialize: bool = True) -> ModelGraph:
    """Stem, four stages of blocks with three transitions, then the classifier head.

    ``materialize=False`` returns the layer structure without parameters,
    which is all cost accounting needs.
    """
    if isinstance(cfg, str):
        cfg = get_preset(cfg)
    b = GraphBuilder(cfg.input_shape[0], np.random.default_rng(seed), materialize=materialize)
    stem = b.grouped_stem if cfg.stem == "grouped-stem" else b.stem_7x7
    x = stem(INPUT, "stem", cfg.stem_stride, cfg.stem_pool)
    for s, blocks in enumerate(cfg.block_counts):
        for i in range(blocks):
            prefix = f"stage{s + 1}.block{i}"
            x = b.dense_block(x, f"{prefix}.dense", cfg.growth)
            if cfg.block_style == "melius":
                x = b.improvement_block(x, f"{prefix}.improve", cfg.growth)
            elif cfg.block_style == "naive-residual":
                x = b.residual_block(x, f"{prefix}.residual")
        if s < 3:
            c_out = transition_channels(b.channels[x], cfg.reduction_fractions[s])
            x = b.transition(x, f"transition{s + 1}", c_out, cfg.downsample_groups)
    x = b.batchnorm(x, "head.bn")
    x = b.global_avgpool(x, "head.pool")
    b.fully_connected(x, "head.fc", cfg.num_classes)
    g = b.finish(cfg)
    infer_shapes(g, cfg.input_shape)
    return g


def _pool_out(h: int, w: int, kernel, stride, padding, layer_id: str) -> tuple[int, int]:
    (kh, kw), (sh, sw), (ph, pw) = (ops._pair(v) for v in (kernel, stride, padding))
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ContractError(f"layer {layer_id}: pool window {kh}x{kw} larger than padded {h}x{w} input")
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def infer_shapes(g: ModelGraph, input_shape: tuple[int, int, int]) -> dict[str, tuple[int, ...]]:
    """Propagate (c, h, w) shapes through the graph without touching data."""
    c, h, w = input_shape
    if c != g.input_channels:
        raise ContractError(f"graph expects {g.input_channels} input channels, got {c}")
    shapes: dict[str, tuple[int, ...]] = {INPUT: tuple(input_shape)}
    for layer in g.layers:
        ins = [shapes[s] for s in layer.inputs]
        p = layer.params
        kind = layer.kind
        if kind in ("binary-conv", "fp-conv"):
            conv: ConvParams = p["conv"]
            ci, hi, wi = ins[0]
            if ci != conv.in_channels:
                raise ContractError(f"layer {layer.id}: expects {conv.in_channels} channels, got {ci}")
            try:
                out = (conv.out_channels, *conv.output_hw(hi, wi))
            except ContractError as exc:
                raise ContractError(f"layer {layer.id}: {exc}") from None
        elif kind == "maxpool":
            ci, hi, wi = ins[0]
            out = (ci, *_pool_out(hi, wi, p["kernel"], p["stride"], p["padding"], layer.id))
        elif kind == "concat":
            if len({s[1:] for s in ins}) != 1:
                raise ContractError(f"layer {layer.id}: concat of mismatched spatial shapes {ins}")
            out = (sum(s[0] for s in ins), *ins[0][1:])
        elif kind == "slice-add":
            base, res = ins
            if base[1:] != res[1:] or p["start"] + res[0] != base[0]:
                raise ContractError(f"layer {layer.id}: cannot add {res} at channel {p['start']} of {base}")
            out = base
        elif kind == "avgpool-global":
            out = (ins[0][0], 1, 1)
        elif kind == "fully-connected":
            if ins[0][0] * ins[0][1] * ins[0][2] != p["in_features"]:
                raise ContractError(f"layer {layer.id}: expects {p['in_features']} features, got {ins[0]}")
            out = (p["out_features"],)
        else:
            if kind == "batchnorm" and ins[0][0] != p["channels"]:
                raise ContractError(f"layer {layer.id}: expects {p['channels']} channels, got {ins[0][0]}")
            if kind == "channel-shuffle" and ins[0][0] % p["groups"]:
                raise ContractError(f"layer {layer.id}: {ins[0][0]} channels not divisible by {p['groups']}")
            out = ins[0]
        if min(out) < 1:
            raise ContractError(f"layer {layer.id}: empty output shape {out}")
        shapes[layer.id] = out
    return shapes


@dataclass
class Trace:
    """Values recorded by a forward pass, consumed by backpropagation."""

    values: dict[str, np.ndarray]
    binarize: bool
    training: bool


def _binary_weight(latent: np.ndarray, binarize: bool) -> np.ndarray:
    return sign_dense(latent) if binarize else latent


def forward(g: ModelGraph, x: np.ndarray, training: bool = False, *, record: bool = False,
            binarize: bool = True, kernel: str = "auto", update_stats: bool = True,
            frozen: dict[str, np.ndarray] | None = None):
    """Run the graph in layer order.

    ``binarize=False`` replaces every sign by the identity and uses latent
    weights directly (a real-valued surrogate of the same graph).
    ``kernel`` picks the binary conv implementation: ``"xnor"`` (packed
    popcount), ``"float"`` (±1 values through the reference conv) or
    ``"auto"`` (xnor outside of training). Both are exact and agree bitwise.
    With ``record=True`` a :class:`Trace` is returned alongside the output.

    ``frozen`` pins piecewise layers to a fixed piece: sign layers map to
    their output values and max-pool layers to per-window argmax indices.
    Finite-difference checks use it to stay on one smooth piece.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != g.input_channels:
        raise ContractError(f"graph input must be n x {g.input_channels} x h x w, got {x.shape}")
    dtype = g.dtype
    x = x.astype(dtype, copy=False)
    use_xnor = binarize and (kernel == "xnor" or (kernel == "auto" and not training and not record))
    vals: dict[str, object] = {INPUT: x}
    params = g.parameters
    for layer in g.layers:
        ins = [vals[s] for s in layer.inputs]
        try:
            vals[layer.id] = _run_layer(g, layer, ins, params, training, binarize, use_xnor,
                                        update_stats, frozen)
        except ContractError as exc:
            raise ContractError(f"layer {layer.id} ({layer.kind}): {exc}") from None
    out = vals[g.output]
    if record:
        return out, Trace(vals, binarize, training)
    return out


def _run_layer(g, layer, ins, params, training, binarize, use_xnor, update_stats, frozen):
    kind, p, lid = layer.kind, layer.params, layer.id
    if kind == "fp-conv":
        return ops.conv2d_reference(ins[0], params[f"{lid}.weight"], p["conv"])
    if kind == "binary-conv":
        latent = params[f"{lid}.weight"]
        src = ins[0]
        if isinstance(src, BitTensor):
            return ops.conv2d_xnor(src, sign_forward(latent), p["conv"]).astype(g.dtype)
        return ops.conv2d_reference(src, _binary_weight(latent, binarize), p["conv"])
    if kind == "sign":
        if not binarize:
            return ins[0]
        if frozen is not None and lid in frozen:
            return frozen[lid]
        return sign_forward(ins[0]) if use_xnor else sign_dense(ins[0])
    if kind == "batchnorm":
        return ops.batchnorm_forward(ins[0], g.bn_state(lid), training, update_stats)
    if kind == "maxpool":
        if frozen is not None and lid in frozen:
            return ops.maxpool2d_gather(ins[0], frozen[lid], p["kernel"], p["stride"], p["padding"])
        return ops.maxpool2d(ins[0], p["kernel"], p["stride"], p["padding"])
    if kind == "channel-shuffle":
        return ops.channel_shuffle(ins[0], p["groups"])
    if kind == "concat":
        return np.concatenate(ins, axis=1)
    if kind == "slice-add":
        base, res = ins
        if base.shape[2:] != res.shape[2:] or p["start"] + res.shape[1] != base.shape[1]:
            raise ContractError(f"cannot add {res.shape} onto {base.shape} at channel {p['start']}")
        out = base.copy()
        out[:, p["start"]:] += res
        return out
    if kind == "avgpool-global":
        return ops.global_avgpool(ins[0])
    if kind == "fully-connected":
        return ops.fully_connected(ins[0], params[f"{lid}.weight"], params[f"{lid}.bias"])
    raise ContractError(f"no executor for kind {kind}")


def piece_snapshot(g: ModelGraph, trace: Trace) -> dict[str, np.ndarray]:
    """Sign outputs and max-pool selections of a recorded pass, for ``forward(frozen=...)``."""
    out = {}
    for layer in g.layers:
        if layer.kind == "sign" and trace.binarize:
            out[layer.id] = trace.values[layer.id]
        elif layer.kind == "maxpool":
            p = layer.params
            out[layer.id] = ops.maxpool2d_argmax(trace.values[layer.inputs[0]], p["kernel"], p["stride"], p["padding"])
    return out


def remove_improvement_blocks(g: ModelGraph) -> ModelGraph:
    """Copy of ``g`` with every improvement block spliced out."""
    drop = {layer.id for layer in g.layers if ".improve." in layer.id}
    rename: dict[str, str] = {}
    layers = []
    for layer in g.layers:
        if layer.id in drop:
            if layer.kind == "slice-add":
                rename[layer.id] = rename.get(layer.inputs[0], layer.inputs[0])
            continue
        inputs = tuple(rename.get(s, s) for s in layer.inputs)
        layers.append(dataclasses.replace(layer, inputs=inputs))
    keep = {name for layer in layers for name in expected_parameter_shapes(layer)}
    params = {k: v.copy() for k, v in g.parameters.items() if k in keep}
    out = ModelGraph(layers, params, g.input_channels, g.config)
    out.validate()
    return out
