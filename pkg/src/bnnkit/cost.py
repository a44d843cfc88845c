"""Analytic operation and size accounting over a model graph.

Convolutions and the dense head cost one operation per multiply-accumulate.
Binary convolutions land in BOPs, every 32-bit layer in FLOPs, and the
combined figure is ``OPs = BOPs / 64 + FLOPs``. Normalization, pooling,
sign, shuffle, concat and residual adds are free. Model size counts binary
weights at one bit and every other stored value (conv/FC weights, FC bias,
batch-norm scale and shift) at 32 bits.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from bnnkit.graph import ArchConfig, LayerSpec, ModelGraph, build_model, infer_shapes

BINARY_SPEEDUP = 64
MB = 2**20


@dataclass(frozen=True)
class LayerCost:
    layer: str
    kind: str
    bops: int = 0
    flops: int = 0
    params_binary_bits: int = 0
    params_fp32_count: int = 0


@dataclass
class CostReport:
    name: str
    input_shape: tuple[int, int, int]
    rows: list[LayerCost] = field(default_factory=list)

    @property
    def bops(self) -> int:
        return sum(r.bops for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def ops(self) -> float:
        return self.bops / BINARY_SPEEDUP + self.flops

    @property
    def binary_bits(self) -> int:
        return sum(r.params_binary_bits for r in self.rows)

    @property
    def fp32_count(self) -> int:
        return sum(r.params_fp32_count for r in self.rows)

    @property
    def size_bytes(self) -> int:
        return math.ceil(self.binary_bits / 8) + 4 * self.fp32_count

    @property
    def size_mb(self) -> float:
        return self.size_bytes / MB

    def totals(self) -> dict:
        return {
            "BOPs": self.bops,
            "FLOPs": self.flops,
            "OPs": self.ops,
            "params_binary_bits": self.binary_bits,
            "params_fp32_count": self.fp32_count,
            "size_bytes": self.size_bytes,
            "size_MB": self.size_mb,
        }

    def by_section(self) -> dict[str, LayerCost]:
        """Sum rows by the first component of their layer id (stem, stage1, ...)."""
        out: dict[str, list[int]] = {}
        for r in self.rows:
            acc = out.setdefault(r.layer.split(".")[0], [0, 0, 0, 0])
            acc[0] += r.bops
            acc[1] += r.flops
            acc[2] += r.params_binary_bits
            acc[3] += r.params_fp32_count
        return {k: LayerCost(k, "section", *v) for k, v in out.items()}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "totals": self.totals(),
            "layers": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def layer_cost(layer: LayerSpec, input_shape: tuple[int, ...]) -> LayerCost:
    """Cost row for one layer given the (c, h, w) shape of its first input."""
    kind = layer.kind
    p = layer.params
    if kind in ("binary-conv", "fp-conv"):
        conv = p["conv"]
        _, h, w = input_shape
        oh, ow = conv.output_hw(h, w)
        kh, kw = conv.kernel
        weights = kh * kw * (conv.in_channels // conv.groups) * conv.out_channels
        macs = weights * oh * ow
        if kind == "binary-conv":
            return LayerCost(layer.id, kind, bops=macs, params_binary_bits=weights)
        return LayerCost(layer.id, kind, flops=macs, params_fp32_count=weights)
    if kind == "fully-connected":
        macs = p["in_features"] * p["out_features"]
        return LayerCost(layer.id, kind, flops=macs, params_fp32_count=macs + p["out_features"])
    if kind == "batchnorm":
        return LayerCost(layer.id, kind, params_fp32_count=2 * p["channels"])
    return LayerCost(layer.id, kind)


def model_cost(g: ModelGraph, input_shape: tuple[int, int, int] | None = None, name: str | None = None) -> CostReport:
    if input_shape is None:
        if g.config is None:
            raise ValueError("input_shape is required for graphs without a config")
        input_shape = g.config.input_shape
    shapes = infer_shapes(g, tuple(input_shape))
    report = CostReport(name or (g.config.name if g.config else "graph"), tuple(input_shape))
    for layer in g.layers:
        report.rows.append(layer_cost(layer, shapes[layer.inputs[0]]))
    return report


def config_cost(cfg: ArchConfig, input_shape: tuple[int, int, int] | None = None) -> CostReport:
    if input_shape is not None:
        cfg = cfg.replace(input_shape=tuple(input_shape))
    return model_cost(build_model(cfg, materialize=False), cfg.input_shape, cfg.name)


def compare_archs(cfgs: list[ArchConfig], input_shape: tuple[int, int, int] | None = None) -> list[CostReport]:
    return [config_cost(cfg, input_shape) for cfg in cfgs]


def block_conv_macs(c: int, growth: int, hw: int, style: str) -> int:
    """Multiply-accumulates of the binary conv in one improvement or residual
    block operating on ``c`` channels over ``hw`` pixels."""
    out = c if style == "naive-residual" else growth
    return 9 * c * out * hw


def format_table(reports: list[CostReport]) -> str:
    header = f"{'model':<14}{'input':>12}{'BOPs(1e9)':>11}{'FLOPs(1e8)':>12}{'OPs(1e8)':>10}{'Size(MB)':>10}{'bytes':>12}"
    lines = [header, "-" * len(header)]
    for r in reports:
        shape = "x".join(map(str, r.input_shape))
        lines.append(
            f"{r.name:<14}{shape:>12}{r.bops / 1e9:>11.3f}{r.flops / 1e8:>12.3f}"
            f"{r.ops / 1e8:>10.3f}{r.size_mb:>10.2f}{r.size_bytes:>12d}"
        )
    return "\n".join(lines)


def format_layers(report: CostReport) -> str:
    header = f"{'layer':<32}{'kind':<16}{'BOPs':>14}{'FLOPs':>14}{'bin bits':>12}{'fp32':>10}"
    lines = [header, "-" * len(header)]
    for r in report.rows:
        if r.bops or r.flops or r.params_binary_bits or r.params_fp32_count:
            lines.append(
                f"{r.layer:<32}{r.kind:<16}{r.bops:>14d}{r.flops:>14d}{r.params_binary_bits:>12d}{r.params_fp32_count:>10d}"
            )
    return "\n".join(lines)


def to_csv_rows(reports: list[CostReport]) -> list[dict]:
    return [{"model": r.name, "input": "x".join(map(str, r.input_shape)), **r.totals()} for r in reports]
