import json

import numpy as np
import pytest

from bnnkit.cost import (block_conv_macs, compare_archs, config_cost, format_table, layer_cost, model_cost,
                         to_csv_rows)
from bnnkit.graph import (PRESETS, ArchConfig, GraphBuilder, INPUT, LayerSpec, build_grouped_stem,
                          build_improvement_block, build_model, build_residual_block, build_stem_7x7)
from bnnkit.ops import ConvParams


def test_conv_row_counts_macs_and_bits():
    layer = LayerSpec("c", "binary-conv", {"conv": ConvParams(64, 32, 3, 1, 1)}, (INPUT,))
    row = layer_cost(layer, (64, 10, 10))
    assert row.bops == 9 * 64 * 32 * 100 and row.flops == 0
    assert row.params_binary_bits == 9 * 64 * 32 and row.params_fp32_count == 0
    layer = LayerSpec("c", "fp-conv", {"conv": ConvParams(8, 16, 3, 2, 1, groups=4)}, (INPUT,))
    row = layer_cost(layer, (8, 9, 9))
    assert row.flops == 9 * 2 * 16 * 25 and row.params_fp32_count == 9 * 2 * 16


def test_free_layers_and_head():
    fc = LayerSpec("fc", "fully-connected", {"in_features": 512, "out_features": 1000}, (INPUT,))
    assert layer_cost(fc, (512, 1, 1)).flops == 512_000
    assert layer_cost(fc, (512, 1, 1)).params_fp32_count == 513_000
    bn = LayerSpec("bn", "batchnorm", {"channels": 7, "eps": 1e-5, "momentum": 0.9}, (INPUT,))
    assert layer_cost(bn, (7, 3, 3)).params_fp32_count == 14
    for kind in ("sign", "maxpool", "concat", "channel-shuffle", "slice-add", "avgpool-global"):
        row = layer_cost(LayerSpec("x", kind, {}, (INPUT,)), (4, 2, 2))
        assert (row.bops, row.flops, row.params_binary_bits, row.params_fp32_count) == (0, 0, 0, 0)


def test_stem_operation_counts():
    seven = model_cost(build_stem_7x7(), (3, 224, 224))
    grouped = model_cost(build_grouped_stem(), (3, 224, 224))
    assert seven.flops == 7 * 7 * 3 * 64 * 112 * 112 == 118_013_952
    # 3->32 full, 32->32 in 4 groups, 32->64 in 8 groups, all 3x3 at 112x112
    assert grouped.flops == 112 * 112 * 9 * (3 * 32 + 8 * 32 + 4 * 64) == 68_640_768
    assert seven.flops - grouped.flops == 49_373_184


def test_size_and_ops_formulas():
    r = config_cost(PRESETS["meliusnet22"])
    assert r.ops == r.bops / 64 + r.flops
    assert r.size_bytes == -(-r.binary_bits // 8) + 4 * r.fp32_count
    assert r.size_mb == r.size_bytes / 2**20
    assert sum(s.bops for s in r.by_section().values()) == r.bops
    assert set(r.by_section()) == {"stem", "stage1", "stage2", "stage3", "stage4",
                                   "transition1", "transition2", "transition3", "head"}


def test_materialized_and_structural_costs_agree():
    cfg = ArchConfig("t", (1, 2, 1, 1), ((1, 2), (1, 2), (1, 2)), growth=16, input_shape=(3, 32, 32))
    a = model_cost(build_model(cfg), name="t").totals()
    b = config_cost(cfg).totals()
    assert a == b


def test_input_resolution_scales_spatial_costs():
    small = config_cost(PRESETS["meliusnet22"], (3, 112, 112))
    big = config_cost(PRESETS["meliusnet22"], (3, 224, 224))
    assert small.size_bytes == big.size_bytes
    assert big.bops == pytest.approx(4 * small.bops, rel=0.02)


@pytest.mark.parametrize("c", [128, 256, 320, 512])
def test_residual_vs_improvement_ratio(c):
    hw = 7 * 7
    ratio = block_conv_macs(c, 64, hw, "naive-residual") / block_conv_macs(c, 64, hw, "melius")
    assert ratio == c / 64
    res = model_cost(build_residual_block(c), (c, 7, 7))
    imp = model_cost(build_improvement_block(c, 64), (c, 7, 7))
    assert res.bops / imp.bops == c / 64


def test_report_serialization_is_stable():
    reports = compare_archs([PRESETS["meliusnet22"], PRESETS["meliusnetA"]])
    text = format_table(reports)
    assert text == format_table(compare_archs([PRESETS["meliusnet22"], PRESETS["meliusnetA"]]))
    assert "meliusnet22" in text and "4.624" in text
    d = json.loads(reports[0].to_json())
    assert d["totals"]["BOPs"] == reports[0].bops and len(d["layers"]) == len(reports[0].rows)
    rows = to_csv_rows(reports)
    assert rows[1]["model"] == "meliusnetA" and rows[1]["input"] == "3x224x224"


def test_builder_without_parameters_has_no_arrays():
    g = build_model("meliusnet59", materialize=False)
    assert g.parameters == {}
    assert isinstance(GraphBuilder(3, materialize=False).parameters, dict)
    assert np.isfinite(model_cost(g).ops)
