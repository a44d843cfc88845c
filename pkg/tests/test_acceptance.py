"""End-to-end acceptance checks, one ``criterion`` marker per requirement.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary ends with
one PASS/FAIL line per criterion.
"""

import csv
import io
import json
import time

import numpy as np
import pytest
import sympy

from bnnkit.cli import main
from bnnkit.cost import block_conv_macs, model_cost
from bnnkit.data import load_train_test, separable_images
from bnnkit.errors import ConfigError
from bnnkit.gradcheck import gradient_check
from bnnkit.graph import (PRESETS, PUBLISHED_FRACTIONS, ArchConfig, build_grouped_stem, build_improvement_block,
                          build_model, build_residual_block, build_stem_7x7, forward, load_arch,
                          remove_improvement_blocks)
from bnnkit.serialization import export_weights, import_weights, inference_parameters
from bnnkit.training import (FLIP_CSV_COLUMNS, FLIP_PERCENTILES, TrainConfig, evaluate, fit, flip_csv_rows,
                             init_train_state, train_epoch)
from bnnkit.verify import check_ste, check_xnor_conv, sign_oracle, ste_oracle

from conftest import CONFIGS, DIGITS

# name: (BOPs 1e9, FLOPs 1e8, OPs 1e8, Size MB) as published
TABLE1 = {
    "meliusnet22": (4.62, 1.35, 2.08, 3.9),
    "meliusnet29": (5.47, 1.29, 2.14, 5.1),
    "meliusnet42": (9.69, 1.74, 3.25, 10.1),
    "meliusnet59": (18.3, 2.45, 5.25, 17.4),
    "meliusnetA": (4.85, 0.86, 1.62, 4.0),
    "meliusnetB": (5.72, 1.06, 1.96, 5.0),
    "meliusnetC": (4.35, 0.82, 1.50, 4.5),
}

TINY = ArchConfig("tiny", (1, 1, 1, 1), ((1, 2), (1, 2), (1, 2)), growth=16, num_classes=2,
                  input_shape=(3, 16, 16), stem_stride=1, stem_pool=False)


# -- 1 -------------------------------------------------------------------------

@pytest.mark.criterion(1, "Table 1 reproduction")
def test_table1_reproduction(capsys, note):
    start = time.perf_counter()
    assert main(["summarize", "--arch", *TABLE1, "--input", "3x224x224", "--format", "json"]) == 0
    elapsed = time.perf_counter() - start
    reports = {r["name"]: r["totals"] for r in json.loads(capsys.readouterr().out)}
    worst = {"BOPs": 0.0, "other": 0.0}
    for name, (bops, flops, ops, size) in TABLE1.items():
        t = reports[name]
        got = (t["BOPs"] / 1e9, t["FLOPs"] / 1e8, t["OPs"] / 1e8, t["size_MB"])
        errs = [abs(g - p) / p for g, p in zip(got, (bops, flops, ops, size))]
        worst["BOPs"] = max(worst["BOPs"], errs[0])
        worst["other"] = max(worst["other"], *errs[1:])
        assert errs[0] <= 0.01, f"{name} BOPs {got[0]:.3f} vs {bops}"
        for label, e, g, p in zip(("FLOPs", "OPs", "Size"), errs[1:], got[1:], (flops, ops, size)):
            assert e <= 0.03, f"{name} {label} {g:.3f} vs {p}"
    note(f"max BOPs err {worst['BOPs']:.2%}, max other err {worst['other']:.2%}, {elapsed:.2f}s")
    assert elapsed < 1.0


# -- 2 -------------------------------------------------------------------------

@pytest.mark.criterion(2, "Stem arithmetic")
def test_stem_arithmetic(note):
    seven = model_cost(build_stem_7x7(), (3, 224, 224)).flops
    grouped = model_cost(build_grouped_stem(), (3, 224, 224)).flops
    note(f"7x7 {seven:,}, grouped {grouped:,}, saved {seven - grouped:,}")
    assert seven == pytest.approx(1.18e8, rel=0.01)
    assert grouped == pytest.approx(0.69e8, rel=0.01)
    assert seven - grouped == pytest.approx(0.49e8, rel=0.01)


# -- 3 -------------------------------------------------------------------------

@pytest.mark.criterion(3, "Kernel exactness")
def test_xnor_kernel_exactness(note):
    start = time.perf_counter()
    res = check_xnor_conv(1000, seed=2024)
    elapsed = time.perf_counter() - start
    note(f"{res.trials} cases, {len(res.failures)} mismatches, {elapsed:.1f}s")
    assert res.ok, res.failures[:5]
    assert elapsed < 30


# -- 4 -------------------------------------------------------------------------

@pytest.mark.criterion(4, "STE correctness")
def test_ste_and_sign(note):
    res = check_ste(10_000, seed=11)
    note(f"{res.trials} scalars")
    assert res.trials == 10_000 and res.ok, res.failures
    from bnnkit.tensor import sign_forward, ste_backward, unpack_bits

    edge = np.array([0.0, -0.0, 1.3, -1.3, 1.3000001, -1.3000001]).reshape(1, 6, 1, 1)
    up = np.ones_like(edge)
    np.testing.assert_array_equal(ste_backward(edge, up), ste_oracle(edge, up))
    np.testing.assert_array_equal(ste_backward(edge, up).ravel(), [1, 1, 1, 1, 0, 0])
    np.testing.assert_array_equal(unpack_bits(sign_forward(edge)), sign_oracle(edge))
    assert unpack_bits(sign_forward(edge)).ravel()[0] == 1.0


# -- 5 -------------------------------------------------------------------------

@pytest.mark.criterion(5, "Gradient checks")
def test_gradient_checks(note):
    start = time.perf_counter()
    ds = separable_images(4, (3, 16, 16), seed=0)
    g = build_model(TINY, seed=0)
    binarized = gradient_check(g, ds.images, ds.labels, binarize=True, per_tensor=4, seed=1)
    surrogate = gradient_check(g, ds.images, ds.labels, binarize=False, per_tensor=4, seed=1)
    elapsed = time.perf_counter() - start
    note(f"binarized worst {binarized.worst:.1e} over {binarized.checked}, "
         f"surrogate worst {surrogate.worst:.1e} over {surrogate.checked}, {elapsed:.0f}s")
    assert len(binarized.errors) == len(g.trainable_names()) - len(g.binary_weight_names())
    assert binarized.worst < 1e-2, binarized.worst_tensor()
    assert surrogate.worst < 1e-2, surrogate.worst_tensor()
    assert elapsed < 120


# -- 6 -------------------------------------------------------------------------

@pytest.mark.criterion(6, "Architecture invariants")
@pytest.mark.parametrize("name", list(PRESETS))
def test_channel_bookkeeping_matches_published_fractions(name):
    g = build_model(name, materialize=False)
    got = [(layer.params["conv"].out_channels, layer.params["conv"].in_channels)
           for layer in g.layers if layer.id.startswith("transition") and layer.kind == "fp-conv"]
    assert got == list(PUBLISHED_FRACTIONS[name])
    stage_end = [c for _, c in PRESETS[name].stage_channels()[:3]]
    assert stage_end == [den for _, den in PUBLISHED_FRACTIONS[name]]


@pytest.mark.criterion(6, "Architecture invariants")
def test_zero_improvement_blocks_are_identity():
    rng = np.random.default_rng(3)
    g = build_model(TINY.replace(num_classes=5), seed=3)
    for k in g.parameters:
        if ".improve.conv" in k:
            g.parameters[k][...] = 0.0
    x = rng.normal(size=(3, 3, 16, 16)).astype(np.float32)
    plain = remove_improvement_blocks(g)
    a = forward(g, x, binarize=False)
    b = forward(plain, x, binarize=False)
    assert a.tobytes() == b.tobytes()


@pytest.mark.criterion(6, "Architecture invariants")
def test_residual_cost_grows_by_c_over_64(note):
    c, hw = sympy.symbols("c hw", positive=True)
    sym_ratio = sympy.simplify(9 * c * c * hw / (9 * c * 64 * hw))
    assert sym_ratio == c / 64
    for width in (128, 320, 512):
        res = model_cost(build_residual_block(width), (width, 14, 14)).bops
        imp = model_cost(build_improvement_block(width, 64), (width, 14, 14)).bops
        assert res / imp == width / 64 == block_conv_macs(width, 64, 1, "naive-residual") / block_conv_macs(width, 64, 1, "melius")
    note("ratio at c=320: 5")


# -- 7 -------------------------------------------------------------------------

@pytest.mark.criterion(7, "Desk-scale training")
def test_separable_two_class_reaches_full_train_accuracy(note):
    ds = separable_images(256, (3, 16, 16), seed=0)
    g = build_model(load_arch(str(CONFIGS / "toy16.cfg")), seed=0)
    cfg = TrainConfig(epochs=20, base_lr=0.005, warmup_epochs=1, batch_size=32, seed=0, hflip=False)
    history = fit(g, ds, cfg, log_stream=None, stop_at=1.0)
    note(f"separable: train top-1 {history[-1].eval_top1:.3f} after {len(history)} epochs")
    assert evaluate(g, ds) == 1.0 and len(history) <= 20


@pytest.mark.criterion(7, "Desk-scale training")
def test_digits_reach_97_percent(note):
    start = time.perf_counter()
    train, test = load_train_test(DIGITS)
    g = build_model(load_arch(str(CONFIGS / "digits.cfg")), seed=0)
    cfg = TrainConfig(epochs=10, base_lr=0.005, warmup_epochs=1, batch_size=64, seed=0, hflip=False)
    history = fit(g, train, cfg, test, log_stream=None)
    elapsed = time.perf_counter() - start
    best = max(m.eval_top1 for m in history)
    note(f"digits: best test top-1 {best:.4f}, final {history[-1].eval_top1:.4f} after {len(history)} epochs, {elapsed / 60:.1f} min")
    assert best >= 0.97 and len(history) <= 10
    assert elapsed < 30 * 60


# -- 8 -------------------------------------------------------------------------

def _replay_counts(snapshots):
    """Oracle: count sign changes between consecutive latent snapshots."""
    def signs(w):
        s = np.sign(w)
        s[s == 0] = 1
        return s

    counts = np.zeros(snapshots[0].shape, np.int64)
    for before, after in zip(snapshots, snapshots[1:]):
        counts += signs(before) != signs(after)
    return counts


@pytest.mark.criterion(8, "Instrumentation")
def test_flip_counts_match_replay_oracle(tmp_path, note):
    ds = separable_images(96, (3, 16, 16), seed=5)
    cfg = TrainConfig(epochs=3, base_lr=0.02, warmup_epochs=0, batch_size=16, seed=0, hflip=False)

    def run():
        g = build_model(TINY.replace(growth=8), seed=0)
        names = g.binary_weight_names()
        state = init_train_state(g, ds, cfg)
        snaps = {n: [g.parameters[n].copy()] for n in names}
        epoch_counts, history = [], []

        def on_step(st, latents):
            for n in names:
                snaps[n].append(latents[n].copy())

        for _ in range(cfg.epochs):
            start = len(snaps[names[0]]) - 1
            history.append(train_epoch(g, ds, cfg, state, on_step=on_step))
            epoch_counts.append({n: _replay_counts(snaps[n][start:]) for n in names})
        return history, epoch_counts, state

    history, oracle, state = run()
    history2, _, _ = run()
    total = 0
    for m, m2, counts in zip(history, history2, oracle):
        assert m.flips == m2.flips  # deterministic
        for name, c in counts.items():
            row = m.flips[name]
            assert row["total_flips"] == int(c.sum())
            assert row["max"] == int(c.max())
            assert row["frac_stable"] == float(np.mean(c == 0))
            for q in FLIP_PERCENTILES:
                assert row[f"p{q}"] == float(np.percentile(c, q))
            total += int(c.sum())
    assert total > 0
    # cumulative counter equals the sum of per-epoch oracle counts
    for name in oracle[0]:
        np.testing.assert_array_equal(state.flips.totals[name], sum(e[name] for e in oracle))

    rows = flip_csv_rows(history, "adam")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(FLIP_CSV_COLUMNS), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    parsed = list(csv.reader(io.StringIO(buf.getvalue())))
    assert parsed[0] == ["epoch", "optimizer", "layer", "n_weights", "frac_stable",
                         "p50", "p75", "p90", "p95", "p99", "max", "total_flips"]
    for r in parsed[1:]:
        int(r[0]), int(r[3]), float(r[4]), int(r[10]), int(r[11])
        assert r[1] == "adam" and all(float(v) >= 0 for v in r[5:10])
    note(f"{total} flips over 3 epochs replayed exactly")


# -- 9 -------------------------------------------------------------------------

def _random_config(rng, i):
    while True:
        try:
            cfg = ArchConfig(
                f"rand{i}",
                tuple(int(b) for b in rng.integers(0, 3, 4)),
                ((1, 2), (1, 2), (1, 2)),
                growth=int(rng.choice([8, 16, 32])),
                downsample_groups=int(rng.choice([1, 2, 4])),
                stem=str(rng.choice(["grouped-stem", "conv7x7"])),
                num_classes=int(rng.integers(2, 12)),
                input_shape=(3, 32, 32),
                block_style=str(rng.choice(["melius", "naive-residual", "dense-only"])),
            )
            return build_model(cfg, seed=i)
        except ConfigError:
            continue


@pytest.mark.criterion(9, "Serialization")
def test_fifty_random_models_roundtrip(tmp_path, note):
    rng = np.random.default_rng(99)
    for i in range(50):
        g = _random_config(rng, i)
        for k, v in g.parameters.items():
            if k.endswith(("gamma", "beta", "running_mean")):
                v[...] = rng.normal(size=v.shape)
            elif k.endswith("running_var"):
                v[...] = rng.uniform(0.1, 4.0, v.shape)
        path = tmp_path / f"m{i}.mnbw"
        export_weights(g, path)
        got = import_weights(path)
        want = inference_parameters(g)
        assert list(got) == list(want)
        for k in want:
            assert got[k].shape == want[k].shape and got[k].tobytes() == want[k].tobytes(), k
    note("50 models bit-identical")


@pytest.mark.criterion(9, "Serialization")
def test_file_size_tracks_cost_model(tmp_path, note):
    worst = 0.0
    for name in ("meliusnet22", "meliusnetA"):
        g = build_model(name)
        n = export_weights(g, tmp_path / f"{name}.mnbw")
        expected = model_cost(g).size_bytes
        worst = max(worst, abs(n - expected) / expected)
        if name == "meliusnet22":
            note(f"meliusnet22 file {n:,} B vs {expected:,} B")
    assert worst < 0.02
