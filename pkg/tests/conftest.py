from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
DIGITS = ROOT / "tests" / "data" / "digits"
CONFIGS = ROOT / "configs"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pm1(rng, shape, dtype=np.float32):
    return rng.choice(np.array([-1.0, 1.0], dtype), size=shape)


def naive_conv(x, w, stride, padding, groups):
    """Direct seven-loop grouped cross-correlation in float64."""
    n, c, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    og = cout // groups
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for o in range(cout):
            gi = o // og
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cg):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[b, gi * cg + ci, i * sh + ky, j * sw + kx] * w[o, ci, ky, kx]
                    out[b, o, i, j] = acc
    return out


def numeric_grad(f, arr, idx, h=1e-6):
    keep = arr[idx]
    arr[idx] = keep + h
    up = f()
    arr[idx] = keep - h
    down = f()
    arr[idx] = keep
    return (up - down) / (2 * h)


# -- acceptance report ---------------------------------------------------------
# Tests tagged @pytest.mark.criterion(n, "title") roll up into one PASS/FAIL
# line per criterion, printed in the terminal summary. The ``note`` fixture
# attaches a short measured value to the line.

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


def _entry(item):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return None
    n, title = mark.args
    return _CRITERIA.setdefault(n, {"title": title, "ok": True, "notes": [], "ran": 0})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _entry(item)
    if entry is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry["ran"] += 1
        if not rep.passed:
            entry["ok"] = False
            entry["notes"].append(f"{item.name} failed")


@pytest.fixture
def note(request):
    entry = _entry(request.node)

    def add(text):
        if entry is not None:
            entry["notes"].append(text)

    return add


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        detail = "; ".join(e["notes"])
        terminalreporter.write_line(f"{status} criterion {n}: {e['title']}" + (f" ({detail})" if detail else ""))
