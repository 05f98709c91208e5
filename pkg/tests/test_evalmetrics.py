import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import dice_by_counting, wilcoxon_by_enumeration
from slabfill.errors import ShapeMismatch
from slabfill.evalmetrics import (
    dice,
    dice_report,
    intensity_errors,
    oracle_benchmark,
    wilcoxon_signed_rank,
    zero_residual_model,
)
from slabfill.synthgen import GeneratorConfig
from slabfill.unet import NetworkConfig, init_network
from slabfill.volgrid import LabelVolume, VoxelGeometry


def _lab(arr):
    arr = np.asarray(arr, dtype=np.uint8)
    return LabelVolume(VoxelGeometry(arr.shape), arr)


def test_dice_cases():
    a = np.zeros((4, 4, 1))
    a[0, :, 0] = 1
    assert dice(_lab(a), _lab(a), 1) == 1.0
    b = np.zeros((4, 4, 1))
    b[1, :, 0] = 1
    assert dice(_lab(a), _lab(b), 1) == 0.0
    c = np.zeros((4, 4, 1))
    c[0, :2, 0] = 1
    c[1, :2, 0] = 1
    assert dice(_lab(a), _lab(c), 1) == 0.5
    assert dice(_lab(a), _lab(b), 7) == 1.0
    with pytest.raises(ShapeMismatch):
        dice(_lab(a), _lab(np.zeros((4, 4, 2))), 1)


def test_dice_matches_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.integers(0, 4, (16, 16, 16))
        b = rng.integers(0, 4, (16, 16, 16))
        for label in range(5):
            assert dice(_lab(a), _lab(b), label) == dice_by_counting(a, b, label)


@given(arrays(np.uint8, (5, 4, 3), elements=st.integers(0, 3)), arrays(np.uint8, (5, 4, 3), elements=st.integers(0, 3)))
def test_dice_symmetric_and_bounded(a, b):
    for label in range(4):
        d = dice(_lab(a), _lab(b), label)
        assert d == dice(_lab(b), _lab(a), label)
        assert 0.0 <= d <= 1.0


def test_dice_report_flags_absent_labels():
    a = _lab(np.ones((3, 3, 3)))
    report = dice_report(a, a, [1, 5])
    assert report.aggregates["dice"] == {"1": 1.0, "5": 1.0}
    assert any("5" in f for f in report.flags)
    assert "Region" in report.to_table()


def test_intensity_error_cases(rng):
    a = rng.random((4, 5, 6)) * 0.5
    assert intensity_errors(a, a) == {"mae": 0.0, "rmse": 0.0, "psnr": math.inf}
    e = intensity_errors(a, a + 0.1)
    assert e["mae"] == pytest.approx(0.1) and e["rmse"] == pytest.approx(0.1) and e["psnr"] == pytest.approx(20.0)
    b = a.copy()
    b[:2] += 0.2
    assert intensity_errors(a, b)["mae"] == pytest.approx(0.1)


def test_wilcoxon_hand_case():
    r = wilcoxon_signed_rank([1, 2, 3, 4, 5])
    assert r.statistic == 15 and r.p_two_sided == 0.0625 and r.method == "exact"
    r = wilcoxon_signed_rank([3, 4, 5, 6], [2, 2, 2, 2])
    assert r.statistic == 10 and r.p_two_sided == 0.125


def test_wilcoxon_all_zero():
    r = wilcoxon_signed_rank([1.0, 2.0], [1.0, 2.0])
    assert r.p_two_sided == 1.0 and r.degenerate


def test_wilcoxon_matches_enumeration():
    rng = np.random.default_rng(1)
    for trial in range(100):
        n = 1 + trial % 12
        # rounded values produce ties and zeros
        x = np.round(rng.normal(size=n), 1)
        y = np.round(rng.normal(size=n), 1)
        r = wilcoxon_signed_rank(x, y)
        if r.degenerate:
            continue
        w, p = wilcoxon_by_enumeration((x - y).tolist())
        assert r.statistic == pytest.approx(w)
        assert r.p_two_sided == pytest.approx(p, rel=1e-12)


def test_wilcoxon_normal_path_is_close_to_scipy():
    from scipy.stats import wilcoxon

    rng = np.random.default_rng(2)
    x, y = rng.normal(size=40), rng.normal(0.3, 1, size=40)
    r = wilcoxon_signed_rank(x, y)
    assert r.method == "normal"
    ref = wilcoxon(x, y, method="approx", correction=False)
    assert r.p_two_sided == pytest.approx(ref.pvalue, rel=1e-9)


# -- oracle benchmark --------------------------------------------------------------


@pytest.fixture(scope="module")
def zero_model():
    return init_network(NetworkConfig(levels=2, base_channels=2), np.random.default_rng(0))


def test_benchmark_self_comparison(small_phantom, zero_model):
    report = oracle_benchmark(zero_model, [small_phantom], GeneratorConfig(), 6, 3, seed=5)
    for case in report.cases:
        assert case["model"] == case["baseline"]
    assert report.tests["mae"]["p_two_sided"] == 1.0
    assert report.aggregates["model_better_count"] == 0
    table = report.to_table()
    assert "p-value" in table and "MAE" in table
    json.dumps(report.to_dict())


def test_benchmark_thickness_one_is_exact(small_phantom, zero_model):
    model = zero_model.copy()
    model.tensors["head.bias"][0] = 0.3
    report = oracle_benchmark(model, [small_phantom], GeneratorConfig(), 1, 2, seed=5)
    for case in report.cases:
        assert case["model"]["mae"] == 0.0 and case["baseline"]["mae"] == 0.0


def test_benchmark_deterministic(small_phantom, zero_model):
    model = zero_model.copy()
    model.tensors["head.bias"][0] = 0.01
    a = oracle_benchmark(model, [small_phantom], GeneratorConfig(), 4, 2, seed=9)
    b = oracle_benchmark(model, [small_phantom], GeneratorConfig(), 4, 2, seed=9)
    assert a.to_dict() == b.to_dict()
    assert zero_residual_model(model) == zero_model
