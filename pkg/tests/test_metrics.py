import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcdistill.metrics import METRIC_NAMES, EmptyValidSetError, aggregate, evaluate
from rcdistill.tensor import ShapeError


def brute_force(pred, gt, cap):
    """Per-pixel loop with scalar math; independent of the vectorized code."""
    errs = []
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if 0 < g <= cap:
            errs.append((float(p), float(g)))
    n = len(errs)
    ratio = [max(p / g, g / p) for p, g in errs]
    return {
        "mae": math.fsum(abs(p - g) for p, g in errs) / n,
        "rmse": math.sqrt(math.fsum((p - g) ** 2 for p, g in errs) / n),
        "absrel": math.fsum(abs(p - g) / g for p, g in errs) / n,
        "log10": math.fsum(abs(math.log10(p) - math.log10(g)) for p, g in errs) / n,
        "rmselog": math.sqrt(math.fsum((math.log(p) - math.log(g)) ** 2 for p, g in errs) / n),
        "delta1": sum(r < 1.25 for r in ratio) / n,
        "delta2": sum(r < 1.25**2 for r in ratio) / n,
        "delta3": sum(r < 1.25**3 for r in ratio) / n,
        "n_valid": n,
    }


def random_pair(rng, size=16):
    gt = rng.uniform(0.5, 100.0, size=(size, size, 1))
    gt[rng.random(gt.shape) < 0.3] = 0.0
    pred = gt * np.exp(rng.normal(scale=0.3, size=gt.shape)) + (gt == 0) * rng.uniform(1, 5, size=gt.shape)
    return pred, gt


def _close(report, expected, tol=1e-12):
    for name in METRIC_NAMES:
        assert getattr(report, name) == pytest.approx(expected[name], rel=tol, abs=tol), name
    assert report.n_valid == expected["n_valid"]


@pytest.mark.parametrize("cap", [50.0, 70.0, 80.0])
def test_matches_brute_force(cap):
    rng = np.random.default_rng(int(cap))
    for _ in range(100):
        pred, gt = random_pair(rng)
        _close(evaluate(pred, gt, cap), brute_force(pred, gt, cap))


def test_hand_fixture():
    r = evaluate(np.array([2.0, 4.0]), np.array([1.0, 4.0]), 80.0)
    assert (r.mae, r.absrel, r.delta1) == (0.5, 0.5, 0.5)
    assert r.rmse == math.sqrt(0.5)
    assert r.rmse == pytest.approx(0.707107, abs=5e-7)


def test_identity():
    gt = np.random.default_rng(0).uniform(1, 80, size=(8, 8, 1))
    r = evaluate(gt.copy(), gt)
    assert (r.mae, r.rmse, r.absrel, r.log10, r.rmselog) == (0.0,) * 5
    assert (r.delta1, r.delta2, r.delta3) == (1.0, 1.0, 1.0)


def test_cap_masks_ground_truth_only():
    r = evaluate(np.array([31.0, 99.0]), np.array([30.0, 60.0]), 50.0)
    assert r.n_valid == 1 and r.mae == 1.0


def test_delta_threshold_is_strict():
    r = evaluate(np.array([1.25, 1.0]), np.array([1.0, 1.0]))
    assert r.delta1 == 0.5


def test_empty_valid_set():
    with pytest.raises(EmptyValidSetError):
        evaluate(np.ones(3), np.array([0.0, 90.0, 100.0]), 80.0)


@pytest.mark.parametrize("cap", [0.0, -1.0])
def test_bad_cap(cap):
    with pytest.raises(ValueError):
        evaluate(np.ones(2), np.ones(2), cap)


def test_nonpositive_prediction_in_valid_set():
    with pytest.raises(ValueError, match="non-positive"):
        evaluate(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    # outside the valid set it is ignored
    assert evaluate(np.array([0.0, 1.0]), np.array([0.0, 1.0])).mae == 0.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        evaluate(np.ones((2, 2)), np.ones((2, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_aggregate_equals_concatenation(seed):
    rng = np.random.default_rng(seed)
    frames = [random_pair(rng, size=int(rng.integers(2, 16))) for _ in range(int(rng.integers(2, 5)))]
    pooled = aggregate(evaluate(p, g, 70.0) for p, g in frames)
    pred = np.concatenate([p.ravel() for p, _ in frames])
    gt = np.concatenate([g.ravel() for _, g in frames])
    _close(pooled, brute_force(pred, gt, 70.0))


def test_aggregate_single_report_is_itself():
    r = evaluate(*random_pair(np.random.default_rng(1)))
    assert aggregate([r]) == r


def test_aggregate_skips_empty_reports():
    r = evaluate(*random_pair(np.random.default_rng(2)))
    empty = r.__class__(**{**r.as_dict(), "n_valid": 0, "mae": 123.0})
    assert aggregate([r, empty]) == r


def test_aggregate_rejects_mixed_caps():
    pred, gt = random_pair(np.random.default_rng(3))
    with pytest.raises(ValueError, match="caps"):
        aggregate([evaluate(pred, gt, 50.0), evaluate(pred, gt, 80.0)])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_report_invariants_and_joint_scaling(seed, c):
    rng = np.random.default_rng(seed)
    pred, gt = random_pair(rng, size=6)
    if not np.any((gt > 0) & (gt <= 80)):
        return
    r = evaluate(pred, gt, 80.0)
    assert r.delta1 <= r.delta2 <= r.delta3 <= 1.0
    assert 0.0 <= r.mae <= r.rmse * (1 + 1e-12)
    # scaling the cap with the maps keeps the same valid set
    s = evaluate(c * pred, c * gt, 80.0 * c)
    assert s.n_valid == r.n_valid
    assert (s.delta1, s.delta2, s.delta3) == (r.delta1, r.delta2, r.delta3)
    for name in ("absrel", "log10", "rmselog"):
        assert getattr(s, name) == pytest.approx(getattr(r, name), rel=1e-9, abs=1e-12)
    assert s.mae == pytest.approx(c * r.mae, rel=1e-12)
    assert s.rmse == pytest.approx(c * r.rmse, rel=1e-12)


def test_shrinking_cap_never_adds_pixels():
    pred, gt = random_pair(np.random.default_rng(4))
    counts = [evaluate(pred, gt, cap).n_valid for cap in (80.0, 70.0, 50.0, 10.0)]
    assert counts == sorted(counts, reverse=True)


def test_format_round_trips_floats():
    r = evaluate(*random_pair(np.random.default_rng(5)))
    lines = dict(line.split("=", 1) for line in r.format().splitlines())
    assert float(lines["rmse"]) == r.rmse
    assert list(lines) == list(r.as_dict())
