import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcdistill.losses import (
    feature_l1_pyramid,
    inter_depth_distill_loss,
    pairwise_similarity,
    structure_distill_loss,
)
from rcdistill.tensor import ShapeError


def pyramid(rng, base=16, channels=3):
    return [rng.normal(size=(max(1, base >> i), max(1, base >> i), channels)) for i in range(1, 6)]


def inter_set(rng, size=8):
    return [rng.uniform(1, 50, size=(size, size, 1)) for _ in range(3)]


# --- identity laws -----------------------------------------------------------------


@pytest.mark.parametrize("loss", [feature_l1_pyramid, structure_distill_loss])
def test_pyramid_identity(loss):
    p = pyramid(np.random.default_rng(0))
    res = loss(p, [x.copy() for x in p])
    assert res.value == 0.0
    assert all(np.all(g == 0.0) for g in res.grads["student"])


@pytest.mark.parametrize("detach_u", [True, False])
def test_inter_depth_identity(detach_u):
    s = inter_set(np.random.default_rng(1))
    res = inter_depth_distill_loss(s, [x.copy() for x in s], detach_u=detach_u)
    assert res.value == 0.0
    assert all(np.all(g == 0.0) for g in res.grads["student"])


# --- feature L1 ----------------------------------------------------------------------


def test_feature_l1_single_level_fixture():
    rng = np.random.default_rng(2)
    t = pyramid(rng)
    s = [x.copy() for x in t]
    s[0] = np.zeros_like(t[0])
    t[0] = np.ones_like(t[0])
    assert feature_l1_pyramid(s, t).value == 0.5


@pytest.mark.parametrize("level", range(1, 6))
def test_feature_l1_level_weight(level):
    rng = np.random.default_rng(level)
    t = pyramid(rng)
    s = [x.copy() for x in t]
    s[level - 1] = s[level - 1] + 1.0
    assert feature_l1_pyramid(s, t).value == pytest.approx(2.0**-level, rel=1e-15)


def test_feature_l1_gradient_form():
    rng = np.random.default_rng(3)
    s, t = pyramid(rng), pyramid(rng)
    grads = feature_l1_pyramid(s, t).grads["student"]
    for i, (g, a, b) in enumerate(zip(grads, s, t), start=1):
        np.testing.assert_array_equal(g, 2.0**-i * np.sign(a - b) / a.size)


def test_level_order_is_observable():
    t = [np.zeros((2, 2, 1)) for _ in range(5)]
    s = [x.copy() for x in t]
    s[0] = s[0] + 1.0
    swapped = [s[1], s[0]] + s[2:]
    assert feature_l1_pyramid(s, t).value != feature_l1_pyramid(swapped, t).value


@pytest.mark.parametrize("loss", [feature_l1_pyramid, structure_distill_loss])
def test_pyramid_shape_mismatch(loss):
    rng = np.random.default_rng(5)
    s, t = pyramid(rng), pyramid(rng)
    t[2] = t[2][:, :1]
    with pytest.raises(ShapeError, match="level 3"):
        loss(s, t)
    with pytest.raises(ShapeError):
        loss(s[:4], t[:4])


# --- similarity ----------------------------------------------------------------------


def _brute_alpha(f):
    rows = f.reshape(-1, f.shape[-1])
    n = len(rows)
    out = np.zeros((n, n))
    for p in range(n):
        for q in range(n):
            a, b = rows[p], rows[q]
            na, nb = math.sqrt(sum(x * x for x in a)), math.sqrt(sum(x * x for x in b))
            out[p, q] = 0.0 if na == 0 or nb == 0 else sum(x * y for x, y in zip(a, b)) / (na * nb)
    return out


@pytest.mark.parametrize(
    "fp, fq, expected",
    [((1.0, 0.0), (1.0, 0.0), 1.0), ((1.0, 0.0), (1.0, 1.0), 1 / math.sqrt(2)), ((1.0, 0.0), (0.0, 1.0), 0.0)],
)
def test_similarity_fixtures(fp, fq, expected):
    f = np.array([[fp, fq]])
    assert pairwise_similarity(f)[0, 1] == pytest.approx(expected, abs=1e-15)


def test_similarity_properties():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(5, 4, 3))
    f[2, 1] = 0.0
    a = pairwise_similarity(f)
    np.testing.assert_array_equal(a, a.T)
    diag = np.diag(a).copy()
    assert diag[2 * 4 + 1] == 0.0
    np.testing.assert_allclose(np.delete(diag, 2 * 4 + 1), 1.0, atol=1e-15)
    assert np.all(np.abs(a) <= 1 + 1e-15)
    np.testing.assert_allclose(a, _brute_alpha(f), atol=1e-12)
    scale = rng.uniform(0.1, 10.0, size=(5, 4, 1))
    np.testing.assert_allclose(pairwise_similarity(f * scale), a, atol=1e-14)


# --- structure loss --------------------------------------------------------------------


def _brute_structure(student, teacher):
    total = 0.0
    for i, (s, t) in enumerate(zip(student, teacher), start=1):
        a_s, a_t = _brute_alpha(s), _brute_alpha(t)
        n = a_s.shape[0]
        acc = 0.0
        for p in range(n):
            for q in range(n):
                acc += (a_s[p, q] - a_t[p, q]) ** 2
        total += 2.0**-i * acc / n**2
    return total


def test_structure_fixture_1x2():
    # off-diagonal similarities -1 vs 1, diagonals agree: (1 / (1*2)^2) * 2 * (-2)^2 = 2
    for level in range(1, 6):
        t = [np.ones((1, 2, 1)) for _ in range(5)]
        s = [x.copy() for x in t]
        s[level - 1] = np.array([[[1.0], [-1.0]]])
        value = structure_distill_loss(s, t).value
        assert value == pytest.approx(2.0 * 2.0**-level, rel=1e-15)
        assert value == pytest.approx(_brute_structure(s, t), rel=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_structure_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    s = [rng.normal(size=(4, 4, 3)) for _ in range(5)]
    t = [rng.normal(size=(4, 4, 3)) for _ in range(5)]
    assert structure_distill_loss(s, t).value == pytest.approx(_brute_structure(s, t), rel=0, abs=1e-12)


def _materialized_level(s, t):
    """Direct N x N evaluation of one level, built row chunk by row chunk."""
    us = s.reshape(-1, s.shape[-1])
    ut = t.reshape(-1, t.shape[-1])
    us = us / np.linalg.norm(us, axis=1, keepdims=True)
    ut = ut / np.linalg.norm(ut, axis=1, keepdims=True)
    parts, d_unit = [], np.empty_like(us)
    for start in range(0, len(us), 512):
        delta = us[start : start + 512] @ us.T - ut[start : start + 512] @ ut.T
        parts.append(np.sum(delta * delta, axis=1))
        d_unit[start : start + 512] = 4.0 * delta @ us
    return math.fsum(np.concatenate(parts)), d_unit


def test_structure_large_level_matches_materialized():
    # 72 x 72 = 5184 pixels, past the size where an N x N matrix is reasonable to hold
    rng = np.random.default_rng(7)
    s = rng.normal(size=(72, 72, 4))
    t = rng.normal(size=(72, 72, 4))
    small = [np.ones((1, 1, 1))] * 4
    res = structure_distill_loss([s] + small, [t] + small)
    total, _ = _materialized_level(s, t)
    assert res.value == pytest.approx(0.5 * total / (72 * 72) ** 2, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1.0, 1e-3, 1e-6]))
def test_structure_matches_materialized_random_shapes(seed, spread):
    rng = np.random.default_rng(seed)
    h, w, c = (int(v) for v in rng.integers(1, 10, size=3))
    s = [rng.normal(size=(h, w, c)) for _ in range(5)]
    t = [x + spread * rng.normal(size=x.shape) for x in s]
    res = structure_distill_loss(s, t)
    expected = 0.0
    for i, (a, b, g) in enumerate(zip(s, t, res.grads["student"]), start=1):
        total, d_unit = _materialized_level(a, b)
        scale = 2.0**-i / (h * w) ** 2
        expected += scale * total
        # chain through the row normalization
        rows = a.reshape(-1, c)
        norm = np.linalg.norm(rows, axis=1, keepdims=True)
        unit = rows / norm
        ref = scale * (d_unit - np.sum(d_unit * unit, axis=1, keepdims=True) * unit) / norm
        np.testing.assert_allclose(g.reshape(-1, c), ref, rtol=1e-6, atol=1e-9 * np.max(np.abs(ref)))
    # the materialized side loses digits to cancellation as spread shrinks
    assert res.value == pytest.approx(expected, rel={1.0: 1e-12, 1e-3: 1e-8, 1e-6: 1e-4}[spread])


def test_structure_pixel_permutation_invariance():
    rng = np.random.default_rng(8)
    s = [rng.normal(size=(4, 4, 3)) for _ in range(5)]
    t = [rng.normal(size=(4, 4, 3)) for _ in range(5)]
    perm = rng.permutation(16)
    ps = [x.reshape(16, 3)[perm].reshape(4, 4, 3) for x in s]
    pt = [x.reshape(16, 3)[perm].reshape(4, 4, 3) for x in t]
    assert structure_distill_loss(ps, pt).value == pytest.approx(structure_distill_loss(s, t).value, rel=1e-13)


def test_structure_zero_vectors_have_zero_gradient():
    rng = np.random.default_rng(9)
    s = [rng.normal(size=(3, 3, 2)) for _ in range(5)]
    t = [rng.normal(size=(3, 3, 2)) for _ in range(5)]
    s[0][1, 1] = 0.0
    g = structure_distill_loss(s, t).grads["student"][0]
    assert np.all(g[1, 1] == 0.0)


# --- inter-depth -------------------------------------------------------------------------


def test_inter_depth_fixture():
    t = [np.full((1, 1, 1), 5.0) for _ in range(3)]
    s = [x.copy() for x in t]
    s[0] = np.full((1, 1, 1), 3.0)
    t[0] = np.full((1, 1, 1), 1.0)
    value = inter_depth_distill_loss(s, t).value
    assert value == pytest.approx(0.5 * (1 - math.exp(-0.5)) * 2, rel=1e-12)
    assert value == pytest.approx(0.393469, abs=5e-7)


@pytest.mark.parametrize("beta", [0.0, -2.0])
def test_inter_depth_bad_beta(beta):
    s = inter_set(np.random.default_rng(10))
    with pytest.raises(ValueError):
        inter_depth_distill_loss(s, s, beta=beta)


def test_inter_depth_maps_share_resolution():
    rng = np.random.default_rng(11)
    s = inter_set(rng)
    s[1] = s[1][:4, :4]
    with pytest.raises(ShapeError):
        inter_depth_distill_loss(s, s)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    assert feature_l1_pyramid(pyramid(rng, 8), pyramid(rng, 8)).value >= 0
    assert structure_distill_loss(pyramid(rng, 8), pyramid(rng, 8)).value >= 0
    assert inter_depth_distill_loss(inter_set(rng, 4), inter_set(rng, 4)).value >= 0
