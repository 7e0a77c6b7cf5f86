import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nestkq.kernels import (Composition, Family, KernelSpec, cross, eval_kernel, gram, median_heuristic,
                            standardize)

FAMILIES = list(Family)
coords = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_eval_kernel_examples():
    assert eval_kernel(KernelSpec("matern12", 1.0), 0.0, 0.0) == 1.0
    expected = (1 + math.sqrt(3)) * math.exp(-math.sqrt(3))
    assert eval_kernel(KernelSpec("matern32", 1.0), 0.0, 1.0) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(0.48335, abs=1e-5)
    assert eval_kernel(KernelSpec("gaussian", 1.0, amplitude=2.0), 0.0, 0.0) == 2.0


def test_eval_kernel_formulas():
    x, y = np.array([0.1, -0.4]), np.array([0.7, 0.2])
    r = np.linalg.norm(x - y)
    g = 0.8
    assert eval_kernel(KernelSpec("matern12", g, 1.5), x, y) == pytest.approx(1.5 * math.exp(-r / g))
    a = math.sqrt(3) * r / g
    assert eval_kernel(KernelSpec("matern32", g), x, y) == pytest.approx((1 + a) * math.exp(-a))
    assert eval_kernel(KernelSpec("gaussian", g), x, y) == pytest.approx(math.exp(-r * r / (2 * g * g)))
    tens = KernelSpec("matern12", g, composition="tensor")
    assert eval_kernel(tens, x, y) == pytest.approx(math.exp(-np.abs(x - y).sum() / g))


def test_eval_kernel_errors():
    k = KernelSpec("matern12", 1.0)
    with pytest.raises(ValueError):
        eval_kernel(k, [0.0, 1.0], [0.0])
    with pytest.raises(ValueError):
        eval_kernel(k, [np.nan], [0.0])
    with pytest.raises(ValueError):
        eval_kernel(KernelSpec("matern12"), 0.0, 1.0)  # lengthscale not set


@pytest.mark.parametrize("bad", [0.0, -1.0, np.inf])
def test_invalid_hyperparameters(bad):
    with pytest.raises(ValueError):
        KernelSpec("gaussian", bad)
    with pytest.raises(ValueError):
        KernelSpec("gaussian", 1.0, amplitude=bad)


def test_per_dimension_lengthscales():
    k = KernelSpec("gaussian", (1.0, 2.0))
    assert eval_kernel(k, [0, 0], [1, 2]) == pytest.approx(math.exp(-0.5 * (1 + 1)))
    with pytest.raises(ValueError):
        gram(k, np.zeros((3, 3)))


def test_gram_examples():
    K = gram(KernelSpec("matern12", 1.0), np.array([[0.0], [1.0]]))
    np.testing.assert_allclose(K, [[1, math.exp(-1)], [math.exp(-1), 1]], rtol=1e-15)
    for fam in FAMILIES:
        assert gram(KernelSpec(fam, 0.3, 1.7), [[0.2]]).tolist() == [[1.7]]
    with pytest.raises(ValueError):
        gram(KernelSpec("matern12", 1.0), np.zeros((0, 1)))


def test_gram_gaussian_psd():
    rng = np.random.default_rng(0)
    K = gram(KernelSpec("gaussian", 0.5), rng.random((50, 2)))
    assert np.linalg.eigvalsh(K).min() >= -1e-8


@pytest.mark.parametrize("fam", FAMILIES)
@pytest.mark.parametrize("comp", list(Composition))
def test_gram_matches_cross_and_is_psd(fam, comp):
    rng = np.random.default_rng(1)
    pts = rng.random((100, 3))
    k = KernelSpec(fam, 0.4, 2.0, comp)
    K = gram(k, pts)
    np.testing.assert_allclose(K, cross(k, pts, pts), rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(K, K.T)
    np.testing.assert_array_equal(np.diag(K), 2.0)
    assert np.linalg.eigvalsh(K).min() >= -1e-8 * 2.0


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(FAMILIES), st.sampled_from(list(Composition)),
       arrays(float, 3, elements=coords), arrays(float, 3, elements=coords),
       st.floats(0.05, 10), st.floats(0.1, 10))
def test_symmetry_and_bound(fam, comp, x, y, ls, amp):
    k = KernelSpec(fam, ls, amp, comp)
    kxy = eval_kernel(k, x, y)
    assert kxy == eval_kernel(k, y, x)
    assert 0.0 <= kxy <= amp * (1 + 1e-15)
    assert eval_kernel(k, x, x) == pytest.approx(amp, rel=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(FAMILIES), arrays(float, (5, 1), elements=coords), st.floats(0.1, 5))
def test_tensor_equals_isotropic_in_1d(fam, pts, ls):
    a = gram(KernelSpec(fam, ls, composition="isotropic"), pts)
    b = gram(KernelSpec(fam, ls, composition="tensor"), pts)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(arrays(float, (6, 3), elements=coords), st.floats(0.1, 5))
def test_tensor_equals_isotropic_for_gaussian(pts, ls):
    a = gram(KernelSpec("gaussian", ls, composition="isotropic"), pts)
    b = gram(KernelSpec("gaussian", ls, composition="tensor"), pts)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-300)


def test_median_heuristic_examples():
    assert median_heuristic([0.0, 1.0, 3.0]) == 2.0
    assert median_heuristic([0.0, 1.0]) == 1.0
    pts = np.random.default_rng(2).random(1000)
    # median of |U - U'| solves 1 - (1 - m)^2 = 1/2
    assert median_heuristic(pts) == pytest.approx(1 - math.sqrt(0.5), abs=0.02)


def test_median_heuristic_errors():
    with pytest.raises(ValueError):
        median_heuristic([[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]])
    with pytest.raises(ValueError):
        median_heuristic([0.5])


@settings(max_examples=50, deadline=None)
@given(arrays(float, (7, 2), elements=coords, unique=True), st.floats(0.1, 10), st.randoms(use_true_random=False))
def test_median_heuristic_permutation_and_scaling(pts, c, rnd):
    if np.ptp(pts) == 0:
        return
    base = median_heuristic(pts)
    perm = list(range(len(pts)))
    rnd.shuffle(perm)
    assert median_heuristic(pts[perm]) == pytest.approx(base, rel=1e-12)
    assert median_heuristic(c * pts) == pytest.approx(c * base, rel=1e-12)


def test_standardize_examples():
    s = standardize([1.0, 3.0])
    np.testing.assert_array_equal(s.values, [-1.0, 1.0])
    assert (s.mean, s.std, s.degenerate) == (2.0, 1.0, False)
    s = standardize([5.0, 5.0, 5.0])
    assert s.degenerate
    np.testing.assert_array_equal(s.values, [5.0, 5.0, 5.0])
    assert s.std == 1.0
    s = standardize([0.0, 1.0, 2.0, 3.0])
    assert s.mean == 1.5
    assert s.std == pytest.approx(math.sqrt(5 / 4), rel=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(float, st.integers(2, 30), elements=st.floats(-1e3, 1e3)))
def test_standardize_moments_and_inverse(v):
    s = standardize(v)
    back = s.mean + s.std * s.values
    np.testing.assert_allclose(back, v, rtol=1e-9, atol=1e-9)
    if not s.degenerate:
        assert abs(s.values.mean()) < 1e-9
        assert s.values.std() == pytest.approx(1.0, rel=1e-9)
