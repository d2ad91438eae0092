import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from bgklab.torus_kernel import (
    InvalidInputError,
    NoScaleError,
    bump_profile,
    compute_partition_scale,
    kernel_build,
    kernel_from_json,
    kernel_sample,
    minimal_image,
    partition_predicate,
    torus_distance,
    torus_norm,
    torus_wrap,
)

coords = st.floats(min_value=-50, max_value=50, allow_nan=False)


def brute_wrap(x):
    # the representative in [-1/2, 1/2) among x + k, k in -60..60
    cand = x + np.arange(-60, 61)
    return cand[(cand >= -0.5) & (cand < 0.5)][0]


class TestWrap:
    def test_scalar_cases(self):
        assert torus_wrap([0.75])[0] == pytest.approx(-0.25)
        assert np.array_equal(torus_wrap([0.0, 0.0]), [0.0, 0.0])
        np.testing.assert_allclose(torus_wrap([1.3, -2.6]), [0.3, 0.4], atol=1e-12)

    def test_half_maps_to_minus_half(self):
        assert torus_wrap([0.5])[0] == -0.5
        assert torus_wrap([-0.5])[0] == -0.5

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            torus_wrap([np.nan, 0.0])
        with pytest.raises(InvalidInputError):
            torus_wrap([np.inf])

    @given(st.lists(coords, min_size=1, max_size=3))
    def test_matches_integer_shift_search(self, xs):
        out = torus_wrap(xs)
        assert np.all(out >= -0.5) and np.all(out < 0.5)
        for x, y in zip(xs, out):
            assert y == pytest.approx(brute_wrap(x), abs=1e-9)

    @given(st.lists(coords, min_size=2, max_size=2))
    def test_idempotent(self, xs):
        once = torus_wrap(xs)
        np.testing.assert_array_equal(torus_wrap(once), once)


class TestDistance:
    def test_wraparound(self):
        assert torus_distance([0.4], [-0.4]) == pytest.approx(0.2)

    def test_identity(self):
        assert torus_distance([0.1, -0.3], [0.1, -0.3]) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            torus_distance([0.1, 0.2], [0.1])

    @settings(max_examples=200)
    @given(st.integers(1, 3).flatmap(lambda d: st.tuples(
        st.lists(coords, min_size=d, max_size=d), st.lists(coords, min_size=d, max_size=d))))
    def test_matches_shift_enumeration(self, ab):
        a, b = (np.asarray(v) for v in ab)
        a, b = torus_wrap(a), torus_wrap(b)
        d = len(a)
        best = min(np.linalg.norm(a - b + np.array(k)) for k in itertools.product((-1, 0, 1), repeat=d))
        assert torus_distance(a, b) == pytest.approx(best, abs=1e-12)

    def test_minimal_image_and_norm(self):
        np.testing.assert_allclose(minimal_image([0.9, -0.7]), [-0.1, 0.3], atol=1e-12)
        assert torus_norm([0.9, -0.7]) == pytest.approx(math.hypot(0.1, 0.3))


class TestKernel:
    def test_unit_mass_by_independent_quadrature(self):
        k = kernel_build(1.0, 2)
        mass, _ = integrate.dblquad(lambda y, x: float(k(np.array([x, y]))), -0.5, 0.5, -0.5, 0.5, epsabs=1e-12)
        assert mass == pytest.approx(1.0, abs=1e-9)

    def test_radial_mass_d2(self):
        k = kernel_build(1.0, 2)
        mass, _ = integrate.quad(lambda s: 2 * np.pi * s * float(k.radial(s)), 0, 0.5, epsabs=1e-13, limit=200)
        assert abs(mass - 1.0) < 1e-10

    def test_frozen_constants(self):
        k2 = kernel_build(1.0, 2)
        assert k2.phi0 == pytest.approx(3.15430, rel=1e-5)
        assert k2.normalization == pytest.approx(8.5743, rel=1e-4)
        assert k2.grad_bound == pytest.approx(13.83, rel=0.02)
        assert k2.grad_bound >= 13.5  # must bound the true sup
        assert kernel_build(1.0, 3).phi0 == pytest.approx(6.6722, rel=1e-4)

    def test_grad_bound_dominates_finite_differences(self):
        k = kernel_build(1.0, 2)
        s = np.linspace(0, 0.5, 20001)
        slope = np.abs(np.diff(k.radial(s))) / np.diff(s)
        assert slope.max() <= k.grad_bound

    def test_vanishes_on_boundary(self):
        k = kernel_build(1.0, 2)
        assert k(np.array([0.5, 0.0])) == 0.0
        assert k(np.array([0.0, -0.5])) == 0.0
        assert bump_profile(0.5) == 0.0

    def test_scaling(self):
        k1, kh = kernel_build(1.0, 2), kernel_build(0.5, 2)
        assert kh(np.zeros(2)) == pytest.approx(4 * k1(np.zeros(2)), rel=1e-10)
        assert kh.phi0 == pytest.approx(4 * k1.phi0, rel=1e-10)
        x = np.array([0.1, 0.05])
        assert kh(x) == pytest.approx(4 * k1(2 * x), rel=1e-10)

    def test_even(self, rng):
        k = kernel_build(0.7, 3)
        x = rng.uniform(-0.4, 0.4, (100, 3))
        np.testing.assert_allclose(k(x), k(-x), rtol=0, atol=0)

    @pytest.mark.parametrize("eps,dim", [(0.0, 2), (-1.0, 2), (1.5, 2), (1.0, 0), (1.0, 4), (np.nan, 2)])
    def test_invalid(self, eps, dim):
        with pytest.raises(InvalidInputError):
            kernel_build(eps, dim)

    def test_unknown_profile(self):
        with pytest.raises(InvalidInputError):
            kernel_build(1.0, 2, profile="gauss")

    def test_json_round_trip(self):
        k = kernel_build(0.3, 2)
        k2 = kernel_from_json(k.to_json())
        assert k2.epsilon == k.epsilon and k2.dim == k.dim
        assert k2.phi0 == k.phi0
        assert json.loads(k.to_json())["profile"] == "bump"


class TestSampling:
    def test_support_and_mean(self, rng):
        k = kernel_build(0.5, 2)
        xi = k.sample(rng, 100_000)
        assert np.all(np.linalg.norm(xi, axis=1) < 0.25)
        se = xi.std(axis=0) / math.sqrt(len(xi))
        assert np.all(np.abs(xi.mean(axis=0)) < 4 * se)

    def test_radius_ks_against_quadrature_cdf(self, rng):
        k = kernel_build(1.0, 2)
        n = 100_000
        r = np.sort(np.linalg.norm(k.sample(rng, n), axis=1))
        F = k.radial_cdf(r)
        ecdf_hi = np.arange(1, n + 1) / n
        ecdf_lo = np.arange(0, n) / n
        ks = max(np.max(ecdf_hi - F), np.max(F - ecdf_lo))
        assert ks < 1.36 / math.sqrt(n) * 1.5

    def test_radial_cdf_endpoints(self):
        k = kernel_build(1.0, 2)
        assert k.radial_cdf(0.0) == pytest.approx(0.0, abs=1e-14)
        assert k.radial_cdf(0.5) == pytest.approx(1.0, abs=1e-10)

    def test_single_draw_shape(self, rng):
        k = kernel_build(1.0, 3)
        assert kernel_sample(k, rng).shape == (3,)
        assert k.sample(rng).shape == (3,)


class TestPartitionScale:
    def half_max_radius(self, k):
        # independent oracle: bisection on the radial profile
        lo, hi = 0.0, k.support_radius
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if k.radial(mid) > 0.5 * k.phi0:
                lo = mid
            else:
                hi = mid
        return lo

    def test_eps1_grid_scan(self):
        k = kernel_build(1.0, 2)
        s_half = self.half_max_radius(k)
        assert s_half == pytest.approx(0.31992, abs=1e-5)
        expected = next(1.0 / n for n in range(11, 1000) if 5 * math.sqrt(2) / n < s_half)
        r = compute_partition_scale(k)
        assert r == pytest.approx(expected)
        assert r == pytest.approx(1 / 23)

    def test_integrality_and_predicate(self):
        for eps in (1.0, 0.5, 0.25):
            k = kernel_build(eps, 2)
            r = compute_partition_scale(k)
            n = round(1 / r)
            assert abs(1 / r - n) < 1e-9 and n > 10
            assert partition_predicate(k, r)
            assert not partition_predicate(k, 1.0 / (n - 1)) or n == 11

    def test_eps_quarter_frozen(self):
        assert compute_partition_scale(kernel_build(0.25, 2)) == pytest.approx(1 / 89)

    def test_rescaling(self):
        k1 = kernel_build(1.0, 2)
        cap1 = self.half_max_radius(k1) / (5 * math.sqrt(2))
        r01 = compute_partition_scale(kernel_build(0.1, 2))
        assert r01 <= 0.1 * cap1
        # granularity: the next coarser 1/n would violate the rescaled cap
        assert 1 / (round(1 / r01) - 1) > 0.1 * cap1

    def test_no_scale_error(self):
        with pytest.raises(NoScaleError):
            compute_partition_scale(kernel_build(0.01, 2), max_denominator=200)
