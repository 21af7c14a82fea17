from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smp_kit.clarke import (
    ConvexBox,
    IntervalSet,
    PiecewiseSmoothFn,
    generalized_gradient,
    gradient_from_one_sided,
    normal_cone,
    stationarity_test,
)
from smp_kit.errors import ConfigurationError, DomainError, MembershipError

finite = st.floats(-1e6, 1e6, allow_nan=False)


@pytest.fixture
def abs_fn() -> PiecewiseSmoothFn:
    return PiecewiseSmoothFn([0.0], [(lambda u: -u, lambda u: -1.0), (lambda u: u, lambda u: 1.0)])


class TestIntervalSet:
    def test_rejects_inverted(self):
        with pytest.raises(DomainError):
            IntervalSet(1.0, 0.0)

    def test_add_and_distance(self):
        s = IntervalSet([1.0, -3.0], [2.0, -1.0]) + IntervalSet.point([0.5, 0.0])
        np.testing.assert_allclose(s.lower, [1.5, -3.0])
        np.testing.assert_allclose(s.distance_from_zero(), [1.5, 1.0])

    @given(finite, finite, finite)
    def test_distance_zero_iff_contains_zero(self, a, b, c):
        lo, hi = min(a, b), max(a, b)
        s = IntervalSet(lo, hi) + IntervalSet.point(c)
        assert (s.distance_from_zero() == 0) == bool(s.contains(0.0))


class TestGeneralizedGradient:
    def test_abs_at_kink(self, abs_fn):
        g = generalized_gradient(abs_fn, 0.0)
        assert (float(g.lower), float(g.upper)) == (-1.0, 1.0)

    def test_smooth_point_is_singleton(self, abs_fn):
        assert bool(generalized_gradient(abs_fn, 0.3).is_singleton())

    def test_separable_sum(self, abs_fn):
        sq = PiecewiseSmoothFn.smooth(lambda u: u * u, lambda u: 2 * u)
        g = generalized_gradient([abs_fn, sq], [0.0, 1.5])
        assert g.to_list() == [[-1.0, 1.0], [3.0, 3.0]]

    def test_discontinuous_pieces_rejected(self):
        with pytest.raises(ConfigurationError, match="disagree"):
            PiecewiseSmoothFn([0.0], [(lambda u: 0.0, lambda u: 0.0), (lambda u: 1.0, lambda u: 0.0)])

    def test_domain(self):
        f = PiecewiseSmoothFn.smooth(lambda u: u, lambda u: 1.0, domain=(0.0, 1.0))
        with pytest.raises(DomainError):
            f(2.0)

    @given(finite, finite)
    def test_hull_contains_both_slopes(self, a, b):
        g = gradient_from_one_sided(a, b)
        assert bool(g.contains(a)) and bool(g.contains(b))


class TestConvexBox:
    def test_normal_cone_faces(self):
        U = ConvexBox([0.0, -1.0], [1.0, 1.0])
        cone = normal_cone(U, [0.0, 1.0])
        np.testing.assert_array_equal(cone.lower, [-np.inf, 0.0])
        np.testing.assert_array_equal(cone.upper, [0.0, np.inf])

    def test_interior_cone_is_zero(self):
        cone = ConvexBox([0.0], [1.0]).normal_cone([0.5])
        assert cone.to_list() == [[0.0, 0.0]]

    def test_outside_point(self):
        with pytest.raises(MembershipError):
            ConvexBox([0.0], [1.0]).normal_cone([1.5])

    def test_degenerate_box(self):
        cone = ConvexBox([1.0], [1.0]).normal_cone([1.0])
        assert cone.to_list() == [[-np.inf, np.inf]]

    def test_bad_bounds(self):
        with pytest.raises(ConfigurationError):
            ConvexBox([1.0], [0.0])

    @settings(max_examples=200)
    @given(st.floats(-5, 5), st.floats(0, 5), st.floats(-10, 10), finite)
    def test_normal_tangent_polarity(self, lo, width, u, xi):
        U = ConvexBox([lo], [lo + width])
        p = U.project([u])
        N, T = U.normal_cone(p), U.tangent_cone(p)
        # any normal direction has nonpositive product with any tangent direction
        for v in (T.lower, T.upper):
            if np.all(np.isfinite(v)):
                n = np.clip([xi], N.lower, N.upper)
                assert float(n @ v) <= 0.0


class TestStationarity:
    def test_interior_violation(self):
        passed, viol = stationarity_test(IntervalSet.point([0.5]), IntervalSet.point([0.0]))
        assert not passed and viol == pytest.approx(0.5)

    def test_boundary_absorbs_gradient(self):
        U = ConvexBox([0.0], [1.0])
        # 0 in -1 + [0, inf) at the upper face
        passed, viol = stationarity_test(IntervalSet.point([-1.0]), U.normal_cone([1.0]))
        assert passed and viol == 0.0

    def test_per_path_tolerance(self):
        grad = IntervalSet(np.array([[1e-6], [1e-6]]), np.array([[1e-6], [1e-6]]))
        cone = IntervalSet.point(np.zeros((2, 1)))
        passed, _ = stationarity_test(grad, cone, tol=np.array([1e-9, 1e-5]))
        np.testing.assert_array_equal(passed, [False, True])

    @given(finite, finite)
    def test_kink_gradient_passes_iff_zero_inside(self, a, b):
        g = gradient_from_one_sided(a, b)
        passed, viol = stationarity_test(g, IntervalSet.point(0.0), tol=0.0)
        assert passed == (min(a, b) <= 0 <= max(a, b))
        assert viol >= 0
