from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smp_kit.clarke import ConvexBox
from smp_kit.errors import ConfigurationError
from smp_kit.problems import AffineQuadraticProblem, abs_slope


@pytest.fixture
def problem() -> AffineQuadraticProblem:
    """Two-dimensional state, two regimes, nonsmooth in u."""
    return AffineQuadraticProblem.create(
        2, 2, 1, 1.0, [1.0, -0.5], 1, [[-2.0, 2.0], [0.5, -0.5]], ConvexBox([-1.0], [2.0]),
        name="toy",
        b0=[0.1, 0.0],
        bx=[[[0.2, 0.1], [0.0, -0.3]], [[-0.1, 0.0], [0.4, 0.2]]],
        bu=[[1.0], [0.5]],
        babs=[[0.3], [0.0]],
        s0=[[0.2, 0.0], [0.0, 0.1]],
        sx=np.full((2, 2, 2), 0.05),
        su=[[[0.1], [0.0]], [[0.0], [0.2]]],
        sabs=[[[0.0], [0.1]], [[0.0], [0.0]]],
        c0=0.5, cx=[0.1, -0.2], cu=[0.3], cxx=[[1.0, 0.2], [0.2, 0.5]], cxu=[[0.1], [0.0]],
        cuu=[[-0.4]], cabs=[0.2], h0=1.0, hx=[0.0, 1.0], hxx=[[0.5, 0.0], [0.0, 1.0]],
    )


def _numeric(spec):
    return dataclasses.replace(
        spec, drift_x=None, diffusion_x=None, running_cost_x=None, terminal_cost_x=None,
        drift_u=None, diffusion_u=None, running_cost_u=None,
    )


class TestCoefficients:
    def test_evaluation_by_hand(self):
        p = AffineQuadraticProblem.create(
            1, 1, 1, 1.0, [0.0], 0, [[0.0]], ConvexBox([-1.0], [1.0]),
            b0=[1.0], bx=[[2.0]], bu=[[3.0]], babs=[[4.0]], cxx=[[1.0]], cuu=[[2.0]], cabs=[1.0], hxx=[[0.5]],
        )
        spec = p.to_spec()
        x, u, i = np.array([[2.0]]), np.array([[-0.5]]), np.array([0])
        np.testing.assert_allclose(spec.drift(0.0, x, u, i), [[1 + 4 - 1.5 + 2.0]])
        np.testing.assert_allclose(spec.running_cost(0.0, x, u, i), [4 + 0.5 + 0.5])
        np.testing.assert_allclose(spec.terminal_cost(x, i), [2.0])

    def test_analytic_gradients_match_differences(self, problem):
        spec = problem.to_spec()
        num = _numeric(spec)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(20, 2))
        u = rng.uniform(-1, 2, size=(20, 1))
        i = rng.integers(0, 2, size=20)
        for name in ("b_x", "sigma_x", "f_x"):
            np.testing.assert_allclose(getattr(spec, name)(0.3, x, u, i), getattr(num, name)(0.3, x, u, i), atol=1e-6)
        np.testing.assert_allclose(spec.h_x(x, i), num.h_x(x, i), atol=1e-6)
        for side in (-1, 1):
            for name in ("b_u", "sigma_u", "f_u"):
                np.testing.assert_allclose(
                    getattr(spec, name)(0.3, x, u, i, side), getattr(num, name)(0.3, x, u, i, side), atol=1e-5
                )

    def test_one_sided_at_kink(self, problem):
        spec = problem.to_spec()
        x, u, i = np.zeros((1, 2)), np.zeros((1, 1)), np.array([0])
        right = spec.f_u(0.0, x, u, i, 1)
        left = spec.f_u(0.0, x, u, i, -1)
        # cu + cxu.x +/- cabs
        np.testing.assert_allclose(right - left, [[0.4]])
        assert spec.u_breakpoints == ((0.0,),)

    def test_abs_slope(self):
        np.testing.assert_array_equal(abs_slope(np.array([-1.0, 0.0, 2.0]), 1), [-1, 1, 1])
        np.testing.assert_array_equal(abs_slope(np.array([-1.0, 0.0, 2.0]), -1), [-1, -1, 1])

    def test_unknown_coefficient(self):
        with pytest.raises(ConfigurationError, match="unknown coefficient"):
            AffineQuadraticProblem.create(1, 1, 1, 1.0, [0.0], 0, [[0.0]], ConvexBox([0.0], [1.0]), zz=1.0)

    def test_bad_shape(self):
        with pytest.raises(ConfigurationError):
            AffineQuadraticProblem.create(1, 1, 1, 1.0, [0.0], 0, [[0.0]], ConvexBox([0.0], [1.0]), bx=[1.0, 2.0, 3.0])


class TestSerialization:
    def test_round_trip(self, problem):
        data = json.loads(json.dumps(problem.to_dict()))
        back = AffineQuadraticProblem.from_dict(data)
        assert back.to_dict() == problem.to_dict()
        for key, arr in problem.coefficients.items():
            np.testing.assert_array_equal(back.coefficients[key], arr)

    def test_unbounded_constraint_is_null(self):
        p = AffineQuadraticProblem.create(1, 1, 1, 1.0, [0.0], 0, [[0.0]], ConvexBox.unbounded(1))
        assert p.to_dict()["constraint"] == {"lower": [None], "upper": [None]}

    @pytest.mark.parametrize(
        "mutate, match",
        [
            (lambda d: d.update(extra=1), "unknown problem key"),
            (lambda d: d["drift"].update(quadratic=1.0), "drift.quadratic"),
            (lambda d: d.pop("horizon"), "horizon"),
            (lambda d: d.update(dimensions={"n": 2}), "dimensions"),
            (lambda d: d.update(generator=[[1.0, -1.0], [0.0, 0.0]]), "generator|negative"),
        ],
    )
    def test_strict_schema(self, problem, mutate, match):
        data = problem.to_dict()
        mutate(data)
        with pytest.raises(ConfigurationError, match=match):
            AffineQuadraticProblem.from_dict(data)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.floats(0.1, 3.0))
    def test_round_trip_property(self, drift, horizon):
        p = AffineQuadraticProblem.create(
            1, 1, 1, horizon, [0.0], 0, [[-1.0, 1.0], [1.0, -1.0]], ConvexBox([0.0], [1.0]),
            b0=np.array(drift)[:, None], su=[[[1.0]]],
        )
        assert AffineQuadraticProblem.from_dict(p.to_dict()).to_dict() == p.to_dict()


def test_lipschitz_bound(problem):
    spec = problem.to_spec()
    assert spec.lipschitz_constant >= problem.lipschitz_bound() > 0
