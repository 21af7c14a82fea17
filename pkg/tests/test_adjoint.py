from __future__ import annotations

import io

import numpy as np
import pytest
from scipy.linalg import expm

from smp_kit.adjoint import (
    AnsatzSolution,
    BsdeSpec,
    adjoint_bsde_spec,
    duality_expansion,
    feynman_kac_check,
    linear_source,
    martingale_residuals,
    solve_ansatz_odes,
    solve_bsde_backward,
)
from smp_kit.chain import GeneratorMatrix
from smp_kit.clarke import ConvexBox
from smp_kit.dynamics import ControlSpec, simulate_forward
from smp_kit.errors import (
    AdmissibilityError,
    BasisError,
    ConfigurationError,
    ConvergenceError,
    NumericalError,
    ShapeError,
)
from smp_kit.problems import AffineQuadraticProblem


@pytest.fixture
def brownian_bundle():
    """x = W on [0, 1], one regime."""
    spec = AffineQuadraticProblem.create(1, 1, 1, 1.0, [0.0], 0, [[0.0]], ConvexBox([-1.0], [1.0]), s0=1.0).to_spec()
    return simulate_forward(spec, ControlSpec.constant([0.0]), 50, 4000, seed=21)


def identity_bsde(generator=None, lipschitz=None) -> BsdeSpec:
    g = generator or (lambda t, x, u, y, z, i: np.zeros_like(y))
    return BsdeSpec(1, 1, lambda x, i: x.copy(), g, lipschitz=lipschitz, linear=generator is None)


class TestAnsatzOdes:
    def test_scalar_exponential(self):
        Q = GeneratorMatrix([[0.0]])
        curve = solve_ansatz_odes(Q, linear_source([0.8]), [2.0], 1.0, h=1e-2)
        t = np.linspace(0, 1, 37)
        np.testing.assert_allclose(curve(t)[:, 0], 2.0 * np.exp(0.8 * (t - 1)), rtol=1e-9)

    def test_coupled_against_matrix_exponential(self, three_state_q):
        rates = np.array([0.3, -0.2, 0.1])
        terminal = np.array([1.0, -2.0, 0.5])
        curve = solve_ansatz_odes(three_state_q, linear_source(rates), terminal, 1.0)
        A = np.diag(rates) - three_state_q.entries
        for t in (0.0, 0.37, 0.9):
            np.testing.assert_allclose(curve(t), expm(A * (t - 1.0)) @ terminal, atol=1e-10)
        assert curve.residual <= 1e-8

    def test_forcing_term(self):
        # phi' = 1 - Q phi with phi(1) = 0 and symmetric Q: phi = t - 1 in both regimes
        Q = GeneratorMatrix([[-1.0, 1.0], [1.0, -1.0]])
        curve = solve_ansatz_odes(Q, linear_source([0.0, 0.0], [1.0, 1.0]), [0.0, 0.0], 1.0)
        np.testing.assert_allclose(curve.values[:, 0], curve.times - 1.0, atol=1e-13)

    def test_terminal_exact(self, symmetric_q):
        curve = solve_ansatz_odes(symmetric_q, linear_source([1.0, 2.0]), [-1.0, -2.0], 1.0)
        np.testing.assert_array_equal(curve.terminal, [-1.0, -2.0])

    def test_blowup(self):
        Q = GeneratorMatrix([[0.0]])
        with pytest.raises(NumericalError, match="blew up"):
            solve_ansatz_odes(Q, lambda t, y: -(y**2), [10.0], 1.0, h=1e-3)

    def test_residual_gate(self):
        Q = GeneratorMatrix([[0.0]])
        with pytest.raises(NumericalError, match="residual"):
            solve_ansatz_odes(Q, linear_source([8.0]), [1.0], 1.0, h=0.25, residual_tol=1e-6)

    def test_bad_terminal(self, symmetric_q):
        with pytest.raises(ConfigurationError):
            solve_ansatz_odes(symmetric_q, linear_source([0.0, 0.0]), [1.0], 1.0)

    def test_curve_at_regime(self, symmetric_q):
        curve = solve_ansatz_odes(symmetric_q, linear_source([0.0, 0.0], [1.0, 2.0]), [0.0, 0.0], 1.0)
        vals = curve.at(np.array([0.5, 0.5]), np.array([0, 1]))
        np.testing.assert_allclose(vals, curve(0.5))

    def test_write_csv(self, symmetric_q):
        curve = solve_ansatz_odes(symmetric_q, linear_source([0.0, 0.0]), [1.0, 1.0], 1.0, h=0.25)
        buf = io.StringIO()
        AnsatzSolution(curve).write_csv(buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "t,regime,phi,psi" and len(lines) == 1 + 5 * 2


class TestFeynmanKac:
    def test_matches_matrix_exponential(self, symmetric_q):
        rates = np.array([0.3, -0.4])
        exact = 2.0 * expm((np.diag(rates) + symmetric_q.entries) * 0.7) @ np.ones(2)
        for i in (0, 1):
            mean, se = feynman_kac_check(symmetric_q, rates, 0.3, i, 20_000, seed=8)
            assert abs(mean - exact[i]) <= 4 * se

    def test_degenerate_cases(self, symmetric_q):
        assert feynman_kac_check(symmetric_q, [1.0, 1.0], 1.0, 0, 10, seed=0) == (2.0, 0.0)
        Q = GeneratorMatrix([[0.0]])
        mean, se = feynman_kac_check(Q, [0.5], 0.0, 0, 10, seed=0)
        assert mean == pytest.approx(2 * np.exp(0.5)) and se == 0.0


class TestRegression:
    def test_identity_terminal(self, brownian_bundle):
        sol = solve_bsde_backward(identity_bsde(), brownian_bundle)
        np.testing.assert_allclose(sol.p[:, :, 0], brownian_bundle.states[:, :, 0], atol=1e-7)
        np.testing.assert_allclose(sol.q, 1.0, atol=1e-7)

    def test_quadratic_terminal(self, brownian_bundle):
        # Y = x^2 + (T - t), Z = 2x
        spec = BsdeSpec(1, 1, lambda x, i: x**2, lambda t, x, u, y, z, i: np.zeros_like(y), linear=True)
        sol = solve_bsde_backward(spec, brownian_bundle)
        b = brownian_bundle
        exact_y = b.states[:, :, 0] ** 2 + (1.0 - b.grid)[None, :]
        assert np.sqrt(np.mean((sol.p[:, :, 0] - exact_y) ** 2)) < 0.05
        assert np.sqrt(np.mean((sol.q[:, :, 0, 0] - 2 * b.states[:, :-1, 0]) ** 2)) < 0.1

    def test_martingale_residual(self, brownian_bundle):
        spec = identity_bsde()
        sol = solve_bsde_backward(spec, brownian_bundle)
        means, ses = martingale_residuals(spec, sol, brownian_bundle)
        assert np.max(np.abs(means)) < 1e-8

    def test_picard_contracts(self, brownian_bundle):
        gen = lambda t, x, u, y, z, i: 0.2 * np.sin(y) + 0.2 * np.cos(z[:, :, 0])
        spec = identity_bsde(gen, lipschitz=0.4)
        assert spec.check_lipschitz()[0]
        sol = solve_bsde_backward(spec, brownian_bundle, picard_iters=30, tol=1e-12)
        ratios = sol.contraction_ratios
        assert len(ratios) >= 3
        assert max(ratios[:5]) < 0.5

    def test_picard_divergence(self, brownian_bundle):
        spec = identity_bsde(lambda t, x, u, y, z, i: 50.0 * y)
        with pytest.raises(ConvergenceError):
            solve_bsde_backward(spec, brownian_bundle, picard_iters=30)

    def test_dependent_basis(self):
        # two identical state coordinates make x1 x2 = x1^2 on every sample
        spec = AffineQuadraticProblem.create(
            2, 1, 1, 1.0, [0.0, 0.0], 0, [[0.0]], ConvexBox([0.0], [1.0]), s0=[[1.0], [1.0]]
        ).to_spec()
        bundle = simulate_forward(spec, ControlSpec.constant([0.0]), 5, 500, seed=0)
        bsde = BsdeSpec(2, 1, lambda x, i: x.copy(), lambda t, x, u, y, z, i: np.zeros_like(y), linear=True)
        with pytest.raises(BasisError, match="linearly dependent"):
            solve_bsde_backward(bsde, bundle)

    def test_shape_mismatch(self, brownian_bundle):
        spec = BsdeSpec(2, 1, lambda x, i: x, lambda *a: 0.0, linear=True)
        with pytest.raises(ShapeError):
            solve_bsde_backward(spec, brownian_bundle)

    def test_compensated_s_estimate(self, symmetric_q):
        # dx = 0 with terminal xi = 1[alpha(T) = 1]: jumps carry all the variation
        spec = AffineQuadraticProblem.create(
            1, 1, 1, 1.0, [0.0], 0, symmetric_q, ConvexBox([0.0], [1.0]), s0=0.1
        ).to_spec()
        bundle = simulate_forward(spec, ControlSpec.constant([0.0]), 20, 4000, seed=3)
        bsde = BsdeSpec(1, 1, lambda x, i: (i == 1).astype(float)[:, None],
                        lambda t, x, u, y, z, i: np.zeros_like(y), linear=True, Q=symmetric_q)
        sol = solve_bsde_backward(bsde, bundle, estimate_s=True)
        # Y(t, i) = P(alpha(T) = 1 | alpha(t) = i); s_01 = Y(t, 1) - Y(t, 0) = exp(-2 (T - t))
        j = 10
        at0 = bundle.regimes[:, j] == 0
        s01 = sol.s[at0, j, 0, 0, 1].mean()
        assert s01 == pytest.approx(np.exp(-2 * 0.5), abs=0.05)


class TestAdjointAndDuality:
    @pytest.fixture
    def setup(self):
        problem = AffineQuadraticProblem.create(
            1, 1, 1, 1.0, [0.0], 0, [[0.0]], ConvexBox([0.0], [1.0]), su=1.0, cu=-1.0, hxx=0.5
        )
        spec = problem.to_spec()
        control = ControlSpec.constant([1.0])
        bundle = simulate_forward(spec, control, 50, 4000, seed=1)
        return spec, control, bundle

    def test_regression_adjoint_terminal(self, setup):
        spec, _, bundle = setup
        sol = solve_bsde_backward(adjoint_bsde_spec(spec), bundle)
        np.testing.assert_array_equal(sol.p[:, -1], -spec.h_x(bundle.states[:, -1], bundle.regimes[:, -1]))
        np.testing.assert_allclose(sol.q, -1.0, atol=1e-8)

    def test_zero_direction(self, setup):
        spec, control, bundle = setup
        sol = solve_bsde_backward(adjoint_bsde_spec(spec), bundle)
        out = duality_expansion(spec, control, sol, bundle, ControlSpec.constant([0.0]), 0.1)
        assert out.remainder == 0.0

    def test_leaving_u(self, setup):
        spec, control, bundle = setup
        sol = solve_bsde_backward(adjoint_bsde_spec(spec), bundle)
        with pytest.raises(AdmissibilityError):
            duality_expansion(spec, control, sol, bundle, ControlSpec.constant([1.0]), 0.1)

    def test_wrong_bundle(self, setup):
        spec, _, bundle = setup
        sol = solve_bsde_backward(adjoint_bsde_spec(spec), bundle)
        with pytest.raises(ShapeError):
            duality_expansion(spec, ControlSpec.constant([0.5]), sol, bundle, ControlSpec.constant([-1.0]), 0.1)

    def test_quadratic_remainder(self, setup):
        spec, control, bundle = setup
        sol = solve_bsde_backward(adjoint_bsde_spec(spec), bundle)
        out = duality_expansion(spec, control, sol, bundle, ControlSpec.constant([-1.0]), 0.2)
        # remainder = E x_eps(1)^2 / 2 - E x(1)^2 / 2 + eps E[x(1)] ... = eps^2 / 2 in expectation
        assert abs(out.mean - 0.02) <= 3 * out.std_error + 1e-12
