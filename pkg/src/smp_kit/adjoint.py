"""Adjoint processes (p, q, s) of the regime-switching control problem.

Two routes are provided:

* the linear ansatz p = phi(t, alpha) x + psi(t, alpha), which turns the
  adjoint BSDE into coupled linear ODEs solved backward with RK4;
* a least-squares Monte Carlo solver for a general BSDE
  Y_j = E[Y_{j+1} | F_j] + g(t_j, x_j, u_j, Y, Z_j) dt, with Picard
  iteration for nonlinear generators.

For the adjoint equation dp = -H_x dt + q dW + s.dQ the generator is
g = H_x, so that p_j = E[p_{j+1} + H_x dt | F_j].
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, TextIO

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import qr

from .chain import GeneratorMatrix, grid_increments, path_rng, run_chunked, simulate_chain, CHAIN_STREAM
from .dynamics import ControlSpec, PathBundle, ProblemSpec, integrate, mean_and_se, path_costs
from .errors import (
    AdmissibilityError,
    BasisError,
    ConfigurationError,
    ConvergenceError,
    DomainError,
    NumericalError,
    ShapeError,
)
from .hamiltonian import hamiltonian, hamiltonian_x

Array = NDArray[np.float64]
BLOWUP = 1e8
RESIDUAL_TOL = 1e-8


# ---------------------------------------------------------------------------
# Ansatz ODEs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnsatzCurve:
    """Per-regime function of t stored on a uniform grid.

    Between nodes the curve is evaluated by cubic Hermite interpolation with
    the stored ODE slopes, which keeps the interpolation error at O(h^4).
    """

    times: Array
    values: Array  # (M+1, d)
    slopes: Array  # (M+1, d)
    residual: float = 0.0

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def terminal(self) -> Array:
        return self.values[-1]

    def __call__(self, t: ArrayLike) -> Array:
        t = np.asarray(t, dtype=np.float64)
        T0, T1 = self.times[0], self.times[-1]
        if np.any(t < T0 - 1e-12) or np.any(t > T1 + 1e-12):
            raise DomainError(f"t outside [{T0}, {T1}]")
        h = self.times[1] - self.times[0]
        flat = np.clip(t.ravel(), T0, T1)
        k = np.clip(np.floor((flat - T0) / h).astype(np.int64), 0, self.times.size - 2)
        s = ((flat - self.times[k]) / h)[:, None]
        y0, y1 = self.values[k], self.values[k + 1]
        m0, m1 = self.slopes[k] * h, self.slopes[k + 1] * h
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        out = h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1
        # nodes are returned exactly
        exact = s[:, 0] == 0.0
        out[exact] = y0[exact]
        end = flat == T1
        out[end] = self.values[-1]
        return out.reshape(t.shape + (self.d,))

    def at(self, t: ArrayLike, regime: ArrayLike) -> Array:
        """Value in the given regime(s); t and regime broadcast together."""
        t, regime = np.broadcast_arrays(np.asarray(t, dtype=np.float64), np.asarray(regime))
        vals = self(t)
        return np.take_along_axis(vals, regime[..., None].astype(np.int64), axis=-1)[..., 0]


def linear_source(rates: ArrayLike, forcing: ArrayLike | None = None) -> Callable[[float, Array], Array]:
    """Source G_i(t, phi) = rates_i * phi_i + forcing_i with constant coefficients."""
    rates = np.asarray(rates, dtype=np.float64)
    forcing = np.zeros_like(rates) if forcing is None else np.asarray(forcing, dtype=np.float64)

    def source(t: float, phi: Array) -> Array:
        return rates * phi + forcing

    return source


def solve_ansatz_odes(
    Q: GeneratorMatrix,
    source: Callable[[float, Array], Array],
    terminal: ArrayLike,
    T: float,
    h: float = 1e-3,
    residual_tol: float = RESIDUAL_TOL,
) -> AnsatzCurve:
    """Integrate phi_t(t, i) + sum_j q_ij (phi(t, j) - phi(t, i)) = G_i(t, phi) backward.

    ``source(t, phi)`` returns G as a length-d array; ``terminal`` gives
    phi(T, i).  Classical RK4 with the largest uniform step not exceeding h.
    The ODE residual is measured at interior nodes with a fourth-order
    central difference and must not exceed ``residual_tol``.
    """
    terminal = np.atleast_1d(np.asarray(terminal, dtype=np.float64))
    if terminal.shape != (Q.d,):
        raise ConfigurationError(f"need {Q.d} terminal values, got {terminal.size}")
    if not h > 0 or not T > 0:
        raise ConfigurationError("step h and horizon T must be positive")
    M = max(int(math.ceil(T / h - 1e-9)), 4)
    times = np.linspace(0.0, T, M + 1)
    step = T / M
    A = Q.entries

    def rhs(t: float, y: Array) -> Array:
        return np.asarray(source(t, y), dtype=np.float64) - A @ y

    values = np.empty((M + 1, Q.d))
    values[M] = terminal
    y = terminal.copy()
    for k in range(M, 0, -1):
        t = times[k]
        k1 = rhs(t, y)
        k2 = rhs(t - step / 2, y - step / 2 * k1)
        k3 = rhs(t - step / 2, y - step / 2 * k2)
        k4 = rhs(t - step, y - step * k3)
        y = y - step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > BLOWUP:
            raise NumericalError(f"ansatz ODE blew up (|phi| > {BLOWUP:g}) near t={times[k - 1]:.6g}")
        values[k - 1] = y
    slopes = np.stack([rhs(t, v) for t, v in zip(times, values)])
    residual = _ode_residual(values, slopes, step)
    if residual > residual_tol:
        raise NumericalError(f"ansatz ODE residual {residual:.3g} exceeds {residual_tol:g}; reduce h")
    return AnsatzCurve(times, values, slopes, residual)


def _ode_residual(values: Array, slopes: Array, step: float) -> float:
    if values.shape[0] < 5:
        return 0.0
    deriv = (values[:-4] - 8 * values[1:-3] + 8 * values[3:-1] - values[4:]) / (12 * step)
    scale = 1.0 + np.abs(slopes[2:-2])
    return float(np.max(np.abs(deriv - slopes[2:-2]) / scale))


@dataclass(frozen=True)
class AnsatzSolution:
    """p = sign * (phi(t, alpha(t)) x + psi(t, alpha(t))) for scalar state.

    ``sign`` reconciles the curves' normalization with the adjoint's
    terminal condition p(T) = -h_x.
    """

    phi: AnsatzCurve
    psi: AnsatzCurve | None = None
    sign: float = 1.0

    @property
    def max_residual(self) -> float:
        return max(self.phi.residual, 0.0 if self.psi is None else self.psi.residual)

    def _psi(self, t, regime):
        return 0.0 if self.psi is None else self.psi.at(t, regime)

    def to_adjoint(self, spec: ProblemSpec, bundle: PathBundle) -> "AdjointSolution":
        if spec.n != 1:
            raise ConfigurationError("the scalar ansatz needs a one-dimensional state")
        P, N = bundle.P, bundle.N
        t = bundle.grid
        x = bundle.states[:, :, 0]
        p = self.sign * (self.phi.at(t[None, :], bundle.regimes) * x + self._psi(t[None, :], bundle.regimes))
        q = np.empty((P, N, 1, spec.m))
        for j in range(N):
            reg = bundle.regimes_left[:, j]
            sig = spec.diffusion(float(t[j]), bundle.states[:, j], bundle.controls[:, j], reg)
            q[:, j] = self.sign * self.phi.at(t[j], reg)[:, None, None] * sig
        phi_nodes = self.phi(t[:-1])  # (N, d)
        psi_nodes = np.zeros_like(phi_nodes) if self.psi is None else self.psi(t[:-1])
        dphi = phi_nodes[:, None, :] - phi_nodes[:, :, None]  # [j, i, k] = phi_k - phi_i
        dpsi = psi_nodes[:, None, :] - psi_nodes[:, :, None]
        s = self.sign * (x[:, :-1, None, None] * dphi[None] + dpsi[None])
        return AdjointSolution(p[:, :, None], q, s[:, :, None], method="ansatz")

    def write_csv(self, out: TextIO) -> None:
        """Columns t, regime, phi, psi."""
        writer = csv.writer(out)
        writer.writerow(["t", "regime", "phi", "psi"])
        psi = np.zeros_like(self.phi.values) if self.psi is None else self.psi.values
        for k, t in enumerate(self.phi.times):
            for i in range(self.phi.d):
                writer.writerow([repr(float(t)), i, repr(float(self.phi.values[k, i])), repr(float(psi[k, i]))])


def feynman_kac_check(
    Q: GeneratorMatrix,
    rates: ArrayLike,
    t: float,
    i: int,
    P: int,
    seed: int,
    T: float = 1.0,
    scale: float = 2.0,
    threads: int = 1,
) -> tuple[float, float]:
    """Monte Carlo value of scale * E[exp(int_t^T c(alpha(s)) ds) | alpha(t) = i].

    ``rates`` holds the per-regime constant integrand c_i.  The time
    integral is exact over each sojourn of the simulated chain.  Returns
    (mean, standard error).
    """
    rates = np.asarray(rates, dtype=np.float64)
    if rates.shape != (Q.d,):
        raise ConfigurationError(f"need {Q.d} per-regime rates")
    if not 0 <= t <= T:
        raise DomainError(f"t={t} outside [0, {T}]")
    horizon = T - t
    if horizon == 0.0:
        return float(scale), 0.0
    if Q.exit_rate(i) == 0.0:
        return float(scale * math.exp(rates[i] * horizon)), 0.0
    integrals = np.empty(P)

    def work(start: int, stop: int) -> None:
        for k in range(start, stop):
            path = simulate_chain(Q, i, horizon, path_rng(seed, k, CHAIN_STREAM))
            integrals[k] = sum(rates[state] * dur for state, dur in path.sojourns())

    run_chunked(P, work, threads)
    return mean_and_se(scale * np.exp(integrals))


# ---------------------------------------------------------------------------
# Regression BSDE solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BsdeSpec:
    """Terminal value xi(x, regime) -> (P, n) and generator g(t, x, u, y, z, regime) -> (P, n).

    The backward step is Y_j = E[Y_{j+1} | F_j] + g dt.  ``lipschitz`` is the
    declared constant C_f in (y, z); ``linear`` marks generators affine in
    (y, z), for which one backward sweep is exact.
    """

    n: int
    m: int
    terminal: Callable[..., Array]
    generator: Callable[..., Array]
    lipschitz: float | None = None
    linear: bool = False
    Q: GeneratorMatrix | None = None

    def check_lipschitz(self, probes: int = 200, seed: int = 0, t: float = 0.0, d: int = 1) -> tuple[bool, float]:
        """Spot-check |g(y,z) - g(y',z')| <= C_f (|y - y'| + |z - z'|)."""
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(probes, self.n))
        u = rng.normal(size=(probes, 1))
        reg = rng.integers(0, d, probes)
        y1, y2 = rng.normal(0, 3, (2, probes, self.n))
        z1, z2 = rng.normal(0, 3, (2, probes, self.n, self.m))
        g1 = self.generator(t, x, u, y1, z1, reg)
        g2 = self.generator(t, x, u, y2, z2, reg)
        gap = np.linalg.norm(y1 - y2, axis=1) + np.linalg.norm((z1 - z2).reshape(probes, -1), axis=1)
        est = float(np.max(np.linalg.norm(g1 - g2, axis=1) / gap))
        ok = self.lipschitz is None or est <= self.lipschitz * (1 + 1e-9)
        return bool(ok), est


def adjoint_bsde_spec(spec: ProblemSpec) -> BsdeSpec:
    """BSDE for (p, q): terminal -h_x, generator H_x (affine in p, q)."""

    def terminal(x, regime):
        return -spec.h_x(x, regime)

    def generator(t, x, u, y, z, regime):
        return hamiltonian_x(spec, t, x, u, regime, y, z)

    return BsdeSpec(spec.n, spec.m, terminal, generator, lipschitz=None, linear=True, Q=spec.generator)


@dataclass(frozen=True)
class AdjointSolution:
    """Grid samples: p (P, N+1, n), q (P, N, n, m), s (P, N, n, d, d) or None."""

    p: Array
    q: Array
    s: Array | None = None
    p_se: Array | None = None
    q_se: Array | None = None
    method: str = "regression"
    picard_increments: tuple[float, ...] = ()

    @property
    def contraction_ratios(self) -> list[float]:
        inc = self.picard_increments
        return [b / a for a, b in zip(inc, inc[1:]) if a > 0]

    def check_shapes(self, bundle: PathBundle) -> None:
        P, N, n = bundle.P, bundle.N, bundle.states.shape[2]
        if self.p.shape[:2] != (P, N + 1) or self.p.shape[2] != n:
            raise ShapeError(f"adjoint p has shape {self.p.shape}; bundle needs ({P}, {N + 1}, {n})")
        if self.q.shape[:3] != (P, N, n):
            raise ShapeError(f"adjoint q has shape {self.q.shape}; bundle needs ({P}, {N}, {n}, m)")

    def write_csv(self, bundle: PathBundle, out: TextIO, max_paths: int | None = None) -> None:
        """Columns path_id, step, t, p_1.., q_1_1..; q is blank at step N."""
        n, m = self.q.shape[2], self.q.shape[3]
        writer = csv.writer(out)
        qnames = [f"q_{a + 1}_{b + 1}" for a in range(n) for b in range(m)]
        writer.writerow(["path_id", "step", "t"] + [f"p_{a + 1}" for a in range(n)] + qnames)
        P = self.p.shape[0] if max_paths is None else min(self.p.shape[0], max_paths)
        for k in range(P):
            for j in range(bundle.N + 1):
                qv = [repr(float(v)) for v in self.q[k, j].ravel()] if j < bundle.N else [""] * (n * m)
                writer.writerow([k, j, repr(float(bundle.grid[j]))] + [repr(float(v)) for v in self.p[k, j]] + qv)


@dataclass(frozen=True)
class PolynomialBasis:
    """Per-regime polynomial basis in x: {1, x_a, x_a x_b (a <= b)} up to ``degree``."""

    degree: int = 2

    def __post_init__(self):
        if self.degree not in (1, 2):
            raise ConfigurationError("basis degree must be 1 or 2")

    def __call__(self, x: Array) -> Array:
        cols = [np.ones((x.shape[0], 1)), x]
        if self.degree == 2:
            n = x.shape[1]
            cols += [x[:, a : a + 1] * x[:, b : b + 1] for a in range(n) for b in range(a, n)]
        return np.hstack(cols)


def _independent_columns(D: Array, group: int) -> Array:
    """Drop basis columns made redundant by a sample with few distinct states.

    When the sample has at least as many distinct states as columns, any
    linear dependence is a property of the basis itself and is reported.
    """
    c = D.shape[1]
    if c == 1:
        return D
    sv = np.linalg.svd(D / np.sqrt(D.shape[0]), compute_uv=False)
    if sv[-1] >= 1e-10 * sv[0]:
        return D
    distinct = np.unique(D, axis=0).shape[0]
    if distinct >= c:
        raise BasisError(
            f"regression basis is linearly dependent in regime {group} "
            f"({distinct} distinct states, {c} basis functions)"
        )
    _, _, piv = qr(D, mode="economic", pivoting=True)
    rank = int(np.sum(sv >= 1e-10 * sv[0]))
    cols = np.sort(piv[:rank])
    if cols[0] != 0:
        cols = np.concatenate(([0], cols[:-1]))
    return D[:, cols]


def _regress(
    design: Array, targets: Array, groups: NDArray, ridge: float, multipliers: Array | None = None
) -> tuple[Array, Array]:
    """Per-group ridge least squares on ``design`` times each multiplier column.

    With multipliers w_1..w_B-1 (and w_0 = 1) the fitted model is
    sum_b w_b * design @ beta_b.  Returns the block functions
    design @ beta_b, shape (B, P, r), and their standard errors.
    """
    P = design.shape[0]
    mult = np.ones((P, 1)) if multipliers is None else np.hstack([np.ones((P, 1)), multipliers])
    B, r = mult.shape[1], targets.shape[1]
    fitted = np.zeros((B, P, r))
    se = np.zeros((B, P, r))
    fallback_se = np.std(targets, axis=0)
    for g in np.unique(groups):
        rows = np.flatnonzero(groups == g)
        D = design[rows]
        mean = D.mean(axis=0)
        keep = D.std(axis=0) > 1e-12 * (1.0 + np.abs(mean))
        keep[0] = True  # intercept
        D = D[:, keep]
        # centering and scaling keep the span but fix the conditioning
        D[:, 1:] = (D[:, 1:] - D[:, 1:].mean(axis=0)) / D[:, 1:].std(axis=0)
        D = _independent_columns(D, int(g))
        c = D.shape[1]
        X = (mult[rows][:, :, None] * D[:, None, :]).reshape(rows.size, B * c)
        norms = np.sqrt(np.mean(X**2, axis=0))
        norms[norms == 0] = 1.0
        Xs = X / norms
        Ainv = np.linalg.inv(Xs.T @ Xs / rows.size + ridge * np.eye(B * c))
        beta = Ainv @ (Xs.T @ targets[rows] / rows.size)
        dof = rows.size - B * c
        sigma2 = np.sum((targets[rows] - Xs @ beta) ** 2, axis=0) / dof if dof > 0 else None
        for b in range(B):
            blk = slice(b * c, (b + 1) * c)
            Ds = D / norms[blk]
            fitted[b, rows] = Ds @ beta[blk]
            if sigma2 is None:
                se[b, rows] = fallback_se
            else:
                lev = np.einsum("pa,ab,pb->p", Ds, Ainv[blk, blk], Ds) / rows.size
                se[b, rows] = np.sqrt(np.outer(lev, sigma2))
    return fitted, se


def solve_bsde_backward(
    spec: BsdeSpec,
    bundle: PathBundle,
    basis: PolynomialBasis | None = None,
    picard_iters: int = 50,
    tol: float = 1e-10,
    estimate_s: bool = False,
    ridge: float = 1e-10,
    beta: float = 0.0,
) -> AdjointSolution:
    """Least-squares Monte Carlo solution of the BSDE on ``bundle``.

    Y_{j+1} is regressed jointly on ``basis(x_j)`` and ``basis(x_j) dW_j``,
    partitioned by alpha(t_j).  The first block is E[Y_{j+1} | F_j]; the
    second is Z_j = E[Y_{j+1} dW_j'] E[dW_j dW_j']^{-1}, which normalizes by
    the sample second moment of dW instead of dt.  For a
    linear generator one explicit sweep is used; otherwise the generator is
    frozen at the previous iterate and the sweep is repeated until the
    weighted grid norm of the increment drops below ``tol``.  The norm
    weights node j by exp(beta (t_j - T)).
    """
    basis = basis or PolynomialBasis()
    P, N, dt = bundle.P, bundle.N, bundle.dt
    n, m = spec.n, spec.m
    if bundle.dW.shape[2] != m or bundle.states.shape[2] != n:
        raise ShapeError("BSDE dimensions do not match the path bundle")
    xi = np.asarray(spec.terminal(bundle.states[:, -1], bundle.regimes[:, -1]), dtype=np.float64).reshape(P, n)
    designs = [basis(bundle.states[:, j]) for j in range(N)]
    weights = np.exp(beta * (bundle.grid[:-1] - bundle.grid[-1]))

    def sweep(frozen: tuple[Array, Array] | None):
        Y = np.empty((P, N + 1, n))
        Z = np.empty((P, N, n, m))
        Yse = np.zeros((P, N + 1, n))
        Zse = np.zeros((P, N, n, m))
        Y[:, N] = xi
        for j in range(N - 1, -1, -1):
            t = float(bundle.grid[j])
            groups = bundle.regimes[:, j]
            nxt = Y[:, j + 1]
            fit, fit_se = _regress(designs[j], nxt, groups, ridge, bundle.dW[:, j] / np.sqrt(dt))
            cond, cond_se = fit[0], fit_se[0]
            # block l holds Z[:, :, l] * sqrt(dt)
            Z[:, j] = np.moveaxis(fit[1:], 0, -1) / np.sqrt(dt)
            Zse[:, j] = np.moveaxis(fit_se[1:], 0, -1) / np.sqrt(dt)
            x, u, reg = bundle.states[:, j], bundle.controls[:, j], bundle.regimes_left[:, j]
            if frozen is None:
                g = spec.generator(t, x, u, cond, Z[:, j], reg)
            else:
                g = spec.generator(t, x, u, frozen[0][:, j], frozen[1][:, j], reg)
            Y[:, j] = cond + np.asarray(g).reshape(P, n) * dt
            Yse[:, j] = cond_se
            if not np.all(np.isfinite(Y[:, j])):
                raise NumericalError(f"non-finite BSDE value at step {j}")
        return Y, Z, Yse, Zse

    increments: list[float] = []
    if spec.linear:
        Y, Z, Yse, Zse = sweep(None)
    else:
        Y = np.zeros((P, N + 1, n))
        Z = np.zeros((P, N, n, m))
        Y[:, N] = xi
        rises = 0
        for _ in range(picard_iters):
            Y_new, Z_new, Yse, Zse = sweep((Y, Z))
            dy = np.sum((Y_new[:, :-1] - Y[:, :-1]) ** 2, axis=2).mean(axis=0)
            dz = np.sum((Z_new - Z) ** 2, axis=(2, 3)).mean(axis=0)
            inc = float(np.sqrt(np.sum(weights * (dy + dz)) * dt))
            if increments and inc > increments[-1]:
                rises += 1
                if rises >= 3:
                    raise ConvergenceError(
                        f"Picard increments grew for 3 consecutive iterations: {increments[-3:] + [inc]}"
                    )
            else:
                rises = 0
            increments.append(inc)
            Y, Z = Y_new, Z_new
            if inc < tol:
                break
    S = _estimate_s(spec, bundle, Y, Z, designs, ridge) if estimate_s else None
    return AdjointSolution(Y, Z, S, Yse, Zse, method="regression", picard_increments=tuple(increments))


def _compensated_increments(Q: GeneratorMatrix, bundle: PathBundle) -> Array:
    counts, occ = grid_increments(bundle.regime_paths, bundle.grid, Q.d)
    off = Q.entries * (1 - np.eye(Q.d))
    return counts - occ[..., :, None] * off  # (P, N, d, d)


def _estimate_s(spec: BsdeSpec, bundle: PathBundle, Y, Z, designs, ridge) -> Array:
    if spec.Q is None:
        raise ConfigurationError("estimating s needs the generator matrix")
    Q = spec.Q
    d = Q.d
    dQ = _compensated_increments(Q, bundle)
    P, N, n = Y.shape[0], bundle.N, spec.n
    S = np.zeros((P, N, n, d, d))
    for j in range(N):
        groups = bundle.regimes[:, j]
        t = float(bundle.grid[j])
        g = spec.generator(t, bundle.states[:, j], bundle.controls[:, j], Y[:, j], Z[:, j], bundle.regimes_left[:, j])
        resid = Y[:, j + 1] - Y[:, j] + np.asarray(g).reshape(P, n) * bundle.dt - np.einsum("pab,pb->pa", Z[:, j], bundle.dW[:, j])
        feats = designs[j]
        for i in np.unique(groups):
            rows = np.flatnonzero(groups == i)
            targets = [k for k in range(d) if k != i and Q.entries[i, k] > 0]
            if not targets:
                continue
            X = np.hstack([feats[rows] * dQ[rows, j, i, k][:, None] for k in targets])
            scale = np.sqrt(np.mean(X**2, axis=0)) + 1e-300
            Xs = X / scale
            A = Xs.T @ Xs / rows.size + ridge * np.eye(Xs.shape[1])
            beta = np.linalg.solve(A, Xs.T @ (resid[rows] - resid[rows].mean(axis=0)) / rows.size)
            beta = beta / scale[:, None]
            c = feats.shape[1]
            for slot, k in enumerate(targets):
                S[rows, j, :, i, k] = feats[rows] @ beta[slot * c : (slot + 1) * c]
    return S


def martingale_residuals(spec: BsdeSpec, solution: AdjointSolution, bundle: PathBundle) -> tuple[Array, Array]:
    """Per-step mean and standard error of
    Y_{j+1} - Y_j + g dt - Z_j dW_j - S_j . dQ_j over paths; shapes (N, n)."""
    P, N, dt = bundle.P, bundle.N, bundle.dt
    Y, Z = solution.p, solution.q
    solution.check_shapes(bundle)
    dQ = None
    if solution.s is not None and spec.Q is not None:
        dQ = _compensated_increments(spec.Q, bundle)
    means = np.empty((N, spec.n))
    ses = np.empty((N, spec.n))
    for j in range(N):
        t = float(bundle.grid[j])
        g = np.asarray(
            spec.generator(t, bundle.states[:, j], bundle.controls[:, j], Y[:, j], Z[:, j], bundle.regimes_left[:, j])
        ).reshape(P, spec.n)
        r = Y[:, j + 1] - Y[:, j] + g * dt - np.einsum("pab,pb->pa", Z[:, j], bundle.dW[:, j])
        if dQ is not None:
            r = r - np.einsum("paik,pik->pa", solution.s[:, j], dQ[:, j])
        means[j] = r.mean(axis=0)
        ses[j] = r.std(axis=0, ddof=1) / np.sqrt(P) if P > 1 else 0.0
    return means, ses


# ---------------------------------------------------------------------------
# Duality expansion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DualityExpansion:
    """Estimate of J(u + eps v) - J(u) - E sum [-H(u + eps v) + H(u)] dt."""

    remainder: float
    mean: float
    std_error: float
    cost_change: float
    hamiltonian_term: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def duality_expansion(
    spec: ProblemSpec,
    control: ControlSpec,
    adjoint: AdjointSolution | AnsatzSolution,
    bundle: PathBundle,
    v: ControlSpec,
    eps: float,
) -> DualityExpansion:
    """Duality remainder with common random numbers.

    The perturbed control u + eps v is evaluated along the base state path
    and replayed on the same noise.  The zero-mean martingale increments
    sum_j (p_j' dsigma_j + dx_j' q_j) dW_j are added as a control variate;
    they remove the O(eps) sampling noise without changing the mean.
    """
    if isinstance(adjoint, AnsatzSolution):
        adjoint = adjoint.to_adjoint(spec, bundle)
    adjoint.check_shapes(bundle)
    v = v.bind(bundle.N, bundle.P)
    control = control.bind(bundle.N, bundle.P)
    P, N, dt = bundle.P, bundle.N, bundle.dt
    for j in (0, N - 1):
        base = control.at(j, float(bundle.grid[j]), bundle.states[:, j], bundle.regimes_left[:, j])
        if not control.project and not np.allclose(base, bundle.controls[:, j], rtol=1e-12, atol=1e-12):
            raise ShapeError("bundle was not simulated with the given control")
    direction = np.empty_like(bundle.controls)
    for j in range(N):
        direction[:, j] = v.at(j, float(bundle.grid[j]), bundle.states[:, j], bundle.regimes_left[:, j])
    perturbed = bundle.controls + eps * direction
    inside = spec.constraint.contains(perturbed)
    if not np.all(inside):
        p_bad, j_bad = np.argwhere(~inside)[0]
        raise AdmissibilityError(
            f"u + eps v = {perturbed[p_bad, j_bad].tolist()} leaves U at path {p_bad}, step {j_bad}"
        )
    if eps == 0 or not np.any(direction):
        return DualityExpansion(0.0, 0.0, 0.0, 0.0, 0.0)
    moved = integrate(spec, ControlSpec.open_loop(perturbed, "perturbed"), bundle.noise)
    cost_change = path_costs(spec, moved) - path_costs(spec, bundle)
    h_term = np.zeros(P)
    variate = np.zeros(P)
    for j in range(N):
        t = float(bundle.grid[j])
        x, reg = bundle.states[:, j], bundle.regimes_left[:, j]
        p, q = adjoint.p[:, j], adjoint.q[:, j]
        h_term += -hamiltonian(spec, t, x, perturbed[:, j], reg, p, q) + hamiltonian(spec, t, x, bundle.controls[:, j], reg, p, q)
        dsig = spec.diffusion(t, moved.states[:, j], perturbed[:, j], reg) - spec.diffusion(t, x, bundle.controls[:, j], reg)
        dx = moved.states[:, j] - x
        g = np.einsum("pa,pab->pb", p, dsig) + np.einsum("pa,pab->pb", dx, q)
        variate += np.einsum("pb,pb->p", g, bundle.dW[:, j])
    h_term *= dt
    mean, se = mean_and_se(cost_change - h_term + variate)
    return DualityExpansion(abs(mean), mean, se, float(cost_change.mean()), float(h_term.mean()))


def duality_residual(
    spec: ProblemSpec,
    control: ControlSpec,
    adjoint: AdjointSolution | AnsatzSolution,
    bundle: PathBundle,
    v: ControlSpec,
    eps: float,
) -> float:
    """|J(u + eps v) - J(u) - E sum (-H(u + eps v) + H(u)) dt|."""
    return duality_expansion(spec, control, adjoint, bundle, v, eps).remainder
