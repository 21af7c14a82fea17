"""Controlled regime-switching SDE: forward simulation and costs.

All coefficient callables are vectorized over paths.  With ``P`` paths,
``x`` has shape (P, n), ``u`` has shape (P, k) and ``regime`` is an integer
array of shape (P,).  ``t`` is a float.  Expected return shapes:

=====================  ==================
drift                  (P, n)
diffusion              (P, n, m)
running_cost           (P,)
terminal_cost(x, i)    (P,)
drift_x                (P, n, n)     [a, c] = d b_a / d x_c
diffusion_x            (P, n, m, n)  [a, b, c] = d sigma_ab / d x_c
running_cost_x         (P, n)
terminal_cost_x(x, i)  (P, n)
drift_u(.., side)      (P, n, k)     one-sided in u: side = -1 or +1
diffusion_u(.., side)  (P, n, m, k)
running_cost_u(.., s)  (P, k)
=====================  ==================

Missing derivative callables fall back to finite differences.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Any, Callable, TextIO

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .chain import (
    BROWNIAN_STREAM,
    GeneratorMatrix,
    RegimePath,
    path_rng,
    regimes_on_grid,
    run_chunked,
    simulate_chains,
)
from .clarke import ConvexBox
from .errors import AdmissibilityError, BlowUpError, ConfigurationError, DomainError, ShapeError

Array = NDArray[np.float64]
FD_STEP = 1e-6
DEFAULT_BLOWUP = 1e8


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficients, dimensions and constraint of a control problem."""

    n: int
    m: int
    k: int
    T: float
    x0: Array
    i0: int
    generator: GeneratorMatrix
    constraint: ConvexBox
    drift: Callable[..., Array]
    diffusion: Callable[..., Array]
    running_cost: Callable[..., Array]
    terminal_cost: Callable[..., Array]
    drift_x: Callable[..., Array] | None = None
    diffusion_x: Callable[..., Array] | None = None
    running_cost_x: Callable[..., Array] | None = None
    terminal_cost_x: Callable[..., Array] | None = None
    drift_u: Callable[..., Array] | None = None
    diffusion_u: Callable[..., Array] | None = None
    running_cost_u: Callable[..., Array] | None = None
    u_breakpoints: tuple[tuple[float, ...], ...] = ()
    lipschitz_constant: float | None = None
    name: str = ""

    def __post_init__(self):
        if min(self.n, self.m, self.k) < 1:
            raise ConfigurationError("dimensions n, m, k must be positive")
        if not self.T > 0:
            raise ConfigurationError("horizon T must be positive")
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=np.float64))
        if x0.shape != (self.n,):
            raise ConfigurationError(f"x0 must have shape ({self.n},), got {x0.shape}")
        object.__setattr__(self, "x0", x0)
        if not 0 <= self.i0 < self.generator.d:
            raise ConfigurationError(f"i0={self.i0} outside 0..{self.generator.d - 1}")
        if self.constraint.k != self.k:
            raise ConfigurationError("constraint box dimension differs from k")
        bps = tuple(tuple(float(b) for b in c) for c in self.u_breakpoints)
        if bps and len(bps) != self.k:
            raise ConfigurationError("u_breakpoints needs one entry per control coordinate")
        object.__setattr__(self, "u_breakpoints", bps or tuple(() for _ in range(self.k)))

    @property
    def d(self) -> int:
        return self.generator.d

    # -- x-gradients, analytic or finite-difference ------------------------

    def b_x(self, t, x, u, i) -> Array:
        if self.drift_x is not None:
            return self.drift_x(t, x, u, i)
        return _fd_x(lambda xx: self.drift(t, xx, u, i), x)

    def sigma_x(self, t, x, u, i) -> Array:
        if self.diffusion_x is not None:
            return self.diffusion_x(t, x, u, i)
        return _fd_x(lambda xx: self.diffusion(t, xx, u, i), x)

    def f_x(self, t, x, u, i) -> Array:
        if self.running_cost_x is not None:
            return self.running_cost_x(t, x, u, i)
        return _fd_x(lambda xx: self.running_cost(t, xx, u, i), x)

    def h_x(self, x, i) -> Array:
        if self.terminal_cost_x is not None:
            return self.terminal_cost_x(x, i)
        return _fd_x(lambda xx: self.terminal_cost(xx, i), x)

    # -- one-sided u-derivatives ------------------------------------------

    def b_u(self, t, x, u, i, side: int) -> Array:
        if self.drift_u is not None:
            return self.drift_u(t, x, u, i, side)
        return _fd_u_one_sided(lambda uu: self.drift(t, x, uu, i), u, side)

    def sigma_u(self, t, x, u, i, side: int) -> Array:
        if self.diffusion_u is not None:
            return self.diffusion_u(t, x, u, i, side)
        return _fd_u_one_sided(lambda uu: self.diffusion(t, x, uu, i), u, side)

    def f_u(self, t, x, u, i, side: int) -> Array:
        if self.running_cost_u is not None:
            return self.running_cost_u(t, x, u, i, side)
        return _fd_u_one_sided(lambda uu: self.running_cost(t, x, uu, i), u, side)


def _fd_x(fn: Callable[[Array], Array], x: Array) -> Array:
    """Central differences; derivative axis appended last."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for c in range(x.shape[-1]):
        h = FD_STEP * np.maximum(1.0, np.abs(x[..., c]))
        xp, xm = x.copy(), x.copy()
        xp[..., c] += h
        xm[..., c] -= h
        diff = (np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2 * h).reshape(h.shape + (1,) * (np.ndim(fn(x)) - 1))
        cols.append(diff)
    return np.stack(cols, axis=-1)


def _fd_u_one_sided(fn: Callable[[Array], Array], u: Array, side: int) -> Array:
    """Second-order one-sided differences in the direction ``side``."""
    u = np.asarray(u, dtype=np.float64)
    base = np.asarray(fn(u))
    cols = []
    for c in range(u.shape[-1]):
        h = side * FD_STEP * np.maximum(1.0, np.abs(u[..., c]))
        u1, u2 = u.copy(), u.copy()
        u1[..., c] += h
        u2[..., c] += 2 * h
        shape = h.shape + (1,) * (base.ndim - 1)
        hh = h.reshape(shape)
        cols.append((-3 * base + 4 * np.asarray(fn(u1)) - np.asarray(fn(u2))) / (2 * hh))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# Controls
# ---------------------------------------------------------------------------

CONTROL_KINDS = ("constant", "feedback", "open_loop_grid")


@dataclass(frozen=True)
class ControlSpec:
    """An admissible-control candidate.

    ``constant``: ``value`` is a k-vector.
    ``feedback``: ``value(t, x, regime_left)`` returns (P, k); the regime
    argument is the left limit alpha(t_j-), which keeps the rule previsible.
    ``open_loop_grid``: ``value`` is an (N, k) or (P, N, k) array, or a
    factory ``value(N, P)`` returning one.
    """

    kind: str
    value: Any
    name: str = ""
    project: bool = False

    def __post_init__(self):
        if self.kind not in CONTROL_KINDS:
            raise ConfigurationError(f"unknown control kind {self.kind!r}")

    @classmethod
    def constant(cls, value: ArrayLike, name: str = "", project: bool = False) -> "ControlSpec":
        return cls("constant", np.atleast_1d(np.asarray(value, dtype=np.float64)), name, project)

    @classmethod
    def feedback(cls, rule: Callable[..., Array], name: str = "", project: bool = False) -> "ControlSpec":
        return cls("feedback", rule, name, project)

    @classmethod
    def open_loop(cls, grid_values: Any, name: str = "", project: bool = False) -> "ControlSpec":
        return cls("open_loop_grid", grid_values, name, project)

    def bind(self, N: int, P: int) -> "ControlSpec":
        """Materialize open-loop factories for an (N, P) simulation."""
        if self.kind != "open_loop_grid" or not callable(self.value):
            return self
        return ControlSpec("open_loop_grid", np.asarray(self.value(N, P), dtype=np.float64), self.name, self.project)

    def at(self, j: int, t: float, x: Array, regime_left: NDArray) -> Array:
        P = x.shape[0]
        if self.kind == "constant":
            return np.broadcast_to(self.value, (P, self.value.size)).copy()
        if self.kind == "feedback":
            return np.asarray(self.value(t, x, regime_left), dtype=np.float64).reshape(P, -1)
        grid = self.value
        if grid.ndim == 2:
            return np.broadcast_to(grid[j], (P, grid.shape[1])).copy()
        return np.array(grid[:, j], dtype=np.float64)


def random_sign_grid(seed: int, magnitude: float = 1.0, k: int = 1) -> Callable[[int, int], Array]:
    """Factory for an open-loop control valued in {-magnitude, +magnitude}.

    Signs of path ``i`` come from stream 2 of that path, so they do not
    depend on the number of simulated paths.
    """

    def factory(N: int, P: int) -> Array:
        out = np.empty((P, N, k))
        for i in range(P):
            rng = path_rng(seed, i, 2)
            out[i] = np.where(rng.random((N, k)) < 0.5, -magnitude, magnitude)
        return out

    return factory


# ---------------------------------------------------------------------------
# Noise and forward simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseDraw:
    """Brownian increments and regime paths shared by several controls."""

    grid: Array
    dW: Array
    regime_paths: list[RegimePath]
    regimes: NDArray[np.int32]
    regimes_left: NDArray[np.int32]
    seed: int

    @property
    def N(self) -> int:
        return self.grid.size - 1

    @property
    def P(self) -> int:
        return self.dW.shape[0]

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])


@dataclass(frozen=True)
class PathBundle:
    """Simulated paths of (W, alpha, x, u) on a uniform grid."""

    grid: Array
    dW: Array
    regime_paths: list[RegimePath]
    regimes: NDArray[np.int32]
    regimes_left: NDArray[np.int32]
    states: Array
    controls: Array
    seed: int
    control_name: str = ""

    @property
    def N(self) -> int:
        return self.grid.size - 1

    @property
    def P(self) -> int:
        return self.states.shape[0]

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])

    @property
    def noise(self) -> NoiseDraw:
        return NoiseDraw(self.grid, self.dW, self.regime_paths, self.regimes, self.regimes_left, self.seed)


def draw_noise(spec: ProblemSpec, N: int, P: int, seed: int, threads: int = 1) -> NoiseDraw:
    """Draw Brownian increments and exact regime paths for P paths."""
    if N < 1 or P < 1:
        raise DomainError("need N >= 1 steps and P >= 1 paths")
    grid = np.linspace(0.0, spec.T, N + 1)
    dt = spec.T / N
    dW = np.empty((P, N, spec.m))
    sq = np.sqrt(dt)

    def work(start: int, stop: int) -> None:
        for i in range(start, stop):
            dW[i] = path_rng(seed, i, BROWNIAN_STREAM).standard_normal((N, spec.m)) * sq

    run_chunked(P, work, threads)
    paths = simulate_chains(spec.generator, spec.i0, spec.T, P, seed, threads)
    regimes, regimes_left = regimes_on_grid(paths, grid)
    return NoiseDraw(grid, dW, paths, regimes, regimes_left, int(seed))


def integrate(
    spec: ProblemSpec,
    control: ControlSpec,
    noise: NoiseDraw,
    blowup_bound: float = DEFAULT_BLOWUP,
) -> PathBundle:
    """Euler-Maruyama scheme driven by a given noise draw.

    Coefficients are evaluated at the left limit alpha(t_j-).
    """
    control = control.bind(noise.N, noise.P)
    if control.kind == "open_loop_grid":
        g = control.value
        expected = (noise.N, spec.k) if g.ndim == 2 else (noise.P, noise.N, spec.k)
        if g.shape != expected:
            raise ShapeError(f"open-loop control has shape {g.shape}, expected {expected}")
    P, N, dt = noise.P, noise.N, noise.dt
    x = np.empty((P, N + 1, spec.n))
    u = np.empty((P, N, spec.k))
    x[:, 0] = spec.x0
    for j in range(N):
        t = float(noise.grid[j])
        xj = x[:, j]
        reg = noise.regimes_left[:, j]
        uj = control.at(j, t, xj, reg)
        if uj.shape != (P, spec.k):
            raise ShapeError(f"control returned shape {uj.shape}, expected {(P, spec.k)}")
        inside = spec.constraint.contains(uj)
        if not np.all(inside):
            if not control.project:
                bad = int(np.argmin(inside))
                raise AdmissibilityError(
                    f"control {control.name or control.kind!r} value {uj[bad].tolist()} "
                    f"outside U at path {bad}, step {j}"
                )
            uj = spec.constraint.project(uj)
        u[:, j] = uj
        b = spec.drift(t, xj, uj, reg)
        sig = spec.diffusion(t, xj, uj, reg)
        x[:, j + 1] = xj + b * dt + np.einsum("pnm,pm->pn", sig, noise.dW[:, j])
        ok = np.all(np.isfinite(x[:, j + 1]) & (np.abs(x[:, j + 1]) <= blowup_bound), axis=1)
        if not np.all(ok):
            bad = int(np.argmin(ok))
            raise BlowUpError(
                f"state left the bound {blowup_bound:g} (value {x[bad, j + 1].tolist()}) "
                f"on path {bad} at step {j + 1}",
                path=bad,
                step=j + 1,
            )
    return PathBundle(
        noise.grid, noise.dW, noise.regime_paths, noise.regimes, noise.regimes_left, x, u, noise.seed, control.name
    )


def simulate_forward(
    spec: ProblemSpec,
    control: ControlSpec,
    N: int,
    P: int,
    seed: int,
    threads: int = 1,
    blowup_bound: float = DEFAULT_BLOWUP,
) -> PathBundle:
    return integrate(spec, control, draw_noise(spec, N, P, seed, threads), blowup_bound)


def replay_controls(spec: ProblemSpec, bundle: PathBundle, controls: Array, name: str = "") -> PathBundle:
    """Re-run the scheme on ``bundle``'s noise with a per-path control grid."""
    return integrate(spec, ControlSpec.open_loop(controls, name), bundle.noise)


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------


def path_costs(spec: ProblemSpec, bundle: PathBundle) -> Array:
    """Per-path cost: left Riemann sum of f plus terminal h."""
    if bundle.P == 0:
        raise DomainError("empty path bundle")
    total = np.zeros(bundle.P)
    for j in range(bundle.N):
        t = float(bundle.grid[j])
        total += spec.running_cost(t, bundle.states[:, j], bundle.controls[:, j], bundle.regimes[:, j])
    total *= bundle.dt
    total += spec.terminal_cost(bundle.states[:, -1], bundle.regimes[:, -1])
    return total


def mean_and_se(values: Array) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DomainError("cannot average an empty sample")
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def estimate_cost(spec: ProblemSpec, bundle: PathBundle) -> tuple[float, float]:
    """Monte Carlo estimate of J(u) and its standard error."""
    return mean_and_se(path_costs(spec, bundle))


# ---------------------------------------------------------------------------
# Stability probes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LipschitzProbe:
    ratio: float
    state_gap: float  # sup_j E|x1 - x2|^4
    control_gap: float  # grid L4 norm of u1 - u2, to the fourth power


def lipschitz_probe(
    spec: ProblemSpec, u1: ControlSpec, u2: ControlSpec, N: int, P: int, seed: int, threads: int = 1
) -> LipschitzProbe:
    noise = draw_noise(spec, N, P, seed, threads)
    b1 = integrate(spec, u1, noise)
    b2 = integrate(spec, u2, noise)
    dx4 = np.sum((b1.states - b2.states) ** 2, axis=-1) ** 2
    du4 = np.sum((b1.controls - b2.controls) ** 2, axis=-1) ** 2
    control_gap = float(du4.mean(axis=0).sum() * noise.dt)
    if control_gap == 0.0:
        raise DomainError("controls coincide on the grid; the Lipschitz ratio is undefined")
    state_gap = float(dx4.mean(axis=0).max())
    return LipschitzProbe(state_gap / control_gap, state_gap, control_gap)


def lipschitz_ratio_probe(
    spec: ProblemSpec, u1: ControlSpec, u2: ControlSpec, N: int, P: int, seed: int, threads: int = 1
) -> float:
    """sup_t E|x1 - x2|^4 / ||u1 - u2||^4 under common random numbers."""
    return lipschitz_probe(spec, u1, u2, N, P, seed, threads).ratio


def sup_moment(bundle: PathBundle, k: int = 1) -> float:
    """max over grid nodes of the sample mean of |x(t)|^(2k)."""
    return float((np.sum(bundle.states**2, axis=-1) ** k).mean(axis=0).max())


# ---------------------------------------------------------------------------
# Assumption spot checks
# ---------------------------------------------------------------------------


@dataclass
class AssumptionReport:
    checks: dict[str, dict] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": self.checks}


def _sample_probe_points(spec: ProblemSpec, rng: np.random.Generator, size: int):
    t = rng.uniform(0.0, spec.T, size)
    reg = rng.integers(0, spec.d, size)
    x = rng.normal(0.0, 2.0, (size, spec.n))
    lo, hi = spec.constraint.lower, spec.constraint.upper
    u = rng.normal(0.0, 2.0, (size, spec.k))
    finite = np.isfinite(lo) & np.isfinite(hi)
    u = np.where(finite, lo + (hi - lo) * rng.random((size, spec.k)), np.clip(u, lo, hi))
    return t, reg, x, u


def validate_assumptions(spec: ProblemSpec, probes: int = 256, seed: int = 0) -> AssumptionReport:
    """Randomized spot checks of the Lipschitz, growth and C1 hypotheses.

    Checks are one-sided: a pass means no probe found a violation.
    """
    rng = np.random.default_rng(seed)
    report = AssumptionReport()
    t, reg, x, u = _sample_probe_points(spec, rng, probes)
    _, _, x2, u2 = _sample_probe_points(spec, rng, probes)
    near = rng.random(probes) < 0.5
    x2 = np.where(near[:, None], x + 1e-3 * rng.normal(size=x.shape), x2)
    u2 = np.where(near[:, None], spec.constraint.project(u + 1e-3 * rng.normal(size=u.shape)), u2)

    def per_probe(fn, *args):
        return np.stack([np.asarray(fn(float(t[p]), *(a[p : p + 1] for a in args), reg[p : p + 1]))[0] for p in range(probes)])

    b1, b2 = per_probe(spec.drift, x, u), per_probe(spec.drift, x2, u2)
    s1, s2 = per_probe(spec.diffusion, x, u), per_probe(spec.diffusion, x2, u2)
    f1 = per_probe(spec.running_cost, x, u)
    h1 = np.stack([np.asarray(spec.terminal_cost(x[p : p + 1], reg[p : p + 1]))[0] for p in range(probes)])
    finite = all(np.all(np.isfinite(a)) for a in (b1, b2, s1, s2, f1, h1))
    report.checks["finite_coefficients"] = {"passed": bool(finite)}

    gap = np.linalg.norm(x - x2, axis=1) + np.linalg.norm(u - u2, axis=1)
    gap = np.where(gap == 0, np.inf, gap)
    db = np.linalg.norm((b1 - b2).reshape(probes, -1), axis=1)
    ds = np.linalg.norm((s1 - s2).reshape(probes, -1), axis=1)
    lip = float(np.max(np.maximum(db, ds) / gap))
    K = spec.lipschitz_constant
    report.checks["A1_lipschitz"] = {
        "passed": bool(np.isfinite(lip) and (K is None or lip <= K * (1 + 1e-9))),
        "estimate": lip,
        "declared": K,
    }

    zeros_x, zeros_u = np.zeros((1, spec.n)), np.zeros((1, spec.k))
    origin = max(
        float(np.max(np.abs(spec.drift(0.0, zeros_x, zeros_u, np.array([i]))))) for i in range(spec.d)
    )
    report.checks["A1_origin_bound"] = {"passed": bool(np.isfinite(origin)), "value": origin}

    du = np.linalg.norm(u - u2, axis=1)
    f_u2 = np.stack(
        [np.asarray(spec.running_cost(float(t[p]), x[p : p + 1], u2[p : p + 1], reg[p : p + 1]))[0] for p in range(probes)]
    )
    growth = np.abs(f1 - f_u2) / np.where(du == 0, np.inf, (1 + np.linalg.norm(x, axis=1) + np.linalg.norm(u, axis=1) + np.linalg.norm(u2, axis=1)) * du)
    report.checks["A3_cost_growth"] = {"passed": bool(np.all(np.isfinite(growth))), "estimate": float(np.max(growth))}

    # C1 in x: analytic gradients (when given) must match finite differences.
    def grad_error(analytic, fn, has_analytic):
        if not has_analytic:
            return 0.0
        err = 0.0
        for p in range(min(probes, 64)):
            sl = slice(p, p + 1)
            a = np.asarray(analytic(sl))
            fd = _fd_x(lambda xx: fn(xx, sl), x[sl])
            err = max(err, float(np.max(np.abs(a - fd)) / (1.0 + np.max(np.abs(fd)))))
        return err

    err_b = grad_error(lambda sl: spec.b_x(float(t[sl][0]), x[sl], u[sl], reg[sl]),
                       lambda xx, sl: spec.drift(float(t[sl][0]), xx, u[sl], reg[sl]), spec.drift_x is not None)
    err_s = grad_error(lambda sl: spec.sigma_x(float(t[sl][0]), x[sl], u[sl], reg[sl]),
                       lambda xx, sl: spec.diffusion(float(t[sl][0]), xx, u[sl], reg[sl]), spec.diffusion_x is not None)
    err_f = grad_error(lambda sl: spec.f_x(float(t[sl][0]), x[sl], u[sl], reg[sl]),
                       lambda xx, sl: spec.running_cost(float(t[sl][0]), xx, u[sl], reg[sl]), spec.running_cost_x is not None)
    err_h = grad_error(lambda sl: spec.h_x(x[sl], reg[sl]),
                       lambda xx, sl: spec.terminal_cost(xx, reg[sl]), spec.terminal_cost_x is not None)
    report.checks["A2_state_gradients"] = {"passed": max(err_b, err_s) < 1e-5, "max_rel_error": max(err_b, err_s)}
    report.checks["A4_cost_gradients"] = {"passed": max(err_f, err_h) < 1e-5, "max_rel_error": max(err_f, err_h)}
    return report


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def write_bundle_csv(bundle: PathBundle, out: TextIO, max_paths: int | None = None) -> None:
    """CSV with columns path_id, step, t, regime, x_1.., u_1..; u is blank at step N."""
    n, k = bundle.states.shape[2], bundle.controls.shape[2]
    writer = csv.writer(out)
    writer.writerow(["path_id", "step", "t", "regime"] + [f"x_{a + 1}" for a in range(n)] + [f"u_{a + 1}" for a in range(k)])
    P = bundle.P if max_paths is None else min(bundle.P, max_paths)
    for p in range(P):
        for j in range(bundle.N + 1):
            u = [repr(float(v)) for v in bundle.controls[p, j]] if j < bundle.N else [""] * k
            writer.writerow(
                [p, j, repr(float(bundle.grid[j])), int(bundle.regimes[p, j])]
                + [repr(float(v)) for v in bundle.states[p, j]]
                + u
            )
