"""Weak maximum principle checks.

``check_necessary`` tests 0 in d_u(-H)(t, x, u, alpha(t-), p, q) + N_U(u) at
every grid node of every path.  ``check_sufficient`` probes convexity of h
and joint concavity of (x, u) -> H by random midpoint tests.
``compare_costs`` ranks controls under common random numbers, the
fallback when the sufficient conditions do not apply.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .adjoint import AdjointSolution, AnsatzSolution
from .clarke import MEMBERSHIP_TOL, gradient_from_one_sided, stationarity_test
from .dynamics import ControlSpec, PathBundle, ProblemSpec, draw_noise, integrate, mean_and_se, path_costs
from .errors import ConfigurationError, ShapeError
from .hamiltonian import hamiltonian, hamiltonian_u

Array = NDArray[np.float64]

INTERIOR, LOWER, UPPER, KINK, DEGENERATE = range(5)
LABELS = ("interior", "lower_bound", "upper_bound", "kink", "degenerate")
ANALYTIC_TOL = 1e-9
PROBE_TOL = 1e-10


@dataclass(frozen=True)
class HamiltonianSpec:
    """H(t, x, u, i, p, q) built from a problem's coefficients.

    ``evaluator`` optionally supplies a closed-form H; ``assembly_error``
    compares it against -f + b.p + tr(sigma' q).
    """

    problem: ProblemSpec
    evaluator: Callable[..., Array] | None = None

    def __call__(self, t, x, u, regime, p, q) -> Array:
        if self.evaluator is not None:
            return self.evaluator(t, x, u, regime, p, q)
        return hamiltonian(self.problem, t, x, u, regime, p, q)

    def assembled(self, t, x, u, regime, p, q) -> Array:
        return hamiltonian(self.problem, t, x, u, regime, p, q)

    def slopes_of_minus_h(self, t, x, u, regime, p, q) -> tuple[Array, Array]:
        """Left and right u-derivatives of -H, each (P, k)."""
        left = -hamiltonian_u(self.problem, t, x, u, regime, p, q, -1)
        right = -hamiltonian_u(self.problem, t, x, u, regime, p, q, +1)
        return left, right

    def assembly_error(self, probes: int = 1000, seed: int = 0) -> float:
        """Max relative gap between the evaluator and the assembled H."""
        spec = self.problem
        rng = np.random.default_rng(seed)
        t = float(rng.uniform(0, spec.T))
        x = rng.normal(size=(probes, spec.n))
        u = spec.constraint.project(rng.normal(size=(probes, spec.k)))
        reg = rng.integers(0, spec.d, probes)
        p = rng.normal(size=(probes, spec.n))
        q = rng.normal(size=(probes, spec.n, spec.m))
        a = self(t, x, u, reg, p, q)
        b = self.assembled(t, x, u, reg, p, q)
        return float(np.max(np.abs(a - b) / (1.0 + np.abs(b))))


# ---------------------------------------------------------------------------
# Necessary condition
# ---------------------------------------------------------------------------


@dataclass
class StationarityReport:
    """Per (path, node) verdicts of the stationarity test."""

    grid: Array
    passed: NDArray[np.bool_]  # (P, N)
    violation: Array  # (P, N)
    labels: NDArray[np.int8]  # (P, N)
    tol: float | str
    control_name: str = ""
    terminal_error: float = 0.0

    @property
    def pass_fraction(self) -> float:
        return float(self.passed.mean())

    @property
    def all_passed(self) -> bool:
        return bool(self.passed.all())

    @property
    def max_violation(self) -> float:
        return float(self.violation.max())

    @property
    def worst(self) -> tuple[int, float]:
        k = int(np.argmax(self.violation))
        path, node = np.unravel_index(k, self.violation.shape)
        return int(path), float(self.grid[node])

    @property
    def case_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels.ravel(), minlength=len(LABELS))
        return {name: int(c) for name, c in zip(LABELS, counts)}

    def label_fraction(self, label: str) -> float:
        return float(np.mean(self.labels == LABELS.index(label)))

    def to_dict(self) -> dict:
        path, t = self.worst
        return {
            "control": self.control_name,
            "passed": self.all_passed,
            "pass_fraction": self.pass_fraction,
            "max_violation": self.max_violation,
            "worst": {"path": path, "t": t},
            "case_counts": self.case_counts,
            "tol": self.tol,
            "terminal_identity_error": self.terminal_error,
        }


def _node_labels(spec: ProblemSpec, u: Array, left: Array, right: Array) -> NDArray[np.int8]:
    lo, hi = spec.constraint.lower, spec.constraint.upper
    tol = MEMBERSHIP_TOL
    at_lo = np.abs(u - lo) <= tol
    at_hi = np.abs(u - hi) <= tol
    bps = spec.u_breakpoints
    at_bp = np.zeros_like(at_lo)
    for a, points in enumerate(bps):
        for b in points:
            at_bp[..., a] |= np.abs(u[..., a] - b) <= tol
    kink = at_bp | (left != right)
    coord = np.full(u.shape, INTERIOR, dtype=np.int8)
    coord[kink] = KINK
    coord[at_hi] = UPPER
    coord[at_lo] = LOWER
    coord[at_lo & at_hi] = DEGENERATE
    # node label: first non-interior coordinate
    nonint = coord != INTERIOR
    first = np.argmax(nonint, axis=-1)
    return np.take_along_axis(coord, first[..., None], axis=-1)[..., 0]


def check_necessary(
    spec: ProblemSpec,
    control: ControlSpec | None,
    adjoint: AdjointSolution | AnsatzSolution,
    bundle: PathBundle,
    tol: float | str = ANALYTIC_TOL,
    hamiltonian_spec: HamiltonianSpec | None = None,
) -> StationarityReport:
    """Test 0 in d_u(-H) + N_U(u) along every simulated path.

    ``tol="auto"`` uses 3 standard errors of the regression adjoint,
    propagated through b_u and sigma_u, floored at 1e-9.
    """
    if isinstance(adjoint, AnsatzSolution):
        adjoint = adjoint.to_adjoint(spec, bundle)
    adjoint.check_shapes(bundle)
    if adjoint.q.shape[3] != spec.m:
        raise ShapeError(f"adjoint q has {adjoint.q.shape[3]} noise columns; problem has m={spec.m}")
    H = hamiltonian_spec or HamiltonianSpec(spec)
    P, N = bundle.P, bundle.N
    passed = np.empty((P, N), dtype=bool)
    violation = np.empty((P, N))
    labels = np.empty((P, N), dtype=np.int8)
    auto = isinstance(tol, str)
    if auto and tol != "auto":
        raise ConfigurationError(f"tol must be a number or 'auto', got {tol!r}")
    for j in range(N):
        t = float(bundle.grid[j])
        x, u, reg = bundle.states[:, j], bundle.controls[:, j], bundle.regimes_left[:, j]
        p, q = adjoint.p[:, j], adjoint.q[:, j]
        left, right = H.slopes_of_minus_h(t, x, u, reg, p, q)
        grad = gradient_from_one_sided(left, right)
        cone = spec.constraint.normal_cone(u)
        if auto:
            node_tol = np.full(P, ANALYTIC_TOL)
            if adjoint.p_se is not None and adjoint.q_se is not None:
                bu = np.maximum(np.abs(spec.b_u(t, x, u, reg, -1)), np.abs(spec.b_u(t, x, u, reg, 1)))
                su = np.maximum(np.abs(spec.sigma_u(t, x, u, reg, -1)), np.abs(spec.sigma_u(t, x, u, reg, 1)))
                err = np.einsum("pal,pa->pl", bu, adjoint.p_se[:, j]) + np.einsum("pabl,pab->pl", su, adjoint.q_se[:, j])
                node_tol = np.maximum(node_tol, 3.0 * np.linalg.norm(err, axis=1))
        else:
            node_tol = float(tol)
        ok, viol = stationarity_test(grad, cone, node_tol)
        passed[:, j] = ok
        violation[:, j] = viol
        labels[:, j] = _node_labels(spec, u, left, right)
    h_x = spec.h_x(bundle.states[:, -1], bundle.regimes[:, -1])
    terminal_error = float(np.max(np.abs(adjoint.p[:, -1] + h_x)))
    name = control.name if control is not None else bundle.control_name
    return StationarityReport(bundle.grid, passed, violation, labels, tol, name, terminal_error)


# ---------------------------------------------------------------------------
# Sufficient conditions
# ---------------------------------------------------------------------------


@dataclass
class ConvexityProbe:
    passed: bool
    worst_gap: float
    witness: dict | None = None

    def to_dict(self) -> dict:
        return {"passed": self.passed, "worst_gap": self.worst_gap, "witness": self.witness}


@dataclass
class SufficiencyReport:
    h_convexity: ConvexityProbe
    H_concavity: ConvexityProbe
    probes: int

    @property
    def verdict(self) -> bool:
        return self.h_convexity.passed and self.H_concavity.passed

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "h_convexity": self.h_convexity.to_dict(),
            "H_concavity": self.H_concavity.to_dict(),
            "probes": self.probes,
        }


def _sample_controls(spec: ProblemSpec, rng: np.random.Generator, center: Array) -> Array:
    lo, hi = spec.constraint.lower, spec.constraint.upper
    finite = np.isfinite(lo) & np.isfinite(hi)
    spread = np.where(finite, hi - lo, 2.0)
    draw = center + rng.normal(size=center.shape) * spread
    uniform = lo + (hi - lo) * rng.random(center.shape) if np.all(finite) else draw
    return spec.constraint.project(np.where(finite, uniform, draw))


def midpoint_gap_h(spec: ProblemSpec, x1: Array, x2: Array, regime: NDArray) -> Array:
    """h(mid) - (h(x1) + h(x2)) / 2; positive values violate convexity."""
    mid = 0.5 * (x1 + x2)
    return spec.terminal_cost(mid, regime) - 0.5 * (spec.terminal_cost(x1, regime) + spec.terminal_cost(x2, regime))


def midpoint_gap_H(H: HamiltonianSpec, t, x1, u1, x2, u2, regime, p, q) -> Array:
    """(H1 + H2) / 2 - H(mid); positive values violate concavity."""
    mid_x, mid_u = 0.5 * (x1 + x2), 0.5 * (u1 + u2)
    return 0.5 * (H(t, x1, u1, regime, p, q) + H(t, x2, u2, regime, p, q)) - H(t, mid_x, mid_u, regime, p, q)


def check_sufficient(
    spec: ProblemSpec,
    adjoint: AdjointSolution | AnsatzSolution,
    bundle: PathBundle,
    probes: int = 200,
    seed: int = 0,
    hamiltonian_spec: HamiltonianSpec | None = None,
) -> SufficiencyReport:
    """Randomized midpoint tests of convexity of h and concavity of H in (x, u).

    A third of the H probes move only u, a third only x and a third both.
    Failures beyond 1e-10 (relative) are recorded with the witness.
    """
    if probes < 100:
        raise ConfigurationError("check_sufficient needs at least 100 probes")
    if isinstance(adjoint, AnsatzSolution):
        adjoint = adjoint.to_adjoint(spec, bundle)
    adjoint.check_shapes(bundle)
    H = hamiltonian_spec or HamiltonianSpec(spec)
    rng = np.random.default_rng(seed)
    P, N = bundle.P, bundle.N
    x_scale = 1.0 + float(np.std(bundle.states))

    # h convexity, each terminal regime
    regime = np.arange(probes) % spec.d
    x1 = bundle.states[rng.integers(0, P, probes), -1] + rng.normal(size=(probes, spec.n)) * x_scale
    x2 = x1 + rng.normal(size=(probes, spec.n)) * x_scale
    gap = midpoint_gap_h(spec, x1, x2, regime)
    scale = 1.0 + np.abs(spec.terminal_cost(x1, regime)) + np.abs(spec.terminal_cost(x2, regime))
    rel = gap / scale
    k = int(np.argmax(rel))
    h_ok = bool(rel[k] <= PROBE_TOL)
    h_probe = ConvexityProbe(
        h_ok,
        float(gap[k]),
        None if h_ok else {"regime": int(regime[k]), "x1": x1[k].tolist(), "x2": x2[k].tolist(), "gap": float(gap[k])},
    )

    # H concavity at sampled (path, node)
    paths = rng.integers(0, P, probes)
    nodes = rng.integers(0, N, probes)
    t = bundle.grid[nodes]
    reg = bundle.regimes_left[paths, nodes]
    p = adjoint.p[paths, nodes]
    q = adjoint.q[paths, nodes]
    xc = bundle.states[paths, nodes]
    uc = bundle.controls[paths, nodes]
    xa = xc + rng.normal(size=xc.shape) * x_scale
    xb = xc + rng.normal(size=xc.shape) * x_scale
    ua = _sample_controls(spec, rng, uc)
    ub = _sample_controls(spec, rng, uc)
    kind = np.arange(probes) % 3  # 0: u only, 1: x only, 2: joint
    xb = np.where((kind == 0)[:, None], xa, xb)
    ub = np.where((kind == 1)[:, None], ua, ub)
    gaps = np.empty(probes)
    scales = np.empty(probes)
    for s in range(probes):
        one = slice(s, s + 1)
        args = (float(t[s]),)
        gaps[s] = midpoint_gap_H(H, *args, xa[one], ua[one], xb[one], ub[one], reg[one], p[one], q[one])[0]
        scales[s] = 1.0 + abs(H(*args, xa[one], ua[one], reg[one], p[one], q[one])[0]) + abs(
            H(*args, xb[one], ub[one], reg[one], p[one], q[one])[0]
        )
    rel = gaps / scales
    k = int(np.argmax(rel))
    H_ok = bool(rel[k] <= PROBE_TOL)
    witness = None
    if not H_ok:
        witness = {
            "t": float(t[k]),
            "regime": int(reg[k]),
            "p": p[k].tolist(),
            "q": q[k].tolist(),
            "x1": xa[k].tolist(),
            "u1": ua[k].tolist(),
            "x2": xb[k].tolist(),
            "u2": ub[k].tolist(),
            "gap": float(gaps[k]),
            "kind": ("u", "x", "joint")[kind[k]],
        }
    return SufficiencyReport(h_probe, ConvexityProbe(H_ok, float(gaps[k]), witness), probes)


# ---------------------------------------------------------------------------
# Cost comparison
# ---------------------------------------------------------------------------


@dataclass
class CostEntry:
    name: str
    mean: float
    std_error: float
    diff: float  # J(alternative) - J(candidate), paired
    diff_se: float
    beats_candidate: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CostComparison:
    candidate: CostEntry
    alternatives: list[CostEntry] = field(default_factory=list)

    @property
    def candidate_best(self) -> bool:
        return not any(a.beats_candidate for a in self.alternatives)

    @property
    def ranking(self) -> list[str]:
        entries = [self.candidate] + self.alternatives
        return [e.name for e in sorted(entries, key=lambda e: e.mean)]

    def to_dict(self) -> dict:
        return {
            "candidate": self.candidate.to_dict(),
            "alternatives": [a.to_dict() for a in self.alternatives],
            "candidate_best": self.candidate_best,
            "ranking": self.ranking,
        }


def compare_costs(
    spec: ProblemSpec,
    candidate: ControlSpec,
    alternatives: Sequence[ControlSpec],
    N: int,
    P: int,
    seed: int,
    threads: int = 1,
) -> CostComparison:
    """Costs under common random numbers; flags alternatives beating the
    candidate by more than 3 standard errors of the paired difference."""
    noise = draw_noise(spec, N, P, seed, threads)
    base = path_costs(spec, integrate(spec, candidate, noise))
    mean, se = mean_and_se(base)
    cand = CostEntry(candidate.name or "candidate", mean, se, 0.0, 0.0, False)
    out = CostComparison(cand)
    for k, alt in enumerate(alternatives):
        costs = path_costs(spec, integrate(spec, alt, noise))
        m, s = mean_and_se(costs)
        dm, ds = mean_and_se(costs - base)
        out.alternatives.append(CostEntry(alt.name or f"alternative_{k}", m, s, dm, ds, bool(dm < -3.0 * ds)))
    return out


def summary_table(report: StationarityReport | CostComparison) -> str:
    """Aligned plain-text summary for terminal output."""
    if isinstance(report, StationarityReport):
        rows = [("control", report.control_name or "-"), ("pass fraction", f"{report.pass_fraction:.6f}"),
                ("max violation", f"{report.max_violation:.3e}")]
        rows += [(f"  {k}", str(v)) for k, v in report.case_counts.items()]
    else:
        rows = [(e.name, f"{e.mean:+.6f} +- {e.std_error:.2e}  diff {e.diff:+.6f} +- {e.diff_se:.2e}")
                for e in [report.candidate] + report.alternatives]
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{a.ljust(width)}  {b}" for a, b in rows)
