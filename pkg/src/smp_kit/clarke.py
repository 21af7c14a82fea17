"""Clarke generalized gradients and normal cones on boxes.

Scope is deliberately narrow: scalar piecewise-C1 functions (where the
generalized gradient is the interval spanned by the one-sided derivatives)
and coordinatewise-separable functions over boxes, where the gradient is a
product of such intervals.  Non-separable nonsmooth functions of several
control coordinates are not supported.

All interval arithmetic is vectorized: ``IntervalSet`` holds arrays of
lower/upper endpoints whose trailing axis indexes control coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ConfigurationError, DomainError, MembershipError

MEMBERSHIP_TOL = 1e-12
CONTINUITY_TOL = 1e-12


@dataclass(frozen=True)
class IntervalSet:
    """Closed intervals [lower, upper]; endpoints may be infinite."""

    lower: NDArray[np.float64]
    upper: NDArray[np.float64]

    def __init__(self, lower: ArrayLike, upper: ArrayLike):
        lo = np.asarray(lower, dtype=np.float64)
        hi = np.asarray(upper, dtype=np.float64)
        lo, hi = np.broadcast_arrays(lo, hi)
        if np.any(lo > hi) or np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise DomainError("interval lower endpoint exceeds upper endpoint")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def point(cls, value: ArrayLike) -> "IntervalSet":
        return cls(value, value)

    def __add__(self, other: "IntervalSet") -> "IntervalSet":
        # -inf + (+inf) cannot occur: lower endpoints are never +inf
        return IntervalSet(self.lower + other.lower, self.upper + other.upper)

    def contains(self, value: ArrayLike, tol: float = 0.0) -> NDArray[np.bool_]:
        v = np.asarray(value, dtype=np.float64)
        return (self.lower - tol <= v) & (v <= self.upper + tol)

    def distance_from_zero(self) -> NDArray[np.float64]:
        """Per-coordinate distance from 0 to the interval."""
        return np.maximum(self.lower, 0.0) + np.maximum(-self.upper, 0.0)

    def is_singleton(self) -> NDArray[np.bool_]:
        return self.lower == self.upper

    def to_list(self) -> list:
        return [[float(a), float(b)] for a, b in zip(np.ravel(self.lower), np.ravel(self.upper))]


class PiecewiseSmoothFn:
    """Continuous scalar function, smooth between declared breakpoints.

    Parameters
    ----------
    breakpoints : increasing sequence of kink locations
    pieces : ``len(breakpoints) + 1`` pairs ``(f, df)``; piece ``k`` is used
        on the closed interval between breakpoints ``k-1`` and ``k``
    domain : (lo, hi) interval on which the function is defined
    """

    def __init__(
        self,
        breakpoints: Sequence[float],
        pieces: Sequence[tuple[Callable[[float], float], Callable[[float], float]]],
        domain: tuple[float, float] = (-np.inf, np.inf),
    ):
        bps = [float(b) for b in breakpoints]
        if any(b2 <= b1 for b1, b2 in zip(bps, bps[1:])):
            raise ConfigurationError("breakpoints must be strictly increasing")
        if len(pieces) != len(bps) + 1:
            raise ConfigurationError("need one more piece than breakpoints")
        self.breakpoints = bps
        self.pieces = list(pieces)
        self.domain = (float(domain[0]), float(domain[1]))
        for k, b in enumerate(bps):
            left, right = self.pieces[k][0](b), self.pieces[k + 1][0](b)
            if abs(left - right) > CONTINUITY_TOL * max(1.0, abs(left)):
                raise ConfigurationError(f"pieces disagree at breakpoint {b}: {left} vs {right}")

    @classmethod
    def smooth(cls, f, df, domain=(-np.inf, np.inf)) -> "PiecewiseSmoothFn":
        return cls([], [(f, df)], domain)

    def _piece_index(self, u: float) -> int:
        return int(np.searchsorted(self.breakpoints, u, side="right"))

    def _check_domain(self, u: float) -> None:
        lo, hi = self.domain
        if not lo - MEMBERSHIP_TOL <= u <= hi + MEMBERSHIP_TOL:
            raise DomainError(f"u={u} outside domain [{lo}, {hi}]")

    def __call__(self, u: float) -> float:
        self._check_domain(u)
        return float(self.pieces[self._piece_index(u)][0](u))

    def one_sided_derivatives(self, u: float) -> tuple[float, float]:
        """(left, right) derivatives at ``u``."""
        self._check_domain(u)
        k = self._piece_index(u)
        right = float(self.pieces[k][1](u))
        if u in self.breakpoints:
            left = float(self.pieces[k - 1][1](u))
        else:
            left = right
        return left, right


def gradient_from_one_sided(left: ArrayLike, right: ArrayLike) -> IntervalSet:
    """Clarke gradient of a scalar piecewise-C1 function: hull of one-sided slopes."""
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    return IntervalSet(np.minimum(left, right), np.maximum(left, right))


def generalized_gradient(f: PiecewiseSmoothFn | Sequence[PiecewiseSmoothFn], u: ArrayLike) -> IntervalSet:
    """Generalized gradient at ``u``.

    A single function gives a scalar interval; a sequence of functions is
    read as the separable sum ``sum_l f_l(u_l)`` and gives one interval per
    coordinate.
    """
    if isinstance(f, PiecewiseSmoothFn):
        left, right = f.one_sided_derivatives(float(u))
        return gradient_from_one_sided(left, right)
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if len(f) != u.size:
        raise DomainError(f"{len(f)} coordinate functions for a point of size {u.size}")
    sides = [fl.one_sided_derivatives(float(ul)) for fl, ul in zip(f, u)]
    return gradient_from_one_sided([s[0] for s in sides], [s[1] for s in sides])


@dataclass(frozen=True)
class ConvexBox:
    """Product of closed intervals [lower_l, upper_l]."""

    lower: NDArray[np.float64]
    upper: NDArray[np.float64]

    def __init__(self, lower: ArrayLike, upper: ArrayLike):
        lo = np.atleast_1d(np.asarray(lower, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(upper, dtype=np.float64))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigurationError("box bounds must be 1-d arrays of equal length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo > hi):
            raise ConfigurationError("box requires lower <= upper in every coordinate")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, k: int) -> "ConvexBox":
        return cls(np.full(k, -np.inf), np.full(k, np.inf))

    @property
    def k(self) -> int:
        return self.lower.size

    def contains(self, u: ArrayLike, tol: float = MEMBERSHIP_TOL) -> NDArray[np.bool_]:
        """Membership of points ``u`` (trailing axis = coordinates)."""
        u = np.asarray(u, dtype=np.float64)
        return np.all((u >= self.lower - tol) & (u <= self.upper + tol), axis=-1)

    def project(self, u: ArrayLike) -> NDArray[np.float64]:
        return np.clip(np.asarray(u, dtype=np.float64), self.lower, self.upper)

    def _faces(self, u: ArrayLike, tol: float):
        u = np.asarray(u, dtype=np.float64)
        if not np.all(self.contains(u, tol)):
            raise MembershipError("point lies outside the constraint box")
        at_lo = np.abs(u - self.lower) <= tol
        at_hi = np.abs(u - self.upper) <= tol
        return at_lo, at_hi

    def normal_cone(self, u: ArrayLike, tol: float = MEMBERSHIP_TOL) -> IntervalSet:
        at_lo, at_hi = self._faces(u, tol)
        lower = np.where(at_lo, -np.inf, 0.0)
        upper = np.where(at_hi, np.inf, 0.0)
        return IntervalSet(lower, upper)

    def tangent_cone(self, u: ArrayLike, tol: float = MEMBERSHIP_TOL) -> IntervalSet:
        at_lo, at_hi = self._faces(u, tol)
        lower = np.where(at_lo, 0.0, -np.inf)
        upper = np.where(at_hi, 0.0, np.inf)
        return IntervalSet(lower, upper)

    def to_dict(self) -> dict:
        return {"lower": [float(v) for v in self.lower], "upper": [float(v) for v in self.upper]}


def normal_cone(U: ConvexBox, u: ArrayLike, tol: float = MEMBERSHIP_TOL) -> IntervalSet:
    return U.normal_cone(u, tol)


def stationarity_test(
    grad: IntervalSet, cone: IntervalSet, tol: float | ArrayLike = 1e-9
) -> tuple[NDArray[np.bool_], NDArray[np.float64]]:
    """Test 0 in grad + cone.

    The trailing axis of both sets indexes coordinates; the Euclidean
    distance from 0 to the product set is compared against ``tol``.
    Returns ``(passed, violation)`` with violation reported as 0 on a pass.
    """
    total = grad + cone
    per_coord = total.distance_from_zero()
    dist = np.sqrt(np.sum(per_coord**2, axis=-1)) if per_coord.ndim else per_coord
    passed = dist <= tol
    violation = np.where(passed, 0.0, dist)
    if np.ndim(passed) == 0:
        return bool(passed), float(violation)
    return passed, violation
