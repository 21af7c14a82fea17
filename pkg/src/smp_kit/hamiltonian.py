"""Hamiltonian H = -f + b.p + tr(sigma' q) and its partial derivatives."""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

from .dynamics import ProblemSpec

Array = NDArray[np.float64]


def hamiltonian(spec: ProblemSpec, t: float, x: Array, u: Array, regime, p: Array, q: Array) -> Array:
    """H for P points: x (P, n), u (P, k), p (P, n), q (P, n, m) -> (P,)."""
    b = spec.drift(t, x, u, regime)
    sig = spec.diffusion(t, x, u, regime)
    return -spec.running_cost(t, x, u, regime) + np.einsum("pa,pa->p", b, p) + np.einsum("pab,pab->p", sig, q)


def hamiltonian_x(spec: ProblemSpec, t: float, x: Array, u: Array, regime, p: Array, q: Array) -> Array:
    """dH/dx, shape (P, n)."""
    return (
        -spec.f_x(t, x, u, regime)
        + np.einsum("pac,pa->pc", spec.b_x(t, x, u, regime), p)
        + np.einsum("pabc,pab->pc", spec.sigma_x(t, x, u, regime), q)
    )


def hamiltonian_u(spec: ProblemSpec, t: float, x: Array, u: Array, regime, p: Array, q: Array, side: int) -> Array:
    """One-sided dH/du in direction ``side`` (-1 left, +1 right), shape (P, k)."""
    return (
        -spec.f_u(t, x, u, regime, side)
        + np.einsum("pal,pa->pl", spec.b_u(t, x, u, regime, side), p)
        + np.einsum("pabl,pab->pl", spec.sigma_u(t, x, u, regime, side), q)
    )
