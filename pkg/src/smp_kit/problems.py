"""Declarative affine/quadratic problem family with per-regime constants.

With regime ``i`` and |u| taken coordinatewise:

    b(x, u, i)     = b0 + Bx x + Bu u + Babs |u|
    sigma(x, u, i) = S0 + Sx.x + Su.u + Sabs.|u|          (n x m)
    f(x, u, i)     = c0 + cx.x + cu.u + x'Axx x + x'Axu u + u'Auu u + cabs.|u|
    h(x, i)        = h0 + hx.x + x'Hxx x

Every coefficient may be given once (shared by all regimes) or per regime.
The family covers the standard linear-quadratic examples and keeps user
problems expressible as plain JSON.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np
from numpy.typing import NDArray

from .chain import GeneratorMatrix
from .clarke import ConvexBox
from .dynamics import ProblemSpec
from .errors import ConfigurationError

Array = NDArray[np.float64]

# coefficient name -> (json block, json key, shape builder from (n, m, k))
_SHAPES = {
    "b0": ("drift", "const", lambda n, m, k: (n,)),
    "bx": ("drift", "x", lambda n, m, k: (n, n)),
    "bu": ("drift", "u", lambda n, m, k: (n, k)),
    "babs": ("drift", "abs_u", lambda n, m, k: (n, k)),
    "s0": ("diffusion", "const", lambda n, m, k: (n, m)),
    "sx": ("diffusion", "x", lambda n, m, k: (n, m, n)),
    "su": ("diffusion", "u", lambda n, m, k: (n, m, k)),
    "sabs": ("diffusion", "abs_u", lambda n, m, k: (n, m, k)),
    "c0": ("running_cost", "const", lambda n, m, k: ()),
    "cx": ("running_cost", "x", lambda n, m, k: (n,)),
    "cu": ("running_cost", "u", lambda n, m, k: (k,)),
    "cxx": ("running_cost", "xx", lambda n, m, k: (n, n)),
    "cxu": ("running_cost", "xu", lambda n, m, k: (n, k)),
    "cuu": ("running_cost", "uu", lambda n, m, k: (k, k)),
    "cabs": ("running_cost", "abs_u", lambda n, m, k: (k,)),
    "h0": ("terminal_cost", "const", lambda n, m, k: ()),
    "hx": ("terminal_cost", "x", lambda n, m, k: (n,)),
    "hxx": ("terminal_cost", "xx", lambda n, m, k: (n, n)),
}
_BLOCKS = ("drift", "diffusion", "running_cost", "terminal_cost")
_TOP_KEYS = {"name", "dimensions", "horizon", "x0", "i0", "generator", "constraint", *_BLOCKS}


def abs_slope(u: Array, side: int) -> Array:
    """One-sided derivative of |u|: sign(u), or ``side`` at u = 0."""
    return np.where(u > 0, 1.0, np.where(u < 0, -1.0, float(side)))


@dataclass(frozen=True)
class AffineQuadraticProblem:
    """Coefficient arrays, each with a leading regime axis of length d."""

    n: int
    m: int
    k: int
    T: float
    x0: Array
    i0: int
    generator: GeneratorMatrix
    constraint: ConvexBox
    coefficients: Mapping[str, Array]
    name: str = ""

    @classmethod
    def create(
        cls,
        n: int,
        m: int,
        k: int,
        T: float,
        x0,
        i0: int,
        generator,
        constraint: ConvexBox,
        name: str = "",
        **coefficients,
    ) -> "AffineQuadraticProblem":
        """Build from keyword coefficients; omitted ones are zero.

        A coefficient may have the base shape (shared) or a leading regime
        axis.  Scalars are accepted when the base shape has one element.
        """
        Q = generator if isinstance(generator, GeneratorMatrix) else GeneratorMatrix(generator)
        unknown = set(coefficients) - set(_SHAPES)
        if unknown:
            raise ConfigurationError(f"unknown coefficient(s): {sorted(unknown)}")
        coefs = {}
        for key, (_, _, shape_fn) in _SHAPES.items():
            shape = shape_fn(n, m, k)
            coefs[key] = _per_regime(coefficients.get(key, np.zeros(shape)), shape, Q.d, key)
        return cls(n, m, k, float(T), np.atleast_1d(np.asarray(x0, dtype=np.float64)), int(i0), Q, constraint, coefs, name)

    @property
    def d(self) -> int:
        return self.generator.d

    def has_abs_terms(self) -> NDArray[np.bool_]:
        c = self.coefficients
        per_coord = (
            np.any(c["babs"] != 0, axis=(0, 1))
            | np.any(c["sabs"] != 0, axis=(0, 1, 2))
            | np.any(c["cabs"] != 0, axis=0)
        )
        return per_coord

    def lipschitz_bound(self) -> float:
        """Upper bound on the (x, u)-Lipschitz constant of b and sigma."""
        c = self.coefficients
        K = 0.0
        for i in range(self.d):
            for pre in ("b", "s"):
                kx = np.linalg.norm(c[pre + "x"][i])
                ku = np.linalg.norm(c[pre + "u"][i]) + np.linalg.norm(c[pre + "abs"][i])
                K = max(K, kx, ku)
        return float(K)

    # -- conversion ---------------------------------------------------------

    def to_spec(self) -> ProblemSpec:
        c = {key: np.asarray(v) for key, v in self.coefficients.items()}

        def drift(t, x, u, i):
            return (
                c["b0"][i]
                + np.einsum("pab,pb->pa", c["bx"][i], x)
                + np.einsum("pab,pb->pa", c["bu"][i], u)
                + np.einsum("pab,pb->pa", c["babs"][i], np.abs(u))
            )

        def diffusion(t, x, u, i):
            return (
                c["s0"][i]
                + np.einsum("pabc,pc->pab", c["sx"][i], x)
                + np.einsum("pabc,pc->pab", c["su"][i], u)
                + np.einsum("pabc,pc->pab", c["sabs"][i], np.abs(u))
            )

        def running_cost(t, x, u, i):
            return (
                c["c0"][i]
                + np.einsum("pa,pa->p", c["cx"][i], x)
                + np.einsum("pa,pa->p", c["cu"][i], u)
                + np.einsum("pa,pab,pb->p", x, c["cxx"][i], x)
                + np.einsum("pa,pab,pb->p", x, c["cxu"][i], u)
                + np.einsum("pa,pab,pb->p", u, c["cuu"][i], u)
                + np.einsum("pa,pa->p", c["cabs"][i], np.abs(u))
            )

        def terminal_cost(x, i):
            return c["h0"][i] + np.einsum("pa,pa->p", c["hx"][i], x) + np.einsum("pa,pab,pb->p", x, c["hxx"][i], x)

        def drift_x(t, x, u, i):
            return np.array(c["bx"][i])

        def diffusion_x(t, x, u, i):
            return np.array(c["sx"][i])

        def running_cost_x(t, x, u, i):
            A = c["cxx"][i]
            return c["cx"][i] + np.einsum("pab,pb->pa", A + np.swapaxes(A, 1, 2), x) + np.einsum("pab,pb->pa", c["cxu"][i], u)

        def terminal_cost_x(x, i):
            A = c["hxx"][i]
            return c["hx"][i] + np.einsum("pab,pb->pa", A + np.swapaxes(A, 1, 2), x)

        def drift_u(t, x, u, i, side):
            return c["bu"][i] + c["babs"][i] * abs_slope(u, side)[:, None, :]

        def diffusion_u(t, x, u, i, side):
            return c["su"][i] + c["sabs"][i] * abs_slope(u, side)[:, None, None, :]

        def running_cost_u(t, x, u, i, side):
            A = c["cuu"][i]
            return (
                c["cu"][i]
                + np.einsum("pab,pb->pa", A + np.swapaxes(A, 1, 2), u)
                + np.einsum("pab,pa->pb", c["cxu"][i], x)
                + c["cabs"][i] * abs_slope(u, side)
            )

        kinks = self.has_abs_terms()
        return ProblemSpec(
            n=self.n,
            m=self.m,
            k=self.k,
            T=self.T,
            x0=self.x0,
            i0=self.i0,
            generator=self.generator,
            constraint=self.constraint,
            drift=drift,
            diffusion=diffusion,
            running_cost=running_cost,
            terminal_cost=terminal_cost,
            drift_x=drift_x,
            diffusion_x=diffusion_x,
            running_cost_x=running_cost_x,
            terminal_cost_x=terminal_cost_x,
            drift_u=drift_u,
            diffusion_u=diffusion_u,
            running_cost_u=running_cost_u,
            u_breakpoints=tuple((0.0,) if kinks[a] else () for a in range(self.k)),
            lipschitz_constant=self.lipschitz_bound() * (1 + 1e-9) + 1e-12,
            name=self.name,
        )

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "name": self.name,
            "dimensions": {"n": self.n, "m": self.m, "k": self.k},
            "horizon": self.T,
            "x0": self.x0.tolist(),
            "i0": self.i0,
            "generator": self.generator.to_list(),
            "constraint": {
                "lower": [None if np.isinf(v) else float(v) for v in self.constraint.lower],
                "upper": [None if np.isinf(v) else float(v) for v in self.constraint.upper],
            },
        }
        for block in _BLOCKS:
            out[block] = {}
        for key, (block, jkey, _) in _SHAPES.items():
            arr = self.coefficients[key]
            if not np.any(arr):
                continue
            if np.all(arr == arr[0]):
                out[block][jkey] = arr[0].tolist()
            else:
                out[block][jkey] = {"per_regime": arr.tolist()}
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AffineQuadraticProblem":
        if not isinstance(data, Mapping):
            raise ConfigurationError("problem must be a JSON object")
        unknown = set(data) - _TOP_KEYS
        if unknown:
            raise ConfigurationError(f"unknown problem key(s): {sorted(unknown)}")
        for key in ("dimensions", "horizon", "x0", "generator", "constraint"):
            if key not in data:
                raise ConfigurationError(f"problem is missing required key {key!r}")
        dims = data["dimensions"]
        if not isinstance(dims, Mapping) or set(dims) != {"n", "m", "k"}:
            raise ConfigurationError("'dimensions' must be an object with integer keys n, m, k")
        n, m, k = (_int(dims[a], f"dimensions.{a}") for a in ("n", "m", "k"))
        cons = data["constraint"]
        if not isinstance(cons, Mapping) or set(cons) != {"lower", "upper"}:
            raise ConfigurationError("'constraint' must be an object with keys lower, upper")
        lower = [-np.inf if v is None else _float(v, "constraint.lower") for v in _list(cons["lower"], "constraint.lower")]
        upper = [np.inf if v is None else _float(v, "constraint.upper") for v in _list(cons["upper"], "constraint.upper")]
        coefs = {}
        by_block = {(b, j): key for key, (b, j, _) in _SHAPES.items()}
        for block in _BLOCKS:
            entries = data.get(block, {}) or {}
            if not isinstance(entries, Mapping):
                raise ConfigurationError(f"{block!r} must be an object")
            for jkey, value in entries.items():
                if (block, jkey) not in by_block:
                    allowed = sorted(j for b, j in by_block if b == block)
                    raise ConfigurationError(f"unknown key {block}.{jkey}; expected one of {allowed}")
                if isinstance(value, Mapping):
                    if set(value) != {"per_regime"}:
                        raise ConfigurationError(f"{block}.{jkey} object form must be {{'per_regime': [...]}}")
                    value = _PerRegime(value["per_regime"])
                coefs[by_block[(block, jkey)]] = value
        try:
            return cls.create(
                n,
                m,
                k,
                _float(data["horizon"], "horizon"),
                data["x0"],
                _int(data.get("i0", 0), "i0"),
                data["generator"],
                ConvexBox(lower, upper),
                name=str(data.get("name", "")),
                **coefs,
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(str(exc)) from exc


class _PerRegime(list):
    """Marker for an explicitly per-regime coefficient list."""


def _per_regime(value, shape: tuple[int, ...], d: int, key: str) -> Array:
    size = int(np.prod(shape)) if shape else 1
    if isinstance(value, _PerRegime):
        if len(value) != d:
            raise ConfigurationError(f"coefficient {key!r}: per_regime needs {d} entries, got {len(value)}")
        rows = [_reshape(v, shape, size, key) for v in value]
        return np.stack(rows)
    arr = np.asarray(value, dtype=np.float64)
    if arr.size == size:
        return np.broadcast_to(arr.reshape(shape), (d,) + shape).copy()
    if arr.shape == (d,) + shape or (arr.ndim >= 1 and arr.shape[0] == d and arr[0].size == size):
        return arr.reshape((d,) + shape).copy()
    raise ConfigurationError(f"coefficient {key!r} has shape {arr.shape}; expected {shape} or ({d},) + {shape}")


def _reshape(value, shape, size, key):
    arr = np.asarray(value, dtype=np.float64)
    if arr.size != size:
        raise ConfigurationError(f"coefficient {key!r} entry has {arr.size} elements; expected shape {shape}")
    return arr.reshape(shape)


def _int(value, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigurationError(f"{key!r} must be an integer, got {type(value).__name__}")
    return int(value)


def _float(value, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float, np.number)):
        raise ConfigurationError(f"{key!r} must be a number, got {type(value).__name__}")
    return float(value)


def _list(value, key: str) -> list:
    if not isinstance(value, (list, tuple)):
        raise ConfigurationError(f"{key!r} must be a list")
    return list(value)
