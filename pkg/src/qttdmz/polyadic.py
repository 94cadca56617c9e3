"""Uniform interior grids and sum-of-products (polyadic) vector fields."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, ResourceError
from .qtt import levels_of

DENSE_CAP = 2**24


@dataclass(frozen=True)
class Grid:
    """Tensor grid of interior nodes on a box.

    Axis ``i`` spans ``(lower[i], upper[i])`` with spacing
    ``(upper - lower) / (n + 1)``; nodes are ``lower + k * spacing`` for
    ``k = 1..n``. The boundary nodes carry the zero Dirichlet value and are
    not stored.
    """

    lower: tuple
    upper: tuple
    n: int

    def __post_init__(self):
        lo = tuple(float(a) for a in np.atleast_1d(self.lower))
        hi = tuple(float(b) for b in np.atleast_1d(self.upper))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(lo) != len(hi) or not lo:
            raise DomainError("lower and upper bounds must have the same nonzero length")
        if any(not (a < b) for a, b in zip(lo, hi)):
            raise DomainError(f"each axis needs lower < upper, got {lo} / {hi}")
        if int(self.n) != self.n or self.n < 1:
            raise DomainError(f"interior node count must be a positive integer, got {self.n}")
        object.__setattr__(self, "n", int(self.n))

    @classmethod
    def cube(cls, d: int, lower: float, upper: float, n: int) -> "Grid":
        return cls((lower,) * d, (upper,) * d, n)

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def spacing(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / (self.n + 1)

    @property
    def levels(self) -> int:
        """Binary levels per axis; only defined when ``n`` is a power of two."""
        return levels_of(self.n)

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    def nodes(self, axis: int) -> np.ndarray:
        return self.lower[axis] + self.spacing[axis] * np.arange(1, self.n + 1)

    def meshgrid(self, axes: Sequence[int] | None = None):
        axes = range(self.d) if axes is None else axes
        return np.meshgrid(*(self.nodes(a) for a in axes), indexing="ij")

    def points(self) -> np.ndarray:
        """All nodes as an ``(n**d, d)`` array in C order."""
        _check_cap(self.size * self.d)
        return np.stack([m.ravel() for m in self.meshgrid()], axis=1)

    def radius(self) -> float:
        """Largest distance from the origin to a corner of the box."""
        corner = np.maximum(np.abs(self.lower), np.abs(self.upper))
        return float(np.linalg.norm(corner))


def _check_cap(size, cap=DENSE_CAP):
    if size > cap:
        raise ResourceError(f"dense evaluation of {size} entries exceeds cap {cap}")


@dataclass(frozen=True)
class Term:
    """``coef * prod_g factor_g(x[group g])``; groups without a factor contribute 1.

    ``factors`` maps a group index to a callable taking that group's
    coordinates as separate array arguments.
    """

    factors: tuple = ()
    coef: float = 1.0

    def groups(self):
        return [g for g, _ in self.factors]


def term(coef: float = 1.0, *pairs) -> Term:
    """Build a term from ``(group_index, callable)`` pairs."""
    seen = [g for g, _ in pairs]
    if len(set(seen)) != len(seen):
        raise DomainError(f"a term has two factors on the same group: {seen}")
    return Term(tuple(sorted(pairs, key=lambda p: p[0])), float(coef))


@dataclass(frozen=True)
class PolyadicFunction:
    """Vector field whose components are sums of products over variable groups.

    Parameters
    ----------
    d : int
        Number of input coordinates.
    groups : tuple of tuple of int
        Contiguous, ordered partition of ``range(d)``.
    components : tuple of tuple of Term
        ``components[k]`` lists the terms of output ``k``. An empty tuple is the
        zero function.
    """

    d: int
    groups: tuple
    components: tuple
    derivative: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "components", tuple(tuple(c) for c in self.components))
        flat = [i for g in groups for i in g]
        if flat != list(range(self.d)) or any(len(g) == 0 for g in groups):
            raise DomainError(f"groups {groups} are not a contiguous ordered partition of range({self.d})")
        for k, comp in enumerate(self.components):
            for t in comp:
                if not isinstance(t, Term):
                    raise DomainError(f"component {k} holds a non-Term entry {t!r}")
                for g, fn in t.factors:
                    if not 0 <= g < len(groups):
                        raise DomainError(f"component {k} refers to missing group {g}")
                    if not callable(fn):
                        raise DomainError(f"component {k} has a non-callable factor")

    @classmethod
    def univariate(cls, d: int, components) -> "PolyadicFunction":
        """Singleton groups; ``components[k]`` is a list of ``(axis, fn)`` or ``(axis, fn, coef)``."""
        comps = []
        for comp in components:
            terms = []
            for item in comp:
                axis, fn = item[0], item[1]
                coef = item[2] if len(item) > 2 else 1.0
                terms.append(term(coef, (axis, fn)))
            comps.append(tuple(terms))
        return cls(d, tuple((i,) for i in range(d)), tuple(comps))

    @classmethod
    def zero(cls, d: int, m: int | None = None) -> "PolyadicFunction":
        return cls(d, tuple((i,) for i in range(d)), ((),) * (d if m is None else m))

    @property
    def m(self) -> int:
        return len(self.components)

    @property
    def max_group_size(self) -> int:
        return max(len(g) for g in self.groups)

    @property
    def is_univariate(self) -> bool:
        return self.max_group_size == 1

    def _factor_value(self, fn, coords, shape):
        out = np.asarray(fn(*coords), dtype=float)
        return np.broadcast_to(out, shape)

    def __call__(self, x) -> np.ndarray:
        """Evaluate at points ``x`` of shape ``(..., d)``; returns ``(..., m)``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise DomainError(f"expected trailing dimension {self.d}, got {x.shape}")
        base = x.shape[:-1]
        out = np.zeros(base + (self.m,))
        for k, comp in enumerate(self.components):
            acc = np.zeros(base)
            for t in comp:
                val = np.full(base, t.coef)
                for g, fn in t.factors:
                    val = val * self._factor_value(fn, [x[..., i] for i in self.groups[g]], base)
                acc = acc + val
            out[..., k] = acc
        return out

    def factor_on_grid(self, fn, group: int, grid: Grid) -> np.ndarray:
        """Dense values of a factor on its group's sub-meshgrid, shape ``(n,)*|group|``."""
        axes = self.groups[group]
        _check_cap(grid.n ** len(axes))
        shape = (grid.n,) * len(axes)
        return np.array(self._factor_value(fn, grid.meshgrid(axes), shape))

    def on_grid(self, grid: Grid) -> np.ndarray:
        """Dense values on the full grid, shape ``(m, n, ..., n)``."""
        if grid.d != self.d:
            raise DomainError(f"grid dimension {grid.d} != function dimension {self.d}")
        _check_cap(grid.size * max(self.m, 1))
        out = np.zeros((self.m,) + grid.shape)
        for k, comp in enumerate(self.components):
            for t in comp:
                val = np.full(grid.shape, t.coef)
                for g, fn in t.factors:
                    axes = self.groups[g]
                    block = self.factor_on_grid(fn, g, grid)
                    shape = [1] * self.d
                    for a in axes:
                        shape[a] = grid.n
                    val = val * block.reshape(shape)
                out[k] += val
        return out

    def axis_profiles(self, k: int, grid: Grid) -> list:
        """For a univariate field, the per-axis 1D summands of component ``k``.

        Constant terms are folded into the first axis so that the component
        equals ``sum_l profiles[l][x_l]`` exactly.
        """
        if not self.is_univariate:
            raise DomainError("per-axis profiles need singleton variable groups")
        prof = [np.zeros(grid.n) for _ in range(self.d)]
        for t in self.components[k]:
            if not t.factors:
                prof[0] = prof[0] + t.coef
                continue
            if len(t.factors) > 1:
                raise DomainError(
                    f"component {k} has a product of {len(t.factors)} univariate factors; "
                    "only sums of single-variable terms are supported here"
                )
            g, fn = t.factors[0]
            prof[g] = prof[g] + t.coef * self.factor_on_grid(fn, g, grid)
        return prof


def linear_polyadic(matrix) -> PolyadicFunction:
    """``x -> B x`` with univariate terms ``B[k, i] * x_i``."""
    mat = np.atleast_2d(np.asarray(matrix, dtype=float))
    m, d = mat.shape
    comps = []
    for k in range(m):
        comps.append([(i, _identity, mat[k, i]) for i in range(d) if mat[k, i] != 0.0])
    return PolyadicFunction.univariate(d, comps)


def _identity(x):
    return x


def component_bounds(f: PolyadicFunction, grid: Grid) -> np.ndarray:
    """Per-component upper bound on ``sup |f_k|`` from factor suprema (never densifies)."""
    out = np.zeros(f.m)
    for k, comp in enumerate(f.components):
        for t in comp:
            b = abs(t.coef)
            for g, fn in t.factors:
                b *= float(np.max(np.abs(f.factor_on_grid(fn, g, grid))))
            out[k] += b
    return out


def partial_difference_bounds(f: PolyadicFunction, grid: Grid) -> np.ndarray:
    """Bound on ``max |f_k(x + dx e_i) - f_k(x)| / dx`` between grid neighbours, shape ``(m, d)``."""
    out = np.zeros((f.m, f.d))
    dx = grid.spacing
    for k, comp in enumerate(f.components):
        for t in comp:
            sups = {}
            blocks = {}
            for g, fn in t.factors:
                blocks[g] = f.factor_on_grid(fn, g, grid)
                sups[g] = float(np.max(np.abs(blocks[g])))
            for g, block in blocks.items():
                others = math.prod(v for h, v in sups.items() if h != g)
                for pos, axis in enumerate(f.groups[g]):
                    diff = np.abs(np.diff(block, axis=pos)) if grid.n > 1 else np.zeros(1)
                    out[k, axis] += abs(t.coef) * others * float(diff.max()) / dx[axis]
    return out
