"""Online stage: propagate, assimilate and summarize the unnormalized density in QTT form."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .densities import ExpPolyadicDensity, SeparableDensity
from .errors import DegenerateStateError, DomainError, NumericalError
from .polyadic import Grid, PolyadicFunction, _check_cap
from .qtt import qtt_from_dense, qtt_ones, qtt_unfold, qtt_vector
from .tt import (
    TruncationPolicy,
    TtOperator,
    TtVector,
    tt_apply,
    tt_apply_round,
    tt_dot,
    tt_hadamard,
    tt_kron_all,
    tt_norm,
    tt_round,
)

LOG_MAX = math.log(np.finfo(float).max)


@dataclass(frozen=True)
class DensityState:
    """Unnormalized density on the grid plus bookkeeping.

    The density actually represented is ``exp(scale_log) * u``.
    """

    u: TtVector
    t: float = 0.0
    j: int = 0
    scale_log: float = 0.0
    degenerate: bool = False


# --- initial density -----------------------------------------------------------


def _pass_through(r: int) -> np.ndarray:
    g = np.zeros((r, 2, r))
    g[:, 0, :] = np.eye(r)
    g[:, 1, :] = np.eye(r)
    return g


def _embed(block: TtVector, axes: Sequence[int], grid: Grid) -> TtVector:
    """Place a QTT over ``axes`` (sorted) into the full grid layout.

    Axes before and after the block get all-ones cores; axes strictly
    inside its span get identity-on-rank cores so the bond passes through.
    """
    L = grid.levels
    axes = list(axes)
    cores = list(block.cores)
    out = []
    bond = 1
    for a in range(grid.d):
        if a in axes:
            k = axes.index(a)
            chunk = cores[k * L:(k + 1) * L]
            out.extend(chunk)
            bond = chunk[-1].shape[-1]
        elif axes[0] < a < axes[-1]:
            out.extend(_pass_through(bond) for _ in range(L))
        else:
            out.extend(np.ones((1, 2, 1)) for _ in range(L))
    return TtVector(out)


def _exp_term_qtt(exponent: PolyadicFunction, t, grid: Grid, policy) -> TtVector:
    groups = [g for g, _ in t.factors]
    axes = sorted(a for g in groups for a in exponent.groups[g])
    if not axes:
        return qtt_ones([grid.levels] * grid.d) * math.exp(t.coef)
    _check_cap(grid.n ** len(axes))
    val = np.full((grid.n,) * len(axes), t.coef)
    for g, fn in t.factors:
        block = exponent.factor_on_grid(fn, g, grid)
        shape = [1] * len(axes)
        for a in exponent.groups[g]:
            shape[axes.index(a)] = grid.n
        val = val * block.reshape(shape)
    return _embed(qtt_from_dense(np.exp(val), policy), axes, grid)


def _check_nonnegative(values, what):
    values = np.asarray(values)
    if np.any(values < 0):
        idx = np.unravel_index(int(np.argmin(values)), values.shape)
        raise DomainError(f"{what} is negative ({values[idx]:.3e}) at node {tuple(int(i) for i in idx)}")
    if not np.all(np.isfinite(values)):
        raise DomainError(f"{what} has non-finite samples")


def init_density(sigma0, grid: Grid, policy: TruncationPolicy) -> DensityState:
    """Compress the initial density on the interior nodes.

    Separable and exp-polyadic densities are assembled with Kronecker and
    Hadamard products; any other callable ``sigma0(x[..., d])`` is sampled
    densely (subject to the dense size cap).
    """
    L = grid.levels
    if isinstance(sigma0, SeparableDensity):
        if sigma0.d != grid.d:
            raise DomainError(f"density has {sigma0.d} factors for a {grid.d}-D grid")
        parts = []
        for i, fn in enumerate(sigma0.factors):
            vals = np.broadcast_to(np.asarray(fn(grid.nodes(i)), dtype=float), (grid.n,))
            _check_nonnegative(vals, f"initial density factor {i}")
            parts.append(qtt_vector(vals, policy))
        u = tt_kron_all(parts)
    elif isinstance(sigma0, ExpPolyadicDensity):
        if sigma0.d != grid.d:
            raise DomainError(f"density dimension {sigma0.d} != grid dimension {grid.d}")
        terms = sigma0.exponent.components[0]
        inner = TruncationPolicy(policy.eps / (10 * max(len(terms), 1)), policy.max_rank)
        u = qtt_ones([L] * grid.d)
        for t in terms:
            u = tt_round(tt_hadamard(u, _exp_term_qtt(sigma0.exponent, t, grid, inner)), inner)
        u = tt_round(u, TruncationPolicy(0.5 * policy.eps, policy.max_rank))
    elif callable(sigma0):
        _check_cap(grid.size)
        vals = np.asarray(sigma0(np.stack(grid.meshgrid(), axis=-1)), dtype=float).reshape(grid.shape)
        _check_nonnegative(vals, "initial density")
        u = qtt_from_dense(vals, policy)
    else:
        raise DomainError(f"cannot build an initial density from {type(sigma0).__name__}")
    return DensityState(u=u, degenerate=tt_norm(u) == 0.0)


# --- propagation and assimilation ----------------------------------------------


def predict(state: DensityState, propagator: TtOperator, policy: TruncationPolicy, dt: float = 0.0) -> DensityState:
    """Apply the precomputed interval propagator and round."""
    u = tt_apply_round(propagator, state.u, policy)
    return replace(state, u=u, t=state.t + dt)


def build_update_factor(
    h: PolyadicFunction,
    dy,
    s: float,
    grid: Grid,
    policy: TruncationPolicy,
    profiles: Optional[list] = None,
    fused: bool = True,
) -> TtVector:
    """QTT of ``exp(h(x) . dy / s)`` on the grid.

    Component ``k`` contributes the Kronecker product over axes of
    ``exp(h_k^(l)(x_l) dy_k / s)``. With ``fused=True`` the per-axis
    exponents are summed over ``k`` first, giving the same rank-1 product
    with ``d`` instead of ``m * d`` one-dimensional compressions; otherwise
    the per-component factors are combined by Hadamard products with
    rounding.

    Raises
    ------
    NumericalError
        If any entry of the factor would overflow a float64.
    """
    dy = np.asarray(dy, dtype=float).ravel()
    if dy.size != h.m:
        raise DomainError(f"increment has {dy.size} entries, observation has {h.m}")
    if profiles is None:
        profiles = [h.axis_profiles(k, grid) for k in range(h.m)]
    L = grid.levels
    active = [k for k in range(h.m) if dy[k] != 0.0]
    if not active:
        return qtt_ones([L] * grid.d)
    expo = np.zeros((grid.d, grid.n))
    for k in active:
        expo += np.stack(profiles[k]) * (dy[k] / s)
    peak = expo.max(axis=1)
    if peak.sum() > LOG_MAX or not np.all(np.isfinite(expo)):
        node = tuple(int(i) for i in expo.argmax(axis=1))
        x = tuple(float(grid.nodes(a)[i]) for a, i in enumerate(node))
        raise NumericalError(
            f"observation factor overflows: exponent {peak.sum():.1f} > {LOG_MAX:.1f} at node {node} (x = {x})"
        )
    if fused:
        return tt_kron_all(qtt_vector(np.exp(expo[a]), policy) for a in range(grid.d))
    out = None
    for k in active:
        fk = tt_kron_all(qtt_vector(np.exp(profiles[k][a] * dy[k] / s), policy) for a in range(grid.d))
        out = fk if out is None else tt_round(tt_hadamard(out, fk), policy)
    return out


def assimilate(state: DensityState, factor: TtVector, policy: TruncationPolicy) -> DensityState:
    u = tt_round(tt_hadamard(factor, state.u), policy)
    return replace(state, u=u, j=state.j + 1)


def rescale(state: DensityState) -> DensityState:
    """Divide by the Frobenius norm and accumulate its log."""
    norm = tt_norm(state.u)
    if not (norm > 0 and math.isfinite(norm)):
        raise DegenerateStateError(f"cannot rescale a density with norm {norm} at step {state.j}")
    return replace(state, u=state.u / norm, scale_log=state.scale_log + math.log(norm))


# --- statistics ---------------------------------------------------------------


def coordinate_tensors(grid: Grid, power: int = 1) -> list:
    """Rank-1 QTT tensors ``X_i ** power`` for every axis."""
    L = grid.levels
    out = []
    for i in range(grid.d):
        parts = [qtt_ones([L]) for _ in range(grid.d)]
        parts[i] = qtt_vector(grid.nodes(i) ** power)
        out.append(tt_kron_all(parts))
    return out


def _mass(state: DensityState, ones: TtVector) -> float:
    m = tt_dot(state.u, ones)
    if not m > 0:
        raise DegenerateStateError(f"density mass {m} is not positive at step {state.j}")
    return m


def estimate_moments(state: DensityState, grid: Grid, second: bool = False, cache: Optional[dict] = None):
    """Conditional mean per axis (and optionally per-axis second moments).

    Uses the rectangle rule on interior nodes; the uniform cell volume
    cancels between numerator and denominator.
    """
    cache = {} if cache is None else cache
    # single-key writes so threads sharing one filter never see a half-filled cache
    if "x1" not in cache:
        cache["x1"] = coordinate_tensors(grid, 1)
    if "ones" not in cache:
        cache["ones"] = qtt_ones([grid.levels] * grid.d)
    mass = _mass(state, cache["ones"])
    mean = np.array([tt_dot(state.u, x) for x in cache["x1"]]) / mass
    if not second:
        return mean
    if "x2" not in cache:
        cache["x2"] = coordinate_tensors(grid, 2)
    return mean, np.array([tt_dot(state.u, x) for x in cache["x2"]]) / mass


def export_marginal(state: DensityState, grid: Grid, axes) -> np.ndarray:
    """Marginal density over ``axes`` (one or two axes) as a dense array.

    Other axes are summed out; the result integrates to one with the
    rectangle rule, ``sum(out) * prod(dx[axes]) == 1``.
    """
    axes = (axes,) if np.isscalar(axes) else tuple(int(a) for a in axes)
    if not axes or len(set(axes)) != len(axes) or any(not 0 <= a < grid.d for a in axes):
        raise DomainError(f"invalid marginal axes {axes} for a {grid.d}-D grid")
    full = qtt_unfold(state.u, [grid.levels] * grid.d)
    acc = np.ones((1,))
    kept = []
    for a, c in enumerate(full.cores):
        if a in axes:
            acc = np.tensordot(acc, c, axes=(-1, 0))
            kept.append(a)
        else:
            acc = np.tensordot(acc, c.sum(axis=1), axes=(-1, 0))
    out = acc.reshape((grid.n,) * len(kept))
    out = np.transpose(out, [kept.index(a) for a in axes])
    total = out.sum() * float(np.prod(grid.spacing[list(axes)]))
    if not total > 0:
        raise DegenerateStateError(f"marginal mass {total} is not positive")
    return out / total


# --- filter driver ------------------------------------------------------------


@dataclass
class FilterRun:
    """Estimates and diagnostics of one online pass."""

    times: np.ndarray
    estimates: np.ndarray
    ranks: list = field(default_factory=list)
    online_seconds: float = 0.0
    scale_log: float = 0.0
    marginals: dict = field(default_factory=dict)


class DmzFilter:
    """Splitting filter driven by a precomputed interval propagator.

    Parameters
    ----------
    grid, h, s :
        Grid, observation field and observation-noise variance.
    propagator :
        ``(I + tau A)^n`` for one observation interval (see ``operators``).
    dt :
        Observation interval.
    policy :
        Rounding used online (the first tolerance).
    """

    def __init__(self, grid: Grid, h: PolyadicFunction, s: float, propagator: TtOperator, dt: float, policy: TruncationPolicy):
        self.grid = grid
        self.h = h
        self.s = float(s)
        self.propagator = propagator
        self.dt = float(dt)
        self.policy = policy
        self.profiles = [h.axis_profiles(k, grid) for k in range(h.m)]
        self._cache: dict = {}

    def initial_state(self, sigma0) -> DensityState:
        return init_density(sigma0, self.grid, self.policy)

    def step(self, state: DensityState, dy) -> DensityState:
        if state.degenerate:
            raise DegenerateStateError(f"density is identically zero at step {state.j}")
        state = predict(state, self.propagator, self.policy, self.dt)
        factor = build_update_factor(self.h, dy, self.s, self.grid, self.policy, self.profiles)
        state = assimilate(state, factor, self.policy)
        return rescale(state)

    def mean(self, state: DensityState) -> np.ndarray:
        return estimate_moments(state, self.grid, cache=self._cache)

    def run(
        self,
        sigma0,
        dys,
        marginal_every: int = 0,
        marginal_axes: Sequence = (),
        callback: Optional[Callable] = None,
    ) -> FilterRun:
        """Filter the increments ``dys[1:]`` (``dys[0]`` is the zero increment at ``t_0``).

        Returns estimates at every observation time including ``t_0``. Only
        the loop after the initial density is timed.
        """
        dys = np.asarray(dys, dtype=float)
        state = rescale(self.initial_state(sigma0))
        est = [self.mean(state)]
        ranks = [state.u.max_rank]
        marg = {}
        excluded = 0.0

        def grab(st):
            nonlocal excluded
            t0 = time.perf_counter()
            if marginal_every and st.j % marginal_every == 0:
                for ax in marginal_axes:
                    marg[(st.j, tuple(np.atleast_1d(ax)))] = export_marginal(st, self.grid, ax)
            if callback is not None:
                callback(st)
            excluded += time.perf_counter() - t0

        grab(state)
        excluded = 0.0
        start = time.perf_counter()
        for dy in dys[1:]:
            state = self.step(state, dy)
            est.append(self.mean(state))
            ranks.append(state.u.max_rank)
            grab(state)
        elapsed = time.perf_counter() - start - excluded
        times = self.dt * np.arange(len(est))
        return FilterRun(times, np.array(est), ranks, elapsed, state.scale_log, marg)
