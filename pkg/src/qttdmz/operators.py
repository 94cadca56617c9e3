"""Offline stage: QTT finite-difference operators for the frozen-observation forward equation.

The forward equation on the box with zero Dirichlet data reads

    du/dt = (q/2) Lap u - div(f u) - (|h|^2 / (2 s)) u

and is discretized with second-order central differences in space and
explicit Euler in time. Every operator here acts on the ``n**d`` interior
nodes of a :class:`~qttdmz.polyadic.Grid` in QTT layout.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import container
from .errors import DomainError
from .polyadic import Grid, PolyadicFunction, component_bounds, partial_difference_bounds
from .qtt import qtt_identity, qtt_ones, qtt_operator_from_matrix, qtt_vector, qtt_from_dense
from .tt import (
    TruncationPolicy,
    TtOperator,
    TtVector,
    tt_compose,
    tt_diag,
    tt_kron_all,
    tt_round,
    tt_sum,
)

GRID_SAMPLE_CAP = 2**20


@dataclass(frozen=True)
class SolverParams:
    """Time stepping and truncation settings.

    ``potential_weight`` multiplies ``|h|^2/(2s)`` in the generator; 1 gives
    the forward equation exactly.
    """

    dt: float
    n_substeps: int
    q: float
    s: float
    eps1: float = 1e-8
    eps2: float = 1e-8
    c_tilde: Optional[float] = None
    max_rank: Optional[int] = None
    potential_weight: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError(f"observation interval must be positive, got {self.dt}")
        if int(self.n_substeps) != self.n_substeps or self.n_substeps < 1:
            raise DomainError(f"substep count must be a positive integer, got {self.n_substeps}")
        if self.q < 0 or not self.s > 0:
            raise DomainError(f"need q >= 0 and s > 0, got q={self.q}, s={self.s}")
        object.__setattr__(self, "n_substeps", int(self.n_substeps))

    @property
    def tau(self) -> float:
        return self.dt / self.n_substeps

    def policy1(self) -> TruncationPolicy:
        return TruncationPolicy(self.eps1, self.max_rank)

    def policy2(self) -> TruncationPolicy:
        return TruncationPolicy(self.eps2, self.max_rank)


# --- 1D stencils ---------------------------------------------------------------


def second_difference(n: int, dx: float) -> np.ndarray:
    """``tridiag(1, -2, 1) / dx**2`` on ``n`` interior nodes."""
    return (np.diag(np.full(n - 1, 1.0), -1) - 2.0 * np.eye(n) + np.diag(np.full(n - 1, 1.0), 1)) / dx**2


def central_difference(n: int, dx: float) -> np.ndarray:
    """``tridiag(-1, 0, 1) / (2 dx)`` on ``n`` interior nodes."""
    return (np.diag(np.full(n - 1, 1.0), 1) - np.diag(np.full(n - 1, 1.0), -1)) / (2.0 * dx)


def _axis_operator(grid: Grid, axis: int, mat) -> TtOperator:
    """``I x ... x mat x ... x I`` with ``mat`` acting on ``axis``."""
    L = grid.levels
    parts = [qtt_identity([L]) for _ in range(grid.d)]
    parts[axis] = qtt_operator_from_matrix(mat, [L])
    return tt_kron_all(parts)


def qtt_zero_operator(grid: Grid) -> TtOperator:
    return TtOperator([np.zeros((1, 2, 2, 1))] * (grid.d * grid.levels))


def build_laplacian(grid: Grid, policy: TruncationPolicy = TruncationPolicy()) -> TtOperator:
    """Kronecker sum of 1D second differences with zero Dirichlet closure."""
    terms = [_axis_operator(grid, i, second_difference(grid.n, grid.spacing[i])) for i in range(grid.d)]
    return tt_round(tt_sum(terms, policy), policy)


# --- polyadic fields in QTT --------------------------------------------------


def component_qtt(f: PolyadicFunction, k: int, grid: Grid, policy: TruncationPolicy) -> TtVector:
    """QTT vector of ``f_k`` on the grid, built from per-group dense blocks.

    Each factor is evaluated on its own sub-meshgrid (at most ``n**|group|``
    entries), compressed, and joined by Kronecker products; terms are summed
    with rounding.
    """
    if f.d != grid.d:
        raise DomainError(f"field dimension {f.d} != grid dimension {grid.d}")
    L = grid.levels
    terms = []
    for t in f.components[k]:
        blocks = dict(t.factors)
        parts = []
        for g, axes in enumerate(f.groups):
            if g in blocks:
                parts.append(qtt_from_dense(f.factor_on_grid(blocks[g], g, grid), policy))
            else:
                parts.append(qtt_ones([L] * len(axes)))
        terms.append(tt_kron_all(parts) * t.coef)
    if not terms:
        return TtVector([np.zeros((1, 2, 1))] * (grid.d * L))
    return tt_round(tt_sum(terms, policy), policy)


def build_convection(grid: Grid, f: PolyadicFunction, policy: TruncationPolicy = TruncationPolicy()) -> TtOperator:
    """``C = sum_i D_i diag(f_i)`` with ``D_i`` the central difference along axis ``i``."""
    if f.m != grid.d or f.d != grid.d:
        raise DomainError(f"drift must map R^{grid.d} to R^{grid.d}, got {f.d} -> {f.m}")
    terms = []
    for i in range(grid.d):
        if not f.components[i]:
            continue
        shift = _axis_operator(grid, i, central_difference(grid.n, grid.spacing[i]))
        terms.append(tt_compose(shift, tt_diag(component_qtt(f, i, grid, policy)), policy))
    if not terms:
        return qtt_zero_operator(grid)
    return tt_round(tt_sum(terms, policy), policy)


def _rank1(grid: Grid, factors: dict, policy) -> TtVector:
    """Kronecker product of 1D profiles; axes missing from ``factors`` get ones."""
    L = grid.levels
    return tt_kron_all(qtt_vector(factors[a], policy) if a in factors else qtt_ones([L]) for a in range(grid.d))


def squared_norm_qtt(grid: Grid, h: PolyadicFunction, policy: TruncationPolicy) -> TtVector:
    """QTT vector of ``|h(x)|^2`` via the square and cross-term expansion."""
    if h.d != grid.d:
        raise DomainError(f"observation dimension {h.d} != grid dimension {grid.d}")
    terms = []
    for k in range(h.m):
        prof = h.axis_profiles(k, grid)
        live = [l for l in range(grid.d) if np.any(prof[l])]
        for l in live:
            terms.append(_rank1(grid, {l: prof[l] ** 2}, policy))
        for a, l in enumerate(live):
            for j in live[a + 1:]:
                terms.append(_rank1(grid, {l: prof[l], j: prof[j]}, policy) * 2.0)
    if not terms:
        return TtVector([np.zeros((1, 2, 1))] * (grid.d * grid.levels))
    return tt_round(tt_sum(terms, policy), policy)


def build_potential(grid: Grid, h: PolyadicFunction, s: float, policy: TruncationPolicy = TruncationPolicy()) -> TtOperator:
    """``diag(|h|^2) / (2 s)`` for a field made of single-variable terms."""
    if not s > 0:
        raise DomainError(f"observation noise variance must be positive, got {s}")
    return tt_diag(squared_norm_qtt(grid, h, policy) * (0.5 / s))


def assemble_generator(grid: Grid, f: PolyadicFunction, h: PolyadicFunction, params: SolverParams) -> TtOperator:
    """``A = (q/2) Lap - C - w |h|^2/(2s)`` with ``w = params.potential_weight``, rounded at eps1."""
    pol = params.policy1()
    parts = []
    if params.q != 0:
        parts.append(build_laplacian(grid, pol) * (0.5 * params.q))
    parts.append(-build_convection(grid, f, pol))
    if params.potential_weight != 0:
        parts.append(-build_potential(grid, h, params.s, pol) * params.potential_weight)
    return tt_round(tt_sum(parts, pol), pol)


# --- propagator ---------------------------------------------------------------


def propagator_power(generator: TtOperator, tau: float, n_substeps: int, policy: TruncationPolicy) -> TtOperator:
    """``(I + tau A)^n`` by square-and-multiply, rounding after every product."""
    if n_substeps < 1:
        raise DomainError(f"substep count must be >= 1, got {n_substeps}")
    ident = TtOperator([np.eye(n).reshape(1, n, n, 1) for n in generator.row_shape])
    if tau == 0:
        return ident
    step = tt_round(ident + generator * tau, policy)
    result = None
    base = step
    k = int(n_substeps)
    while k:
        if k & 1:
            result = base if result is None else tt_compose(result, base, policy)
        k >>= 1
        if k:
            base = tt_compose(base, base, policy)
    return result


def build_propagator(generator: TtOperator, params: SolverParams, policy: TruncationPolicy | None = None) -> TtOperator:
    """One observation interval of explicit Euler substeps, rounded at eps2."""
    policy = params.policy2() if policy is None else policy
    return propagator_power(generator, params.tau, params.n_substeps, policy)


def choose_substeps(grid: Grid, q: float, dt: float, max_potential: float = 0.0, safety: float = 0.9) -> int:
    """Smallest substep count keeping the explicit Euler diagonal nonnegative.

    Requires ``tau * (q d / dx_min**2 + max_potential) <= safety``, which also
    implies the strict diffusion-number condition ``tau / dx**2 < 1/(q d)``.
    """
    rate = q * grid.d / float(np.min(grid.spacing)) ** 2 + max_potential
    if rate <= 0:
        return 1
    return max(1, math.ceil(dt * rate / safety - 1e-12))


# --- stability ---------------------------------------------------------------


@dataclass(frozen=True)
class StabilityReport:
    """Model bounds, the three mesh conditions and their margins."""

    c_f: float
    c_h: float
    l_f: float
    c_tilde: float
    dx: float
    dx_min: float
    tau: float
    mesh_peclet_ok: bool
    diffusion_number_ok: bool
    c_tilde_ok: bool
    c_tilde_exceeds_d_cf: bool
    margin_peclet: float
    margin_diffusion: float
    margin_c_tilde: float
    growth_bound: float
    estimator: str
    c_k: Optional[float] = None

    @property
    def ok(self) -> bool:
        return self.mesh_peclet_ok and self.diffusion_number_ok and self.c_tilde_ok

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ok"] = self.ok
        return out


def evaluate_conditions(*, dx, dx_min, tau, q, d, c_f, c_h, dt, s, c_tilde=None, l_f=float("nan"), estimator="given", c_k=None) -> StabilityReport:
    """Evaluate the mesh conditions for given bounds.

    ``dx < q / C_f``, ``tau / dx_min**2 < 1/(q d)`` (both strict) and
    ``dx / tau <= C~``. When ``c_tilde`` is omitted the smallest admissible
    value ``max(dx / tau, d C_f)`` (nudged above ``d C_f``) is used.
    """
    if not tau > 0:
        raise DomainError(f"inner step must be positive, got {tau}")
    if c_tilde is None:
        c_tilde = max(dx / tau, d * c_f * (1 + 1e-12), 1e-300)
    peclet_limit = q / c_f if c_f > 0 else math.inf
    diff_limit = 1.0 / (q * d) if q > 0 else math.inf
    ratio = tau / dx_min**2
    rate = dt * (2.0 * c_f * c_tilde / q + c_h**2 / (2.0 * s)) if q > 0 and s > 0 else math.inf
    growth = math.exp(rate) if rate < 700.0 else math.inf
    return StabilityReport(
        c_f=float(c_f),
        c_h=float(c_h),
        l_f=float(l_f),
        c_tilde=float(c_tilde),
        dx=float(dx),
        dx_min=float(dx_min),
        tau=float(tau),
        mesh_peclet_ok=bool(dx < peclet_limit),
        diffusion_number_ok=bool(ratio < diff_limit),
        c_tilde_ok=bool(dx / tau <= c_tilde),
        c_tilde_exceeds_d_cf=bool(c_tilde > d * c_f),
        margin_peclet=float(peclet_limit - dx),
        margin_diffusion=float(diff_limit - ratio),
        margin_c_tilde=float(c_tilde - dx / tau),
        growth_bound=float(growth),
        estimator=estimator,
        c_k=c_k,
    )


def model_bounds(grid: Grid, f: PolyadicFunction, h: PolyadicFunction, sample_cap: int = GRID_SAMPLE_CAP):
    """Estimate ``(C_f, C_h, L_f, estimator)``.

    ``C_f`` is the largest per-component sup of ``|f_k|``, ``C_h`` the sup of
    the Euclidean norm of ``h``, and ``L_f`` the largest row sum of
    neighbour difference quotients. Small grids are sampled exhaustively;
    larger ones fall back to factor-wise upper bounds.
    """
    if grid.size * max(f.m, h.m, 1) <= sample_cap:
        fv = f.on_grid(grid)
        hv = h.on_grid(grid)
        c_f = float(np.abs(fv).max()) if fv.size else 0.0
        c_h = float(np.sqrt((hv**2).sum(axis=0)).max()) if hv.size else 0.0
        quot = np.zeros((f.m, grid.d))
        for k in range(f.m):
            for i in range(grid.d):
                if grid.n > 1:
                    quot[k, i] = np.abs(np.diff(fv[k], axis=i)).max() / grid.spacing[i]
        l_f = float(quot.sum(axis=1).max()) if f.m else 0.0
        return c_f, c_h, l_f, "grid"
    bf = component_bounds(f, grid)
    bh = component_bounds(h, grid)
    lf = partial_difference_bounds(f, grid)
    return (
        float(bf.max()) if bf.size else 0.0,
        float(np.sqrt((bh**2).sum())),
        float(lf.sum(axis=1).max()) if lf.size else 0.0,
        "polyadic-bound",
    )


def check_stability(grid: Grid, f: PolyadicFunction, h: PolyadicFunction, params: SolverParams) -> StabilityReport:
    """Report on the mesh conditions; failures are reported, never raised."""
    c_f, c_h, l_f, how = model_bounds(grid, f, h)
    return evaluate_conditions(
        dx=float(np.max(grid.spacing)),
        dx_min=float(np.min(grid.spacing)),
        tau=params.tau,
        q=params.q,
        d=grid.d,
        c_f=c_f,
        c_h=c_h,
        dt=params.dt,
        s=params.s,
        c_tilde=params.c_tilde,
        l_f=l_f,
        estimator=how,
    )


def max_potential(grid: Grid, h: PolyadicFunction, s: float) -> float:
    """Upper bound on ``|h|^2/(2s)`` over the grid."""
    if grid.size * max(h.m, 1) <= GRID_SAMPLE_CAP:
        hv = h.on_grid(grid)
        return float((hv**2).sum(axis=0).max()) / (2 * s) if hv.size else 0.0
    return float((component_bounds(h, grid) ** 2).sum()) / (2 * s)


# --- checkpoints -----------------------------------------------------------------


def save_propagator(path, propagator: TtOperator, meta: dict) -> None:
    """Write ``<path>`` (binary cores) and ``<path>.json`` (metadata sidecar)."""
    path = Path(path)
    container.save(propagator, path)
    sidecar = dict(meta)
    sidecar["ranks"] = list(propagator.ranks)
    sidecar["cores"] = len(propagator.cores)
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_propagator(path):
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    return container.load(path), meta
