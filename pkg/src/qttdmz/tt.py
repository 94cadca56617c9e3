"""Tensor-train vectors and operators.

Dense arrays use C order (last index fastest) throughout. A ``TtVector`` of
shape ``(n_1, ..., n_d)`` stores cores ``G_k`` of shape ``(r_{k-1}, n_k, r_k)``
with ``r_0 = r_d = 1``; a ``TtOperator`` stores cores of shape
``(r_{k-1}, n_k, m_k, r_k)`` mapping vectors with modes ``m_k`` to vectors
with modes ``n_k``.

All operations are pure: inputs are never modified and core arrays are
read-only after construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, NumericalError, RankOverflowError, ResourceError

DENSE_CAP = 2**24

# Fraction of the requested tolerance actually spent on truncation; the rest
# absorbs floating-point roundoff so the error contract holds strictly.
_BUDGET_FRACTION = 0.99


@dataclass(frozen=True)
class TruncationPolicy:
    """Relative Frobenius tolerance plus an optional hard rank cap.

    Exceeding ``max_rank`` raises :class:`RankOverflowError` instead of
    truncating silently.
    """

    eps: float = 0.0
    max_rank: Optional[int] = None

    def __post_init__(self):
        if not (self.eps >= 0.0) or not math.isfinite(self.eps):
            raise DomainError(f"tolerance must be finite and >= 0, got {self.eps}")
        if self.max_rank is not None and self.max_rank < 1:
            raise DomainError(f"max_rank must be positive, got {self.max_rank}")


EXACT = TruncationPolicy(0.0)


def _freeze(a):
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


class _TtBase:
    __slots__ = ("cores",)
    _core_ndim = 0

    def __init__(self, cores, *, copy=True):
        cores = tuple(_freeze(c) if copy else c for c in cores)
        if not cores:
            raise DomainError("a tensor train needs at least one core")
        for k, c in enumerate(cores):
            if c.ndim != self._core_ndim:
                raise DomainError(f"core {k} has {c.ndim} axes, expected {self._core_ndim}")
            if min(c.shape) < 1:
                raise DomainError(f"core {k} has an empty axis: {c.shape}")
        if cores[0].shape[0] != 1 or cores[-1].shape[-1] != 1:
            raise DomainError("boundary ranks must be 1")
        for k in range(len(cores) - 1):
            if cores[k].shape[-1] != cores[k + 1].shape[0]:
                raise DomainError(
                    f"rank mismatch between cores {k} and {k + 1}: "
                    f"{cores[k].shape[-1]} != {cores[k + 1].shape[0]}"
                )
        if not all(np.isfinite(c).all() for c in cores):
            raise NumericalError("tensor-train cores contain non-finite entries")
        self.cores = cores

    @property
    def ndim(self) -> int:
        return len(self.cores)

    @property
    def ranks(self) -> tuple:
        """Full rank list ``(1, r_1, ..., r_{d-1}, 1)``."""
        return (1,) + tuple(c.shape[-1] for c in self.cores)

    @property
    def max_rank(self) -> int:
        return max(self.ranks)

    @property
    def num_params(self) -> int:
        return sum(c.size for c in self.cores)

    def _with_cores(self, cores):
        return type(self)(cores, copy=False)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, alpha):
        if not np.isscalar(alpha):
            return NotImplemented
        cores = list(self.cores)
        cores[0] = _freeze(cores[0] * float(alpha))
        return self._with_cores(cores)

    __rmul__ = __mul__

    def __truediv__(self, alpha):
        return self * (1.0 / float(alpha))

    def __add__(self, other):
        return tt_add(self, other)

    def __sub__(self, other):
        return tt_add(self, -other)


class TtVector(_TtBase):
    """A d-way tensor in TT format with cores ``(r, n, r')``."""

    __slots__ = ()
    _core_ndim = 3

    @property
    def shape(self) -> tuple:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def __repr__(self):
        return f"TtVector(shape={self.shape}, ranks={self.ranks})"


class TtOperator(_TtBase):
    """A linear operator in TT format with cores ``(r, n, m, r')``."""

    __slots__ = ()
    _core_ndim = 4

    @property
    def row_shape(self) -> tuple:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def col_shape(self) -> tuple:
        return tuple(c.shape[2] for c in self.cores)

    def __matmul__(self, other):
        if isinstance(other, TtVector):
            return tt_apply(self, other)
        if isinstance(other, TtOperator):
            return tt_compose(self, other, EXACT)
        return NotImplemented

    def __repr__(self):
        return f"TtOperator(rows={self.row_shape}, cols={self.col_shape}, ranks={self.ranks})"


# --- linear algebra kernels -------------------------------------------------


def _svd(mat):
    """Thin SVD with a deterministic sign convention.

    The first entry of each left singular vector that is nonzero (relative to
    the column maximum) is made positive; the matching row of ``vt`` flips
    with it.
    """
    try:
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        if not np.all(np.isfinite(s)):
            raise np.linalg.LinAlgError("non-finite singular values")
    except np.linalg.LinAlgError:
        try:
            import scipy.linalg

            u, s, vt = scipy.linalg.svd(mat, full_matrices=False, lapack_driver="gesvd")
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(
                f"SVD did not converge on a {mat.shape} matrix "
                f"(norm {np.linalg.norm(mat):.3e}, finite={np.isfinite(mat).all()})"
            ) from exc
    if u.shape[1]:
        mags = np.abs(u)
        significant = mags > 1e-8 * mags.max(axis=0, keepdims=True)
        first = np.argmax(significant, axis=0)
        signs = np.sign(u[first, np.arange(u.shape[1])])
        signs[signs == 0] = 1.0
        u = u * signs
        vt = vt * signs[:, None]
    return u, s, vt


def _truncation_rank(s, delta, max_rank=None):
    """Smallest r >= 1 with ``||s[r:]||_2 <= delta``."""
    tail = np.append(np.cumsum((s * s)[::-1])[::-1], 0.0)
    ok = np.nonzero(tail[1:] <= delta * delta)[0]
    r = int(ok[0]) + 1 if ok.size else len(s)
    r = max(1, min(r, len(s)))
    if max_rank is not None and r > max_rank:
        raise RankOverflowError(
            f"tolerance needs rank {r} but max_rank is {max_rank}"
        )
    return r


def _numerical_rank(s, shape):
    """Rank with singular values at roundoff level dropped (matrix_rank rule)."""
    if s.size == 0 or s[0] == 0.0:
        return 1
    tol = s[0] * max(shape) * np.finfo(float).eps
    return max(1, int(np.count_nonzero(s > tol)))


def _step_budget(policy, norm, steps):
    if steps <= 0:
        return 0.0
    return _BUDGET_FRACTION * policy.eps * norm / math.sqrt(steps)


# --- construction and densification ----------------------------------------


def tt_from_dense(a, policy: TruncationPolicy = EXACT) -> TtVector:
    """TT-SVD of a dense array.

    The relative tolerance is split evenly (in the squared sense) across the
    ``d - 1`` sequential truncations, so the global Frobenius error is at most
    ``policy.eps * ||a||_F``.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim == 0 or a.size == 0:
        raise DomainError(f"cannot compress an empty tensor of shape {a.shape}")
    if not np.isfinite(a).all():
        raise DomainError("dense tensor contains non-finite entries")
    shape = a.shape
    d = len(shape)
    delta = _step_budget(policy, np.linalg.norm(a), d - 1)
    cores = []
    r = 1
    c = a
    for k in range(d - 1):
        c = c.reshape(r * shape[k], -1)
        u, s, vt = _svd(c)
        rk = _truncation_rank(s, delta, policy.max_rank)
        cores.append(u[:, :rk].reshape(r, shape[k], rk))
        c = s[:rk, None] * vt[:rk]
        r = rk
    cores.append(c.reshape(r, shape[-1], 1))
    return TtVector(cores)


def _check_cap(size, cap):
    if size > cap:
        raise ResourceError(f"dense size {size} exceeds cap {cap}")


def tt_to_dense(v: TtVector, cap: int = DENSE_CAP) -> np.ndarray:
    """Contract all cores into a dense array (small tensors only)."""
    _check_cap(v.size, cap)
    out = v.cores[0].reshape(v.cores[0].shape[1], -1)
    for c in v.cores[1:]:
        out = (out @ c.reshape(c.shape[0], -1)).reshape(-1, c.shape[-1])
    return out.reshape(v.shape)


def operator_to_dense(op: TtOperator, cap: int = DENSE_CAP) -> np.ndarray:
    """Materialize an operator as a ``(prod n, prod m)`` matrix."""
    rows, cols = math.prod(op.row_shape), math.prod(op.col_shape)
    _check_cap(rows * cols, cap)
    d = op.ndim
    out = op.cores[0].reshape(-1, op.cores[0].shape[-1])
    for c in op.cores[1:]:
        out = (out @ c.reshape(c.shape[0], -1)).reshape(-1, c.shape[-1])
    out = out.reshape(sum(((n, m) for n, m in zip(op.row_shape, op.col_shape)), ()))
    perm = list(range(0, 2 * d, 2)) + list(range(1, 2 * d, 2))
    return out.transpose(perm).reshape(rows, cols)


def operator_from_dense(mat, row_shape, col_shape, policy: TruncationPolicy = EXACT) -> TtOperator:
    """TT-SVD of a matrix viewed as a tensor with paired (row, col) modes."""
    row_shape, col_shape = tuple(row_shape), tuple(col_shape)
    if len(row_shape) != len(col_shape):
        raise DomainError("row and column mode lists differ in length")
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (math.prod(row_shape), math.prod(col_shape)):
        raise DomainError(f"matrix shape {mat.shape} does not match modes {row_shape} x {col_shape}")
    d = len(row_shape)
    t = mat.reshape(row_shape + col_shape)
    perm = [p for k in range(d) for p in (k, d + k)]
    t = t.transpose(perm).reshape([n * m for n, m in zip(row_shape, col_shape)])
    tt = tt_from_dense(t, policy)
    return TtOperator(
        [c.reshape(c.shape[0], n, m, c.shape[-1]) for c, n, m in zip(tt.cores, row_shape, col_shape)]
    )


def tt_ones(shape) -> TtVector:
    return TtVector([np.ones((1, n, 1)) for n in shape])


def tt_zeros(shape) -> TtVector:
    return TtVector([np.zeros((1, n, 1)) for n in shape])


def tt_rank1(vectors: Sequence) -> TtVector:
    """Outer product of 1D vectors as a rank-1 TT."""
    return TtVector([np.asarray(v, dtype=float).reshape(1, -1, 1) for v in vectors])


def tt_identity(shape) -> TtOperator:
    return TtOperator([np.eye(n).reshape(1, n, n, 1) for n in shape])


def tt_zero_operator(row_shape, col_shape=None) -> TtOperator:
    col_shape = row_shape if col_shape is None else col_shape
    return TtOperator([np.zeros((1, n, m, 1)) for n, m in zip(row_shape, col_shape)])


def tt_diag(v: TtVector) -> TtOperator:
    """Diagonal operator whose diagonal is ``v``."""
    cores = []
    for c in v.cores:
        r0, n, r1 = c.shape
        g = np.zeros((r0, n, n, r1))
        idx = np.arange(n)
        g[:, idx, idx, :] = c
        cores.append(g)
    return TtOperator(cores, copy=False)


def operator_diagonal(op: TtOperator) -> TtVector:
    """Extract the diagonal of a square operator as a TT vector."""
    if op.row_shape != op.col_shape:
        raise DomainError("diagonal of a non-square operator")
    return TtVector([np.einsum("aiib->aib", c) for c in op.cores])


# --- orthogonalization and rounding -----------------------------------------


def _flat(cores):
    return [c.reshape(c.shape[0], -1, c.shape[-1]) for c in cores]


def _right_orthogonalize(cores):
    """Make cores 1..d-1 right-orthonormal; returns new list (3-way cores)."""
    cores = list(cores)
    for k in range(len(cores) - 1, 0, -1):
        r0, n, r1 = cores[k].shape
        q, rr = np.linalg.qr(cores[k].reshape(r0, n * r1).T)
        cores[k] = q.T.reshape(q.shape[1], n, r1)
        cores[k - 1] = np.tensordot(cores[k - 1], rr.T, axes=(2, 0))
    return cores


def _round_cores(cores, policy):
    """Round 3-way cores: right-to-left QR sweep, then left-to-right SVD sweep."""
    d = len(cores)
    if d == 1:
        return [np.array(cores[0])]
    cores = _right_orthogonalize(cores)
    norm = np.linalg.norm(cores[0])
    delta = _step_budget(policy, norm, d - 1)
    for k in range(d - 1):
        r0, n, r1 = cores[k].shape
        u, s, vt = _svd(cores[k].reshape(r0 * n, r1))
        if policy.eps == 0.0:
            rk = _numerical_rank(s, (r0 * n, r1))
            if policy.max_rank is not None and rk > policy.max_rank:
                raise RankOverflowError(f"exact rounding needs rank {rk} > max_rank {policy.max_rank}")
        else:
            rk = _truncation_rank(s, delta, policy.max_rank)
        cores[k] = u[:, :rk].reshape(r0, n, rk)
        cores[k + 1] = np.tensordot(s[:rk, None] * vt[:rk], cores[k + 1], axes=(1, 0))
    return cores


def tt_round(v, policy: TruncationPolicy = EXACT):
    """Recompress a TT vector or operator to the smallest ranks within tolerance.

    Guarantees ``||v - result||_F <= policy.eps * ||v||_F``; ranks never grow.
    With ``eps == 0`` only singular values at roundoff level are dropped.
    """
    shapes = [c.shape for c in v.cores]
    cores = _round_cores(_flat(v.cores), policy)
    out = [c.reshape((c.shape[0],) + s[1:-1] + (c.shape[-1],)) for c, s in zip(cores, shapes)]
    return type(v)(out, copy=False)


def tt_norm(v) -> float:
    """Frobenius norm, computed by orthogonalization (no cancellation)."""
    cores = _flat(v.cores)
    if len(cores) == 1:
        return float(np.linalg.norm(cores[0]))
    return float(np.linalg.norm(_right_orthogonalize(cores)[0]))


# --- algebra -----------------------------------------------------------------


def _require_same_modes(a, b, what):
    ma = [c.shape[1:-1] for c in a.cores]
    mb = [c.shape[1:-1] for c in b.cores]
    if type(a) is not type(b) or ma != mb:
        raise DomainError(f"{what}: mode sizes differ ({ma} vs {mb})")


def tt_add(a, b):
    """Exact sum; ranks add (block-diagonal cores)."""
    _require_same_modes(a, b, "tt_add")
    if a.ndim == 1:
        return a._with_cores([_freeze(a.cores[0] + b.cores[0])])
    cores = []
    d = a.ndim
    for k, (x, y) in enumerate(zip(a.cores, b.cores)):
        mid = x.shape[1:-1]
        if k == 0:
            cores.append(np.concatenate([x, y], axis=-1))
        elif k == d - 1:
            cores.append(np.concatenate([x, y], axis=0))
        else:
            g = np.zeros((x.shape[0] + y.shape[0],) + mid + (x.shape[-1] + y.shape[-1],))
            g[: x.shape[0], ..., : x.shape[-1]] = x
            g[x.shape[0]:, ..., x.shape[-1]:] = y
            cores.append(g)
    return a._with_cores([_freeze(c) for c in cores])


def tt_sum(terms, policy: TruncationPolicy = None):
    """Sum a sequence of TT objects, rounding after each addition if a policy is given."""
    acc = None
    for t in terms:
        acc = t if acc is None else tt_add(acc, t)
        if policy is not None and acc is not t:
            acc = tt_round(acc, policy)
    if acc is None:
        raise DomainError("tt_sum of an empty sequence")
    return acc


def tt_hadamard(a: TtVector, b: TtVector) -> TtVector:
    """Exact elementwise product; ranks multiply."""
    if not isinstance(a, TtVector):
        raise DomainError("tt_hadamard expects TT vectors")
    _require_same_modes(a, b, "tt_hadamard")
    cores = []
    for x, y in zip(a.cores, b.cores):
        g = np.einsum("aib,cid->acibd", x, y)
        cores.append(g.reshape(x.shape[0] * y.shape[0], x.shape[1], x.shape[2] * y.shape[2]))
    return TtVector(cores, copy=False)


def tt_apply(op: TtOperator, v: TtVector) -> TtVector:
    """Exact matrix-vector product; ranks multiply. Round afterwards."""
    if op.col_shape != v.shape:
        raise DomainError(f"tt_apply: operator columns {op.col_shape} != vector modes {v.shape}")
    cores = []
    for g, x in zip(op.cores, v.cores):
        y = np.einsum("aijb,cjd->acibd", g, x)
        cores.append(y.reshape(g.shape[0] * x.shape[0], g.shape[1], g.shape[3] * x.shape[2]))
    return TtVector(cores, copy=False)


def tt_compose_exact(a: TtOperator, b: TtOperator) -> TtOperator:
    """Exact operator product ``a @ b``; ranks multiply."""
    if a.col_shape != b.row_shape:
        raise DomainError(f"tt_compose: inner modes differ ({a.col_shape} vs {b.row_shape})")
    cores = []
    for x, y in zip(a.cores, b.cores):
        g = np.einsum("aijb,cjkd->acikbd", x, y)
        cores.append(g.reshape(x.shape[0] * y.shape[0], x.shape[1], y.shape[2], x.shape[3] * y.shape[3]))
    return TtOperator(cores, copy=False)


# Products whose naive rank stays at or below this are formed exactly and
# then rounded, which keeps the strict error bound.  Larger ones go through
# the zip-up sweep below.
EXACT_PRODUCT_RANK = 64


def _zipup(op: TtOperator, other, eps: float):
    """Left-to-right contraction of ``op @ other`` with truncation on the fly.

    Each step contracts the carried remainder with the next pair of cores,
    keeps the left singular vectors and carries ``s V^T`` forward, so the
    full product rank ``r_op * r_other`` never appears in a core.  Per-step
    tails are cut relative to that step's norm, which is exact when the
    remaining right part is orthonormal and a good heuristic otherwise; both
    factors are right-orthogonalized first to keep that part well conditioned.
    """
    vector = isinstance(other, TtVector)
    d = op.ndim
    op = op._with_cores(_gauge_right(op.cores))
    other = other._with_cores(_gauge_right(other.cores))
    tol = eps / math.sqrt(max(d - 1, 1))
    carry = np.ones((1, 1, 1))
    out = []
    for k, (x, y) in enumerate(zip(op.cores, other.cores)):
        t = np.tensordot(carry, x, axes=(1, 0))  # (o, b, i, j, c)
        if vector:
            t = np.tensordot(t, y, axes=([1, 3], [0, 1]))  # (o, i, c, d)
            mid = t.shape[1:2]
        else:
            t = np.tensordot(t, y, axes=([1, 3], [0, 1]))  # (o, i, c, k, d)
            t = t.transpose(0, 1, 3, 2, 4)
            mid = t.shape[1:3]
        o, rc, rd = t.shape[0], x.shape[-1], y.shape[-1]
        if k == d - 1:
            out.append(t.reshape((o,) + mid + (1,)))
            break
        u, sv, vt = _svd(t.reshape(o * int(np.prod(mid)), rc * rd))
        norm = float(np.linalg.norm(sv))
        r = _truncation_rank(sv, tol * norm) if norm > 0 else 1
        out.append(u[:, :r].reshape((o,) + mid + (r,)))
        carry = (sv[:r, None] * vt[:r]).reshape(r, rc, rd)
    return type(other)(out, copy=False)


def _gauge_right(cores):
    """Right-orthogonal cores in the original mode layout."""
    shapes = [c.shape for c in cores]
    flat = _right_orthogonalize(_flat(cores))
    return [c.reshape((c.shape[0],) + sh[1:-1] + (c.shape[-1],)) for c, sh in zip(flat, shapes)]


def _product_rank(a, b) -> int:
    return max(x.shape[-1] * y.shape[-1] for x, y in zip(a.cores, b.cores))


def tt_apply_round(op: TtOperator, v: TtVector, policy: TruncationPolicy = EXACT) -> TtVector:
    """``round(op @ v)`` without materializing the full-rank product when it is large."""
    if op.col_shape != v.shape:
        raise DomainError(f"tt_apply: operator columns {op.col_shape} != vector modes {v.shape}")
    if policy.eps == 0.0 or _product_rank(op, v) <= EXACT_PRODUCT_RANK:
        return tt_round(tt_apply(op, v), policy)
    half = TruncationPolicy(0.5 * policy.eps, policy.max_rank)
    return tt_round(_zipup(op, v, half.eps), half)


def tt_compose(a: TtOperator, b: TtOperator, policy: TruncationPolicy = EXACT) -> TtOperator:
    """Operator product ``a @ b`` followed by rounding at ``policy``.

    Small products are formed exactly then rounded.  Large ones use a zip-up
    sweep at half the tolerance followed by rounding at the other half.
    """
    if a.col_shape != b.row_shape:
        raise DomainError(f"tt_compose: inner modes differ ({a.col_shape} vs {b.row_shape})")
    if policy.eps == 0.0 or _product_rank(a, b) <= EXACT_PRODUCT_RANK:
        return tt_round(tt_compose_exact(a, b), policy)
    half = TruncationPolicy(0.5 * policy.eps, policy.max_rank)
    return tt_round(_zipup(a, b, half.eps), half)


def tt_kron(a, b):
    """Kronecker product: modes and cores concatenate, joined by rank 1."""
    if type(a) is not type(b):
        raise DomainError("tt_kron of a vector with an operator")
    return a._with_cores(a.cores + b.cores)


def tt_kron_all(parts):
    parts = list(parts)
    if not parts:
        raise DomainError("tt_kron_all of an empty sequence")
    return parts[0]._with_cores(sum((p.cores for p in parts), ()))


def tt_dot(a: TtVector, b: TtVector) -> float:
    """Euclidean inner product of the reconstructions, core by core."""
    _require_same_modes(a, b, "tt_dot")
    m = np.ones((1, 1))
    for x, y in zip(a.cores, b.cores):
        t = np.tensordot(m, x, axes=(0, 0))
        m = np.tensordot(t, y, axes=((0, 1), (0, 1)))
    return float(m[0, 0])
