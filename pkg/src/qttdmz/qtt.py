"""Quantized tensor trains: binary reshaping of TT vectors and operators.

Bit order: a physical index ``i`` in ``[0, 2**L)`` is written as
``i = b_0 + 2 b_1 + ... + 2**(L-1) b_{L-1}`` and the binary modes appear
least-significant bit first. Dimensions are concatenated in order, so a
d-dimensional grid with ``L`` levels per axis becomes ``d*L`` modes of
size 2 laid out as ``(x1.b0, ..., x1.b_{L-1}, x2.b0, ...)``.

Operators interleave row and column bits: every binary core has shape
``(r, 2, 2, r')`` holding one row bit and the matching column bit.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DomainError
from .tt import (
    EXACT,
    TruncationPolicy,
    TtOperator,
    TtVector,
    _numerical_rank,
    _svd,
    tt_from_dense,
    tt_round,
)


def levels_of(n: int) -> int:
    """Return L with ``n == 2**L``; raise DomainError otherwise."""
    n = int(n)
    if n < 2 or n & (n - 1):
        raise DomainError(f"mode size {n} is not a power of two >= 2")
    return n.bit_length() - 1


def _split_exact(t):
    """Exact TT decomposition of ``t`` with shape (r, n_1, ..., n_k, r').

    Only roundoff-level singular values are discarded. Returns 3-way cores.
    """
    r0, r1 = t.shape[0], t.shape[-1]
    modes = t.shape[1:-1]
    cores = []
    rank = r0
    c = t
    for k, n in enumerate(modes[:-1]):
        c = c.reshape(rank * n, -1)
        u, s, vt = _svd(c)
        rk = _numerical_rank(s, c.shape)
        cores.append(u[:, :rk].reshape(rank, n, rk))
        c = s[:rk, None] * vt[:rk]
        rank = rk
    cores.append(c.reshape(rank, modes[-1], r1))
    return cores


def _bits_first_lsb(t, axis_start, L):
    """Reverse ``L`` consecutive bit axes starting at ``axis_start``.

    A C-order reshape of an index of size 2**L yields bits MSB first; this
    turns that into LSB first (the reversal is its own inverse).
    """
    perm = list(range(t.ndim))
    perm[axis_start:axis_start + L] = perm[axis_start:axis_start + L][::-1]
    return t.transpose(perm)


def qtt_fold(v: TtVector, policy: TruncationPolicy = EXACT) -> TtVector:
    """Split every mode of size ``2**L`` into ``L`` binary modes.

    The split is exact up to roundoff; pass a policy to round afterwards.
    """
    cores = []
    for c in v.cores:
        r0, n, r1 = c.shape
        L = levels_of(n)
        if L == 1:
            cores.append(np.array(c))
            continue
        t = _bits_first_lsb(c.reshape((r0,) + (2,) * L + (r1,)), 1, L)
        cores.extend(_split_exact(np.ascontiguousarray(t)))
    out = TtVector(cores, copy=False)
    return tt_round(out, policy) if policy.eps > 0 else out


def _group(cores, levels):
    levels = [int(L) for L in levels]
    if any(L < 1 for L in levels) or sum(levels) != len(cores):
        raise DomainError(f"levels {levels} do not account for {len(cores)} binary cores")
    groups, k = [], 0
    for L in levels:
        groups.append(cores[k:k + L])
        k += L
    return groups


def qtt_unfold(v: TtVector, levels: Sequence[int]) -> TtVector:
    """Merge consecutive binary modes back into modes of size ``2**L``.

    ``levels[i]`` is the number of binary modes of physical dimension ``i``.
    """
    if any(n != 2 for n in v.shape):
        raise DomainError(f"qtt_unfold expects binary modes, got {v.shape}")
    out = []
    for group in _group(v.cores, levels):
        t = group[0]
        for c in group[1:]:
            t = np.tensordot(t, c, axes=(-1, 0))
        L = len(group)
        t = _bits_first_lsb(t, 1, L)
        out.append(np.ascontiguousarray(t).reshape(t.shape[0], 2**L, t.shape[-1]))
    return TtVector(out, copy=False)


def qtt_fold_operator(op: TtOperator, policy: TruncationPolicy = EXACT) -> TtOperator:
    """Binary split of a square-moded operator; cores become ``(r, 2, 2, r')``."""
    cores = []
    for c in op.cores:
        r0, n, m, r1 = c.shape
        if n != m:
            raise DomainError(f"operator mode {n}x{m} is not square")
        L = levels_of(n)
        t = c.reshape((r0,) + (2,) * L + (2,) * L + (r1,))
        t = _bits_first_lsb(_bits_first_lsb(t, 1, L), 1 + L, L)
        perm = [0] + [p for l in range(L) for p in (1 + l, 1 + L + l)] + [2 * L + 1]
        t = np.ascontiguousarray(t.transpose(perm)).reshape((r0,) + (4,) * L + (r1,))
        cores.extend(g.reshape(g.shape[0], 2, 2, g.shape[-1]) for g in _split_exact(t))
    out = TtOperator(cores, copy=False)
    return tt_round(out, policy) if policy.eps > 0 else out


def qtt_unfold_operator(op: TtOperator, levels: Sequence[int]) -> TtOperator:
    """Inverse of :func:`qtt_fold_operator`."""
    out = []
    for group in _group(op.cores, levels):
        L = len(group)
        t = group[0]
        for c in group[1:]:
            t = np.tensordot(t, c, axes=(-1, 0))
        # axes: r0, row0, col0, row1, col1, ..., r1
        perm = [0] + [1 + 2 * l for l in range(L)] + [2 + 2 * l for l in range(L)] + [2 * L + 1]
        t = t.transpose(perm)
        t = _bits_first_lsb(_bits_first_lsb(t, 1, L), 1 + L, L)
        out.append(np.ascontiguousarray(t).reshape(t.shape[0], 2**L, 2**L, t.shape[-1]))
    return TtOperator(out, copy=False)


def _dense_to_bits(a, levels):
    """Reshape a dense array with modes 2**L_i into the binary QTT layout."""
    t = a.reshape(sum(((2,) * L for L in levels), ()))
    perm = []
    k = 0
    for L in levels:
        perm.extend(range(k + L - 1, k - 1, -1))
        k += L
    return t.transpose(perm)


def qtt_from_dense(a, policy: TruncationPolicy = EXACT) -> TtVector:
    """TT-SVD of a dense array directly in QTT layout."""
    a = np.asarray(a, dtype=float)
    levels = [levels_of(n) for n in a.shape]
    return tt_from_dense(_dense_to_bits(a, levels), policy)


def qtt_to_dense(v: TtVector, levels: Sequence[int]) -> np.ndarray:
    from .tt import tt_to_dense

    return tt_to_dense(qtt_unfold(v, levels))


def qtt_operator_from_matrix(mat, levels: Sequence[int], policy: TruncationPolicy = EXACT) -> TtOperator:
    """Compress a dense matrix acting on a grid with ``levels`` per axis."""
    from .tt import operator_from_dense

    levels = [int(L) for L in levels]
    shape = tuple(2**L for L in levels)
    op = operator_from_dense(mat, shape, shape, EXACT)
    return qtt_fold_operator(op, policy)


def qtt_operator_to_matrix(op: TtOperator, levels: Sequence[int]) -> np.ndarray:
    from .tt import operator_to_dense

    return operator_to_dense(qtt_unfold_operator(op, levels))


def qtt_ones(levels: Sequence[int]) -> TtVector:
    return TtVector([np.ones((1, 2, 1))] * sum(levels))


def qtt_identity(levels: Sequence[int]) -> TtOperator:
    return TtOperator([np.eye(2).reshape(1, 2, 2, 1)] * sum(levels))


def qtt_vector(values, policy: TruncationPolicy = EXACT) -> TtVector:
    """QTT of a 1D array of length ``2**L``."""
    return qtt_from_dense(np.asarray(values, dtype=float).ravel(), policy)
