"""Dense finite-difference reference path (sparse matrices, any grid size).

Used as the oracle for the QTT operators and for end-to-end comparisons on
small grids. Unknowns are ordered in C order over the interior nodes.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .operators import central_difference, second_difference
from .polyadic import Grid, PolyadicFunction


def _axis_kron(grid: Grid, axis: int, mat) -> sp.csr_matrix:
    eye = sp.identity(grid.n, format="csr")
    out = None
    for i in range(grid.d):
        m = sp.csr_matrix(mat) if i == axis else eye
        out = m if out is None else sp.kron(out, m, format="csr")
    return out


def dense_laplacian(grid: Grid) -> sp.csr_matrix:
    return sum(_axis_kron(grid, i, second_difference(grid.n, grid.spacing[i])) for i in range(grid.d))


def dense_convection(grid: Grid, f: PolyadicFunction) -> sp.csr_matrix:
    fv = f.on_grid(grid)
    out = sp.csr_matrix((grid.size, grid.size))
    for i in range(grid.d):
        out = out + _axis_kron(grid, i, central_difference(grid.n, grid.spacing[i])) @ sp.diags(fv[i].ravel())
    return out


def dense_potential(grid: Grid, h: PolyadicFunction, s: float) -> sp.csr_matrix:
    hv = h.on_grid(grid)
    return sp.diags((hv**2).sum(axis=0).ravel() / (2.0 * s), format="csr")


def dense_generator(grid: Grid, f, h, q: float, s: float, potential_weight: float = 1.0) -> sp.csr_matrix:
    return (0.5 * q * dense_laplacian(grid) - dense_convection(grid, f) - potential_weight * dense_potential(grid, h, s)).tocsr()


def dense_propagator(generator, tau: float, n_substeps: int) -> np.ndarray:
    """``(I + tau A)^n`` as a dense matrix."""
    step = np.eye(generator.shape[0]) + tau * generator.toarray()
    return np.linalg.matrix_power(step, n_substeps)


def dense_update_factor(grid: Grid, h: PolyadicFunction, dy, s: float) -> np.ndarray:
    hv = h.on_grid(grid)
    return np.exp(np.tensordot(np.asarray(dy, dtype=float), hv, axes=(0, 0)) / s)


def dense_filter(grid: Grid, f, h, q, s, sigma0, dys, dt, n_substeps, potential_weight=1.0):
    """Run the splitting scheme densely without rescaling.

    Returns the list of states after each assimilation, starting with the
    initial density on the grid.
    """
    gen = dense_generator(grid, f, h, q, s, potential_weight)
    step = (sp.identity(grid.size, format="csr") + (dt / n_substeps) * gen).tocsr()
    u = np.asarray(sigma0, dtype=float).ravel().copy()
    out = [u.reshape(grid.shape).copy()]
    for dy in dys:
        for _ in range(n_substeps):
            u = step @ u
        u = u * dense_update_factor(grid, h, dy, s).ravel()
        out.append(u.reshape(grid.shape).copy())
    return out
