import numpy as np
import pytest

from qttdmz.tt import TtVector, tt_from_dense


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_tt(rng, shape, ranks):
    """TT vector with Gaussian cores and the given interior ranks."""
    full = (1,) + tuple(ranks) + (1,)
    return TtVector([rng.standard_normal((full[k], n, full[k + 1])) for k, n in enumerate(shape)])


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def discrete_kalman(B, H, q, s, m0, P0, dys, dt):
    """Exact Kalman filter for the Euler-discretized linear model.

    ``x_j = (I + B dt) x_{j-1} + N(0, q dt I)`` and
    ``dy_j = H dt x_j + N(0, s dt I)``; returns means for ``t_1..t_N``.
    """
    B, H = np.atleast_2d(B), np.atleast_2d(H)
    d = B.shape[0]
    F = np.eye(d) + B * dt
    G = H * dt
    m, P = np.asarray(m0, dtype=float), np.asarray(P0, dtype=float)
    out = []
    for dy in dys:
        m = F @ m
        P = F @ P @ F.T + q * dt * np.eye(d)
        S = G @ P @ G.T + s * dt * np.eye(G.shape[0])
        K = np.linalg.solve(S, G @ P).T
        m = m + K @ (dy - G @ m)
        P = P - K @ G @ P
        out.append(m.copy())
    return np.array(out)


def kalman_bucy_euler(B, H, q, s, m0, P0, dys, dt):
    """Euler discretization of the Kalman-Bucy equations, written out by hand."""
    B, H = np.atleast_2d(B), np.atleast_2d(H)
    d = B.shape[0]
    m, P = np.asarray(m0, dtype=float), np.asarray(P0, dtype=float)
    means, covs = [], []
    for dy in dys:
        P_new = P + (B @ P + P @ B.T - P @ H.T @ H @ P / s + q * np.eye(d)) * dt
        m = m + B @ m * dt + P_new @ H.T @ (dy - H @ m * dt) / s
        P = P_new
        means.append(m.copy())
        covs.append(P.copy())
    return np.array(means), np.array(covs)
