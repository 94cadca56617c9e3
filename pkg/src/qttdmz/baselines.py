"""Bootstrap particle filter and continuous-discrete extended Kalman filter."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateStateError, DivergenceError, DomainError
from .models import NlfModel, Trajectory, rng_stream


# --- particle filter -----------------------------------------------------------


@dataclass(frozen=True)
class ParticleEnsemble:
    particles: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.particles, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        if p.shape[0] < 1 or w.shape[0] != p.shape[0]:
            raise DomainError(f"{p.shape[0]} particles but {w.shape[0]} weights")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError(f"weights must be nonnegative and sum to 1 (sum {w.sum()!r})")
        object.__setattr__(self, "particles", p)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.particles


def pf_init(model: NlfModel, n: int, rng: np.random.Generator) -> ParticleEnsemble:
    """``n`` equally weighted draws from the initial density."""
    if n < 1:
        raise DomainError(f"particle count must be >= 1, got {n}")
    return ParticleEnsemble(model.sample_prior(rng, n), np.full(n, 1.0 / n))


def log_likelihood(model: NlfModel, particles, dy, dt) -> np.ndarray:
    """``-|dy - h(x) dt|^2 / (2 s dt)`` per particle."""
    resid = np.asarray(dy, dtype=float) - model.h(particles) * dt
    return -np.einsum("ij,ij->i", resid, resid) / (2.0 * model.s * dt)


def resample_indices(weights, rng: np.random.Generator, systematic: bool = False) -> np.ndarray:
    """Inverse-CDF resampling: ``k_i = min{j : c_j >= r_i}``.

    Independent uniforms give multinomial resampling; ``systematic=True``
    uses one shared offset ``(i + u) / N``.
    """
    n = len(weights)
    c = np.cumsum(weights)
    c[-1] = 1.0
    if systematic:
        r = (np.arange(n) + rng.uniform()) / n
    else:
        r = rng.uniform(size=n)
    return np.minimum(np.searchsorted(c, r, side="left"), n - 1)


def pf_step(
    ens: ParticleEnsemble,
    model: NlfModel,
    dy,
    dt: float,
    rng_propagate: np.random.Generator,
    rng_resample: np.random.Generator,
    systematic: bool = False,
):
    """Predict, weight, resample; returns ``(new ensemble, estimate)``."""
    if not (model.s > 0 and dt > 0):
        raise DomainError("particle weights need s > 0 and dt > 0")
    x = ens.particles
    noise = rng_propagate.standard_normal(x.shape)
    pred = x + model.f(x) * dt + math.sqrt(model.q * dt) * noise
    logw = log_likelihood(model, pred, dy, dt)
    top = float(np.max(logw))
    if not math.isfinite(top):
        raise DegenerateStateError(f"all particle weights vanish (max log-weight {top})")
    w = np.exp(logw - top)
    w /= w.sum()
    idx = resample_indices(w, rng_resample, systematic)
    new = pred[idx]
    out = ParticleEnsemble(new, np.full(ens.n, 1.0 / ens.n))
    return out, new.mean(axis=0)


@dataclass
class BaselineRun:
    estimates: np.ndarray
    online_seconds: float
    diverged: bool = False
    divergence_step: Optional[int] = None
    diagnostics: dict = field(default_factory=dict)


def run_pf(model: NlfModel, traj: Trajectory, n_particles: int, seed: int, systematic: bool = False, keep_every: int = 0) -> BaselineRun:
    """Particle filter over a trajectory; estimates include ``t_0``."""
    ens = pf_init(model, n_particles, rng_stream(seed, "pf-init"))
    rp, rr = rng_stream(seed, "pf-propagate"), rng_stream(seed, "pf-resample")
    dt = traj.dt
    est = [ens.mean()]
    snapshots = {}
    start = time.perf_counter()
    diverged, at = False, None
    for j, dy in enumerate(traj.dy[1:], start=1):
        try:
            ens, e = pf_step(ens, model, dy, dt, rp, rr, systematic)
        except DegenerateStateError:
            diverged, at = True, j
            break
        est.append(e)
        if keep_every and j % keep_every == 0:
            snapshots[j] = ens.particles.copy()
    elapsed = time.perf_counter() - start
    est = _pad(est, len(traj.times), model.d)
    return BaselineRun(est, elapsed, diverged, at, {"snapshots": snapshots})


def _pad(est, n, d):
    out = np.full((n, d), np.nan)
    out[: len(est)] = np.asarray(est)
    return out


def run_prior_mean(model: NlfModel, traj: Trajectory, n_particles: int, seed: int) -> BaselineRun:
    """Observation-free predictor: mean of an unweighted ensemble under the drift alone."""
    rng_i, rng_p = rng_stream(seed, "pf-init"), rng_stream(seed, "pf-propagate")
    x = model.sample_prior(rng_i, n_particles)
    dt = traj.dt
    est = [x.mean(axis=0)]
    start = time.perf_counter()
    for _ in traj.dy[1:]:
        x = x + model.f(x) * dt + math.sqrt(model.q * dt) * rng_p.standard_normal(x.shape)
        est.append(x.mean(axis=0))
    return BaselineRun(np.array(est), time.perf_counter() - start)


# --- extended Kalman filter --------------------------------------------------------


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).ravel()
        p = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if p.shape != (m.size, m.size):
            raise DomainError(f"covariance shape {p.shape} does not match mean length {m.size}")
        if np.all(np.isfinite(p)):
            if np.max(np.abs(p - p.T)) > 1e-12 * max(1.0, np.max(np.abs(p))):
                raise DomainError("covariance is not symmetric")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", p)


def jacobian(fn: Callable, x, analytic: Optional[Callable] = None) -> np.ndarray:
    """Analytic Jacobian when given, else central differences.

    The step along coordinate ``i`` is ``cbrt(eps) * max(1, |x_i|)``.
    """
    x = np.asarray(x, dtype=float).ravel()
    if analytic is not None:
        return np.atleast_2d(np.asarray(analytic(x), dtype=float))
    steps = np.cbrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(x))
    cols = []
    for i, hstep in enumerate(steps):
        e = np.zeros_like(x)
        e[i] = hstep
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * hstep))
    return np.stack(cols, axis=-1)


def ekf_step(belief: GaussianBelief, model: NlfModel, dy, dt: float, literal: bool = False) -> GaussianBelief:
    """One Euler step of the continuous-discrete EKF.

    ``P+ = P + (F P + P F^T - P H^T H P / s + q I) dt`` with every ``P`` on
    the right taken at the previous step, ``K = P+ H^T / s`` and
    ``x+ = x + f(x) dt + K (dy - h(x) dt)``. ``literal=True`` drops the
    innovation term, leaving a pure predictor for the mean.
    """
    x, P = belief.mean, belief.cov
    with np.errstate(over="ignore", invalid="ignore"):
        F = jacobian(model.f, x, model.f_jacobian)
        H = jacobian(model.h, x, model.h_jacobian)
        dP = (F @ P + P @ F.T - (P @ H.T @ H @ P) / model.s + model.q * np.eye(x.size)) * dt
        P_new = P + dP
        P_new = 0.5 * (P_new + P_new.T)
        x_new = x + model.f(x) * dt
        if not literal:
            K = P_new @ H.T / model.s
            x_new = x_new + K @ (np.asarray(dy, dtype=float) - model.h(x) * dt)
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(P_new))):
        raise DivergenceError("extended Kalman filter produced non-finite mean or covariance")
    return GaussianBelief(x_new, P_new)


def run_ekf(model: NlfModel, traj: Trajectory, literal: bool = False, init_mean=None, init_cov=None) -> BaselineRun:
    """EKF over a trajectory, starting from the prior mean and covariance.

    Divergence means a non-finite estimate or one farther than ten domain
    radii from the origin; the run stops there and later estimates are NaN.
    """
    m0 = model.prior_mean if init_mean is None else init_mean
    p0 = model.prior_cov if init_cov is None else init_cov
    belief = GaussianBelief(m0, p0)
    trace0 = float(np.trace(belief.cov)) or 1.0
    limit = 10.0 * model.domain_radius
    est = [belief.mean]
    growth = 1.0
    diverged, at = False, None
    dt = traj.dt
    start = time.perf_counter()
    for j, dy in enumerate(traj.dy[1:], start=1):
        try:
            belief = ekf_step(belief, model, dy, dt, literal)
        except (DivergenceError, FloatingPointError, np.linalg.LinAlgError):
            diverged, at = True, j
            break
        growth = max(growth, float(np.trace(belief.cov)) / trace0)
        if np.linalg.norm(belief.mean) > limit:
            diverged, at = True, j
            break
        est.append(belief.mean)
    elapsed = time.perf_counter() - start
    return BaselineRun(
        _pad(est, len(traj.times), model.d),
        elapsed,
        diverged,
        at,
        {"max_covariance_growth": growth},
    )
