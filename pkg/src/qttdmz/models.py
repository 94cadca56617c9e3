"""Signal-observation models, trajectory simulation and the benchmark presets.

The model is

    dx = f(x) dt + dv,   E[dv dv^T] = q I dt
    dy = h(x) dt + dw,   E[dw dw^T] = s I dt

Trajectories use Euler-Maruyama on a grid of spacing ``dt`` and store the
observation increments ``dy_j = y(t_j) - y(t_{j-1})`` with ``dy_0 = 0``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import gammaln

from .densities import ExpPolyadicDensity, isotropic_gaussian
from .errors import DomainError
from .polyadic import PolyadicFunction, term

# One independent random stream per purpose; the id is mixed into the seed.
STREAMS = {
    "state": 1,
    "obs": 2,
    "initial": 3,
    "pf-propagate": 4,
    "pf-resample": 5,
    "pf-init": 6,
}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Counter-based Philox generator for ``(seed, stream)``."""
    if name not in STREAMS:
        raise DomainError(f"unknown random stream {name!r}; known: {sorted(STREAMS)}")
    ss = np.random.SeedSequence([int(seed), STREAMS[name]])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class NlfModel:
    """Nonlinear filtering problem on a box.

    ``x0_sampler(rng, n=None)`` draws the true initial state (or ``n`` of
    them); ``prior_sampler`` has the same signature and draws from ``sigma0``
    when that differs from the initial-state law; ``prior_mean`` and
    ``prior_cov`` summarize ``sigma0`` for Gaussian filters.
    """

    name: str
    d: int
    f: PolyadicFunction
    h: PolyadicFunction
    q: float
    s: float
    sigma0: Callable
    lower: tuple
    upper: tuple
    x0_sampler: Callable
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    f_jacobian: Optional[Callable] = None
    h_jacobian: Optional[Callable] = None
    params: dict = field(default_factory=dict)
    prior_sampler: Optional[Callable] = None

    def __post_init__(self):
        if self.q < 0 or self.s < 0:
            raise DomainError(f"noise variances must be nonnegative, got q={self.q}, s={self.s}")
        if self.f.d != self.d or self.f.m != self.d or self.h.d != self.d:
            raise DomainError("drift must map R^d to R^d and the observation must take R^d")
        if len(self.lower) != self.d or len(self.upper) != self.d:
            raise DomainError("domain bounds must have one entry per dimension")

    def sample_prior(self, rng, n: int) -> np.ndarray:
        """``n`` draws from ``sigma0`` as an ``(n, d)`` array."""
        draw = self.prior_sampler or self.x0_sampler
        return np.asarray(draw(rng, n), dtype=float).reshape(n, self.d)

    def drift(self, x):
        return self.f(x)

    def observe(self, x):
        return self.h(x)

    @property
    def domain_radius(self) -> float:
        corner = np.maximum(np.abs(self.lower), np.abs(self.upper))
        return float(np.linalg.norm(corner))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    dy: np.ndarray
    seed: int

    def __post_init__(self):
        if not (len(self.times) == len(self.states) == len(self.dy)):
            raise DomainError("times, states and increments must have equal length")

    @property
    def d(self) -> int:
        return self.states.shape[1]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def save_csv(self, path) -> None:
        """CSV with a ``# seed=<n>`` line, then columns ``t, x1.., dy1..``."""
        d = self.d
        with open(path, "w", newline="") as fh:
            fh.write(f"# seed={self.seed}\n")
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i + 1}" for i in range(d)] + [f"dy{i + 1}" for i in range(d)])
            for t, x, y in zip(self.times, self.states, self.dy):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(v)) for v in y])

    @classmethod
    def load_csv(cls, path) -> "Trajectory":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("# seed="):
            raise DomainError(f"{path}: missing '# seed=' header")
        seed = int(lines[0].split("=", 1)[1])
        rows = list(csv.reader(lines[1:]))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        d = (len(header) - 1) // 2
        return cls(body[:, 0], body[:, 1:1 + d], body[:, 1 + d:], seed)


def simulate(model: NlfModel, T: float, dt: float, seed: int, x0=None) -> Trajectory:
    """Euler-Maruyama path and observation increments.

    ``x_j = x_{j-1} + f(x_{j-1}) dt + sqrt(q dt) xi_j`` and
    ``dy_j = h(x_j) dt + sqrt(s dt) eta_j``.
    """
    if not dt > 0:
        raise DomainError(f"time step must be positive, got {dt}")
    n_steps = round(T / dt)
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise DomainError(f"T={T} is not a positive integer multiple of dt={dt}")
    d = model.d
    x = np.asarray(model.x0_sampler(rng_stream(seed, "initial")) if x0 is None else x0, dtype=float).reshape(d)
    xi = rng_stream(seed, "state").standard_normal((n_steps, d))
    eta = rng_stream(seed, "obs").standard_normal((n_steps, d))
    states = np.empty((n_steps + 1, d))
    dy = np.zeros((n_steps + 1, d))
    states[0] = x
    sq, ss = math.sqrt(model.q * dt), math.sqrt(model.s * dt)
    for j in range(1, n_steps + 1):
        x = x + model.f(x) * dt + sq * xi[j - 1]
        states[j] = x
        dy[j] = model.h(x) * dt + ss * eta[j - 1]
    return Trajectory(dt * np.arange(n_steps + 1), states, dy, int(seed))


# --- presets ----------------------------------------------------------------------


def _ident(x):
    return x


def _cube(x):
    return x**3


def _square(x):
    return x * x


def _fourth(x):
    return x**4


def drift_matrix(d: int) -> np.ndarray:
    """``-0.6`` on the diagonal and ``-0.1`` on the first superdiagonal."""
    return -0.6 * np.eye(d) + np.diag(np.full(d - 1, -0.1), 1)


def quartic_radial_sampler(d: int, rate: float = 5.0):
    """Exact sampler for the density proportional to ``exp(-rate |x|^4)``."""

    def draw(rng, n=None):
        size = 1 if n is None else n
        direction = rng.standard_normal((size, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        u = rng.gamma(d / 4.0, size=size)
        out = (u / rate)[:, None] ** 0.25 * direction
        return out[0] if n is None else out

    return draw


def quartic_radial_cov(d: int, rate: float = 5.0) -> np.ndarray:
    """Covariance of ``exp(-rate |x|^4)``: ``E|x|^2 / d`` times the identity."""
    second = math.exp(gammaln(d / 4 + 0.5) - gammaln(d / 4)) / math.sqrt(rate)
    return (second / d) * np.eye(d)


def cubic_sensor_preset(d: int) -> NlfModel:
    """Cubic sensor: ``f(x) = B x + sin(x)``, ``h(x) = x**3``, on ``[-3.5, 3.5]^d``."""
    if d < 1:
        raise DomainError(f"dimension must be >= 1, got {d}")
    comps = []
    for k in range(d):
        row = [(k, _ident, -0.6)]
        if k + 1 < d:
            row.append((k + 1, _ident, -0.1))
        row.append((k, np.sin, 1.0))
        comps.append(row)
    f = PolyadicFunction.univariate(d, comps)
    h = PolyadicFunction.univariate(d, [[(k, _cube)] for k in range(d)])
    B = drift_matrix(d)
    terms = [term(-5.0, (i, _fourth)) for i in range(d)]
    terms += [term(-10.0, (i, _square), (j, _square)) for i in range(d) for j in range(i + 1, d)]
    sigma0 = ExpPolyadicDensity(PolyadicFunction(d, tuple((i,) for i in range(d)), (tuple(terms),)))
    if d == 20:
        def x0_sampler(rng, n=None):
            return np.full(d, 1.6) if n is None else np.full((n, d), 1.6)
    else:
        x0_sampler = quartic_radial_sampler(d)
    return NlfModel(
        name="cubic",
        d=d,
        f=f,
        h=h,
        q=0.8,
        s=2.0,
        sigma0=sigma0,
        lower=(-3.5,) * d,
        upper=(3.5,) * d,
        x0_sampler=x0_sampler,
        prior_mean=np.zeros(d),
        prior_cov=quartic_radial_cov(d),
        f_jacobian=lambda x: B + np.diag(np.cos(np.asarray(x, dtype=float))),
        h_jacobian=lambda x: np.diag(3.0 * np.asarray(x, dtype=float) ** 2),
        params={"d": d},
        prior_sampler=quartic_radial_sampler(d),
    )


def multimode_preset() -> NlfModel:
    """Three-dimensional model with odd drift and even observation (bimodal posterior)."""
    d = 3
    f = PolyadicFunction.univariate(
        d,
        [
            [(0, np.sin, 0.6), (1, np.sin, 0.2)],
            [(1, np.sin, 0.6), (2, np.sin, 0.2)],
            [(2, np.sin, 0.6)],
        ],
    )
    h = PolyadicFunction.univariate(d, [[(k, _square), (k, np.cos)] for k in range(d)])
    var0 = 1.0 / (2.0 * math.sqrt(5.0))

    def x0_sampler(rng, n=None):
        return math.sqrt(var0) * rng.standard_normal(d if n is None else (n, d))

    def f_jac(x):
        c = np.cos(np.asarray(x, dtype=float))
        return np.array([[0.6 * c[0], 0.2 * c[1], 0.0], [0.0, 0.6 * c[1], 0.2 * c[2]], [0.0, 0.0, 0.6 * c[2]]])

    def h_jac(x):
        x = np.asarray(x, dtype=float)
        return np.diag(2.0 * x - np.sin(x))

    return NlfModel(
        name="multimode",
        d=d,
        f=f,
        h=h,
        q=0.2,
        s=0.8,
        sigma0=isotropic_gaussian(d, var0),
        lower=(-4.0,) * d,
        upper=(4.0,) * d,
        x0_sampler=x0_sampler,
        prior_mean=np.zeros(d),
        prior_cov=var0 * np.eye(d),
        f_jacobian=f_jac,
        h_jacobian=h_jac,
        params={"x0_variance": var0},
    )


def linear_preset(B, H, q: float, s: float, prior_var: float, bound: float = 6.0, x0=None) -> NlfModel:
    """Linear-Gaussian model ``f = B x``, ``h = H x`` with a Gaussian prior at 0."""
    from .polyadic import linear_polyadic

    B = np.atleast_2d(np.asarray(B, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    d = B.shape[0]

    def sampler(rng, n=None):
        if x0 is not None:
            x = np.asarray(x0, dtype=float)
            return x if n is None else np.tile(x, (n, 1))
        return math.sqrt(prior_var) * rng.standard_normal(d if n is None else (n, d))

    def prior(rng, n=None):
        return math.sqrt(prior_var) * rng.standard_normal(d if n is None else (n, d))

    return NlfModel(
        name="linear",
        d=d,
        f=linear_polyadic(B),
        h=linear_polyadic(H),
        q=q,
        s=s,
        sigma0=isotropic_gaussian(d, prior_var),
        lower=(-bound,) * d,
        upper=(bound,) * d,
        x0_sampler=sampler,
        prior_mean=np.zeros(d),
        prior_cov=prior_var * np.eye(d),
        f_jacobian=lambda x: B,
        h_jacobian=lambda x: H,
        params={"B": B.tolist(), "H": H.tolist()},
        prior_sampler=prior,
    )


PRESETS = {
    "cubic": cubic_sensor_preset,
    "multimode": multimode_preset,
}


def make_preset(name: str, d: Optional[int] = None) -> NlfModel:
    if name not in PRESETS:
        raise DomainError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    if name == "cubic":
        return cubic_sensor_preset(4 if d is None else d)
    if d not in (None, 3):
        raise DomainError("the multimode preset is three-dimensional")
    return multimode_preset()
