"""Initial-density descriptions that can be built in QTT form without densification."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError
from .polyadic import PolyadicFunction


@dataclass(frozen=True)
class SeparableDensity:
    """``prod_i factors[i](x_i)``; every factor must be nonnegative."""

    factors: tuple

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.ones(x.shape[:-1])
        for i, fn in enumerate(self.factors):
            out = out * np.asarray(fn(x[..., i]), dtype=float)
        return out

    @property
    def d(self) -> int:
        return len(self.factors)


@dataclass(frozen=True)
class ExpPolyadicDensity:
    """``exp(g(x))`` with ``g`` a scalar polyadic field.

    Each term of ``g`` only couples the variables it names, so the density is
    a Hadamard product of low-dimensional exponentials.
    """

    exponent: PolyadicFunction

    def __post_init__(self):
        if self.exponent.m != 1:
            raise DomainError("the exponent must be scalar-valued")

    def __call__(self, x):
        return np.exp(self.exponent(x)[..., 0])

    @property
    def d(self) -> int:
        return self.exponent.d


def gaussian_factor(mean: float, var: float) -> Callable:
    """Normalized 1D Gaussian density as a callable."""
    if not var > 0:
        raise DomainError(f"variance must be positive, got {var}")

    def pdf(x):
        return np.exp(-0.5 * (np.asarray(x) - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)

    return pdf


def isotropic_gaussian(d: int, var: float, mean: Sequence[float] | None = None) -> SeparableDensity:
    mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=float)
    return SeparableDensity(tuple(gaussian_factor(float(m), var) for m in mean))
