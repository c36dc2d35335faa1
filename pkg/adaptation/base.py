"""Base error distribution abstract class.

An error distribution describes where the true label of one prediction
lies, given the prediction and the calibrated error scale sigma.
"""
from abc import ABC, abstractmethod

import numpy as np
from scipy import special, stats

from common.errors import ConfigurationError, DomainError


class ErrorDistribution(ABC):
    name: str = ""

    @abstractmethod
    def cdf(self, x, mu, sigma) -> np.ndarray:
        """Cumulative probability at x of the distribution centred at mu with std sigma."""

    def cell_mass(self, mu, sigma, cell_lo, cell_hi):
        """Probability mass of [cell_lo, cell_hi); broadcasts over arrays."""
        sigma = np.asarray(sigma, dtype=float)
        if np.any(~(sigma > 0)):
            raise DomainError(f"sigma must be positive, got {sigma}")
        lo = np.asarray(cell_lo, dtype=float)
        hi = np.asarray(cell_hi, dtype=float)
        if np.any(hi < lo):
            raise DomainError("cell upper bound below lower bound")
        mass = self.cdf(hi, mu, sigma) - self.cdf(lo, mu, sigma)
        mass = np.where(hi == lo, 0.0, mass)
        return float(mass) if mass.ndim == 0 else mass


class GaussianDistribution(ErrorDistribution):
    name = "gaussian"

    def cdf(self, x, mu, sigma):
        return special.ndtr((np.asarray(x, dtype=float) - mu) / sigma)


class LaplaceDistribution(ErrorDistribution):
    """Laplace with the same standard deviation as the Gaussian (scale sigma/sqrt 2)."""
    name = "laplace"

    def cdf(self, x, mu, sigma):
        return stats.laplace.cdf(x, loc=mu, scale=np.asarray(sigma) / np.sqrt(2.0))


DISTRIBUTIONS = {
    "gaussian": GaussianDistribution,
    "laplace":  LaplaceDistribution,
}


def get_distribution(name: str | ErrorDistribution) -> ErrorDistribution:
    if isinstance(name, ErrorDistribution):
        return name
    try:
        return DISTRIBUTIONS[name]()
    except KeyError:
        raise ConfigurationError(
            f"unknown error distribution {name!r}; choose from {sorted(DISTRIBUTIONS)}") from None
