"""Monte Carlo validation: moment-matched initial laws, ensemble propagation, bracketing checks."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .dynamics import VectorField, integrate_many
from .polynomial import Polynomial, PolynomialError


class Variant(str, enum.Enum):
    NORMAL = "normal"
    UNIFORM_BOX = "uniform_box"


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """F with F F^T = cov; Cholesky when possible, otherwise a symmetric square root."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(cov)
        return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class InitialDistribution:
    """Normal or axis-aligned uniform law with prescribed mean and covariance."""

    variant: Variant
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        variant = Variant(self.variant)
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        n = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (n, n):
            raise ValueError(f"covariance must be {n}x{n} to match the mean")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        if n and np.linalg.eigvalsh(cov)[0] < -1e-10:
            raise ValueError("covariance must be positive semidefinite")
        if variant is Variant.UNIFORM_BOX and np.any(cov - np.diag(np.diag(cov)) != 0):
            raise ValueError("uniform_box requires a diagonal covariance")
        object.__setattr__(self, "variant", variant)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def normal(cls, mean, cov) -> "InitialDistribution":
        return cls(Variant.NORMAL, mean, cov)

    @classmethod
    def uniform_box(cls, mean, cov) -> "InitialDistribution":
        return cls(Variant.UNIFORM_BOX, mean, cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def half_widths(self) -> np.ndarray:
        """Box half-widths sqrt(3)*sigma_i (uniform variant)."""
        return math.sqrt(3.0) * np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def sample_initial(dist: InitialDistribution, count: int, seed: int) -> np.ndarray:
    """``count`` draws of shape (count, n) from a Philox stream keyed by ``seed``.

    Row i depends only on (seed, i, count) through one fixed stream, so the
    same arguments always give bitwise-identical samples.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    n = dist.dim
    if dist.variant is Variant.NORMAL:
        z = rng.standard_normal((count, n))
        return dist.mean + z @ _psd_factor(dist.cov).T
    u = rng.uniform(-1.0, 1.0, size=(count, n))
    return dist.mean + u * dist.half_widths


@dataclass(frozen=True)
class EnsembleStats:
    sample_count: int
    mean: float
    variance: float

    @property
    def standard_error(self) -> float:
        return math.sqrt(self.variance / self.sample_count)

    @classmethod
    def from_values(cls, values: np.ndarray) -> "EnsembleStats":
        values = np.asarray(values, dtype=float)
        count = values.shape[0]
        mean = float(np.sum(values) / count)
        var = float(np.sum((values - mean) ** 2) / (count - 1)) if count > 1 else 0.0
        return cls(count, mean, max(var, 0.0))


def estimate_expectation(field: VectorField, g: Polynomial, dist: InitialDistribution, T: float, count: int,
                         step: float, seed: int) -> EnsembleStats:
    """Sample, integrate every trajectory to T with RK4 and average g at the final states.

    A trajectory that blows up raises ``BlowUpError`` carrying its sample index.
    """
    if dist.dim != field.n_states:
        raise ValueError(f"distribution has dimension {dist.dim}, field has {field.n_states} states")
    if g.space.names != field.state_names:
        raise PolynomialError(f"observable must be a polynomial in {field.state_names}")
    x0 = sample_initial(dist, count, seed)
    xT = integrate_many(field, x0, T, step) if T > 0 else x0
    return EnsembleStats.from_values(g.evaluate_many(xT))


@dataclass(frozen=True)
class Consistency:
    consistent: bool
    slack: float


def consistency_check(stats: EnsembleStats, interval: tuple[float, float]) -> Consistency:
    """Is the ensemble mean inside [lower - 3 se, upper + 3 se]?

    ``slack`` is positive by the distance past the violated edge, and
    otherwise minus the margin to the nearest edge.
    """
    lower, upper = interval
    se = stats.standard_error
    slack = max(stats.mean - (upper + 3 * se), (lower - 3 * se) - stats.mean)
    return Consistency(slack <= 0, float(slack))
