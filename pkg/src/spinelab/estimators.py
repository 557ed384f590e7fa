"""Monte Carlo estimates with batch-means standard errors."""

__author__ = "spinelab contributors"
__copyright__ = "Copyright (C) 2025 spinelab contributors"
__license__ = "MIT"

import dataclasses as dc
import logging
import math

import numpy as np

log = logging.getLogger("estimators")

EXACT_TOL = 1e-9


@dc.dataclass(frozen=True)
class Estimate:
    """A sample mean, its standard error and an optional exact target.

    >>> Estimate(1.2, 0.1, 100, target=1.0).z_score
    2.0
    >>> Estimate(1.0, 0.0, 10, target=1.0).z_score
    0.0
    >>> Estimate(1.5, 0.0, 10, target=1.0).z_score
    inf
    """

    value: float
    standard_error: float
    n_samples: int
    target: float | None = None

    def __post_init__(self) -> None:
        if self.standard_error < 0:
            raise ValueError(f"standard error must be >= 0, got {self.standard_error}")

    @property
    def z_score(self) -> float | None:
        if self.target is None:
            return None
        diff = self.value - self.target
        scale = max(1.0, abs(self.value), abs(self.target))
        # agreement to rounding is exact whatever the standard error says
        if math.isfinite(diff) and abs(diff) <= EXACT_TOL * scale:
            return 0.0
        if self.standard_error > 0:
            return round(diff / self.standard_error, 12)
        return math.copysign(math.inf, diff)

    def passes(self, z_max: float) -> bool:
        z = self.z_score
        return z is None or abs(z) <= z_max


def n_batches(n: int, min_batches: int = 30) -> int:
    """√n batches, at least min_batches, never more than n.

    >>> n_batches(100_000), n_batches(400), n_batches(10)
    (316, 30, 10)
    """
    return min(n, max(min_batches, math.isqrt(n)))


def batch_means(samples, min_batches: int = 30, target: float | None = None) -> Estimate:
    """Mean of `samples` with a standard error from contiguous batch means.

    Sample order is the path index order, so the result does not depend on how
    the paths were scheduled.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    n = x.size
    if n == 0:
        raise ValueError("cannot estimate from zero samples")
    value = float(x.mean())
    if n < 2:
        return Estimate(value, math.inf, n, target)
    if not np.isfinite(value):
        return Estimate(value, math.inf, n, target)
    batches = np.array_split(x, n_batches(n, min_batches))
    sizes = np.array([b.size for b in batches], dtype=np.float64)
    means = np.array([b.mean() for b in batches])
    B = len(batches)
    var = float(np.sum(sizes**2 * (means - value) ** 2)) / n**2 * B / (B - 1)
    return Estimate(value, math.sqrt(max(var, 0.0)), n, target)


def difference(a: Estimate, b: Estimate) -> Estimate:
    """a − b for independent estimates, judged against 0."""
    se = math.hypot(a.standard_error, b.standard_error)
    return Estimate(a.value - b.value, se, min(a.n_samples, b.n_samples), 0.0)
