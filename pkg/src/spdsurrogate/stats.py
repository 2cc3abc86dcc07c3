"""Trial aggregation: mean/std, distribution-free tolerance bounds, grid audits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import min_eigenvalues

__all__ = [
    "TrialSummary",
    "mean_std",
    "order_statistic_index",
    "minimum_sample_size",
    "tolerance_bound",
    "factorial_grid",
    "indefiniteness_grid",
]


@dataclass
class TrialSummary:
    test_errors: list[float] = field(default_factory=list)
    diverged_count: int = 0

    def add(self, error: float | None) -> None:
        if error is None or not math.isfinite(error):
            self.diverged_count += 1
        else:
            if error < 0:
                raise ValueError("test errors are non-negative")
            self.test_errors.append(float(error))


def mean_std(errors) -> tuple[float, float]:
    """Sample mean and sample standard deviation (N - 1 denominator)."""
    x = np.asarray(errors, dtype=np.float64)
    if x.size < 2:
        raise ValueError("mean_std needs at least two values")
    mu = x.sum() / x.size
    return float(mu), float(np.sqrt(np.sum((x - mu) ** 2) / (x.size - 1)))


def _log_binom_pmf(n: int, i: int, p: float) -> float:
    return (
        math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1)
        + i * math.log(p) + (n - i) * math.log1p(-p)
    )


def order_statistic_index(n: int, p: float = 0.95, confidence: float = 0.90) -> int | None:
    """Smallest 1-based rank ``r`` with ``P(Binomial(n, p) <= r - 1) >= confidence``.

    The ``r``-th smallest of ``n`` i.i.d. draws then bounds the ``p`` quantile
    from above with the requested confidence. Returns ``None`` when even the
    sample maximum is not enough.
    """
    if not (0.0 < p < 1.0 and 0.0 < confidence < 1.0):
        raise ValueError("p and confidence must lie in (0, 1)")
    log_cdf = -math.inf
    log_conf = math.log(confidence)
    for k in range(1, n + 1):
        log_cdf = np.logaddexp(log_cdf, _log_binom_pmf(n, k - 1, p))
        if log_cdf >= log_conf:
            return k
    return None


def minimum_sample_size(p: float = 0.95, confidence: float = 0.90) -> int:
    """Smallest ``n`` with ``1 - p**n >= confidence``."""
    n = max(1, math.ceil(math.log1p(-confidence) / math.log(p)) - 1)
    while 1.0 - p ** n < confidence:
        n += 1
    return n


def tolerance_bound(errors, p: float = 0.95, confidence: float = 0.90) -> float:
    """One-sided nonparametric upper tolerance limit for the ``p`` quantile."""
    x = np.sort(np.asarray(errors, dtype=np.float64))
    r = order_statistic_index(len(x), p, confidence)
    if r is None:
        raise ValueError(
            f"{len(x)} samples are too few for a {p:g}/{confidence:g} tolerance bound; "
            f"need at least {minimum_sample_size(p, confidence)}"
        )
    return float(x[r - 1])


def factorial_grid(lower, upper, size: int = 10) -> np.ndarray:
    """``size**d`` points, endpoints included, first coordinate varying slowest."""
    axes = [np.linspace(lo, hi, size) for lo, hi in zip(lower, upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def indefiniteness_grid(models, grid) -> np.ndarray:
    """Percent of models whose prediction has ``lambda_min <= 0`` at each grid point.

    ``models`` may hold objects with ``predict(theta)`` or precomputed
    boolean arrays (one flag per grid point).
    """
    grid = np.asarray(grid, dtype=np.float64)
    if not models:
        raise ValueError("need at least one model")
    counts = np.zeros(len(grid))
    for model in models:
        if hasattr(model, "predict"):
            flags = min_eigenvalues(model.predict(grid)) <= 0.0
        else:
            flags = np.asarray(model, dtype=bool)
        counts += flags
    return 100.0 * counts / len(models)
