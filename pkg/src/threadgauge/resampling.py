"""Permutation null tests for the coupling and percentile bootstrap intervals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import inference
from .errors import ConvergenceError, DegenerateDataError
from .inference import RegressionSample
from .rng import map_replicates, substream

MAX_FAILURE_SHARE = 0.05


@dataclass(frozen=True)
class PermutationResult:
    statistic_name: str
    observed: float
    null_draws: np.ndarray = field(repr=False)
    p_two_sided: float
    n_perm: int
    n_failed: int = 0

    @property
    def n_valid(self) -> int:
        return int(np.isfinite(self.null_draws).sum())


@dataclass(frozen=True)
class BootstrapResult:
    estimand: str
    point: float
    ci_lo: float
    ci_hi: float
    n_resamples: int
    alpha: float
    draws: np.ndarray | None = field(default=None, repr=False, compare=False)


def permutation_p_value(observed: float, null_draws: np.ndarray) -> float:
    """Add-one two-sided p-value ``(1 + #{|null| >= |obs|}) / (B + 1)`` over finite draws."""
    draws = np.asarray(null_draws, dtype=float)
    draws = draws[np.isfinite(draws)]
    tol = 1e-12 * max(1.0, abs(observed))
    hits = int(np.sum(np.abs(draws) >= abs(observed) - tol))
    return (1 + hits) / (len(draws) + 1)


def permutation_null_test(
    sample: RegressionSample,
    n_perm: int = 1000,
    seed: int = 0,
    q_bins: int = 4,
    bin_level: str = "posts",
    jobs: int | None = 1,
) -> tuple[PermutationResult, PermutationResult]:
    """Shuffle corrective labels across all comment rows, DI held fixed.

    Returns the simple-logistic-slope result and the binned-slope result.
    Replicate ``r`` uses its own substream, so the draws are identical for
    any ``jobs``. Replicates whose logistic fit fails are excluded and
    counted; more than 5% failures raises.
    """
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    observed_simple = inference.fit_logistic_simple(sample).beta
    bins = inference.assign_bins(sample, q_bins, bin_level)
    if bins.n_bins < 2:
        raise DegenerateDataError("binned slope needs at least two bins")
    index = np.asarray(bins.index, dtype=float)

    def binned_from(y):
        k, n = bins.counts(y)
        return inference.ols_slope(index, k / n)

    observed_binned = binned_from(sample.y.astype(float))
    z_levels, z_inv = np.unique(sample.z_di, return_inverse=True)
    n_at = np.bincount(z_inv, minlength=len(z_levels)).astype(float)
    y0 = sample.y.astype(float)

    def one(r: int) -> tuple[float, float]:
        y = substream(seed, "permutation", r).permutation(y0)
        k = np.bincount(z_inv, weights=y, minlength=len(z_levels))
        try:
            simple = inference.logistic_irls(z_levels, k, n_at).beta
        except (ConvergenceError, DegenerateDataError):
            simple = float("nan")
        return simple, binned_from(y)

    draws = np.array(map_replicates(one, n_perm, jobs), dtype=float).reshape(n_perm, 2)
    failed = int(np.sum(~np.isfinite(draws[:, 0])))
    if failed > MAX_FAILURE_SHARE * n_perm:
        raise ConvergenceError(f"{failed} of {n_perm} permutation fits failed (> 5%)")
    simple = PermutationResult(
        "simple_slope", observed_simple, draws[:, 0],
        permutation_p_value(observed_simple, draws[:, 0]), n_perm, failed,
    )
    binned = PermutationResult(
        "binned_slope", observed_binned, draws[:, 1],
        permutation_p_value(observed_binned, draws[:, 1]), n_perm, 0,
    )
    return simple, binned


_ESTIMANDS = {"mean_delta": np.mean, "median_delta": np.median, "mean": np.mean, "median": np.median}


def bootstrap_percentile(
    values,
    estimand: str = "mean_delta",
    n_resamples: int = 20000,
    alpha: float = 0.05,
    seed: int = 0,
    jobs: int | None = 1,
    keep_draws: bool = False,
) -> BootstrapResult:
    """Percentile bootstrap over independent units (threads).

    Interval endpoints are the inverted-CDF empirical quantiles of the
    resampled statistics at ``alpha/2`` and ``1 - alpha/2``: the
    ``ceil(q * R)``-th smallest draw, no interpolation.
    """
    try:
        stat = _ESTIMANDS[estimand]
    except KeyError:
        raise ValueError(f"unknown estimand {estimand!r}") from None
    name = estimand if estimand.endswith("_delta") else f"{estimand}_delta"
    x = np.asarray(values, dtype=float)
    n = len(x)
    if n < 2:
        raise DegenerateDataError("bootstrap needs at least two values")

    def one(r: int) -> float:
        idx = substream(seed, "bootstrap", r).integers(0, n, size=n)
        return float(stat(x[idx]))

    draws = np.array(map_replicates(one, n_resamples, jobs), dtype=float)
    lo, hi = np.quantile(draws, [alpha / 2.0, 1.0 - alpha / 2.0], method="inverted_cdf")
    return BootstrapResult(
        name, float(stat(x)), float(lo), float(hi), n_resamples, alpha,
        draws if keep_draws else None,
    )
