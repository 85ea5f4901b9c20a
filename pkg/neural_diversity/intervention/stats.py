"""Paired statistical tests used to analyse interventions and comparisons.

Tail probabilities come from ``scipy.stats``. Degenerate inputs (zero
variance, no discordant pairs) follow the convention p = 1 and set a flag
on the returned result instead of raising.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from neural_diversity.utils import SeedStreams

logger = logging.getLogger(__name__)

MCNEMAR_EXACT_MAX = 25
BOOTSTRAP_RESAMPLES = 10_000
MIN_BOOTSTRAP_RESAMPLES = 1000


@dataclass(frozen=True)
class TTestResult:
    """Paired t-test on a vector of deltas.

    Attributes:
        t (float): Statistic mean / (sd / sqrt(n)).
        p (float): Two-sided p-value with n - 1 degrees of freedom.
        n (int): Number of deltas.
        mean (float): Mean delta.
        sd (float): Sample standard deviation (ddof 1).
        degenerate (bool): The deltas have zero variance.
    """

    t: float
    p: float
    n: int
    mean: float
    sd: float
    degenerate: bool = False


@dataclass(frozen=True)
class FisherResult:
    chi2: float
    dof: int
    p: float


@dataclass(frozen=True)
class McNemarResult:
    """McNemar test on discordant counts; `exact` marks the binomial branch."""

    p: float
    b: int
    c: int
    exact: bool
    degenerate: bool = False


def paired_t_test(deltas: Sequence[float]) -> TTestResult:
    """Two-sided one-sample t-test of paired deltas against 0.

    Zero variance gives p = 1 with ``degenerate`` set; t is then 0 for a
    zero mean and an infinity carrying the sign of the mean otherwise.

    Args:
        deltas (Sequence[float]): Per-sample differences, n >= 2.

    Raises:
        ValueError: Fewer than two deltas or non-finite values.

    Returns:
        TTestResult: Statistic, p-value and summary.
    """
    d = np.asarray(deltas, dtype=np.float64).ravel()
    if d.size < 2:
        msg = f"A paired t-test needs at least 2 deltas, got {d.size}."
        logger.error(msg)
        raise ValueError(msg)
    if not np.all(np.isfinite(d)):
        msg = "The deltas contain non-finite values."
        logger.error(msg)
        raise ValueError(msg)

    mean, sd = float(d.mean()), float(d.std(ddof=1))
    if sd == 0.0:
        t = 0.0 if mean == 0.0 else float(np.copysign(np.inf, mean))
        logger.warning("Zero-variance deltas (mean %s): reporting p=1.", mean)
        return TTestResult(t, 1.0, d.size, mean, sd, degenerate=True)

    res = stats.ttest_1samp(d, 0.0)
    return TTestResult(float(res.statistic), float(res.pvalue), d.size, mean, sd)


def fisher_combine(p_values: Sequence[float]) -> FisherResult:
    """Fisher's method: chi2 = -2 sum ln p with 2k degrees of freedom.

    Raises:
        ValueError: No p-values, or a value outside (0, 1].
    """
    p = np.asarray(p_values, dtype=np.float64).ravel()
    if p.size == 0:
        msg = "Fisher's method needs at least one p-value."
        logger.error(msg)
        raise ValueError(msg)
    if np.any(~np.isfinite(p)) or np.any(p <= 0.0) or np.any(p > 1.0):
        msg = f"p-values must lie in (0, 1], got {p.tolist()}."
        logger.error(msg)
        raise ValueError(msg)
    chi2, combined = stats.combine_pvalues(p, method="fisher")
    return FisherResult(float(chi2), 2 * p.size, float(combined))


def mcnemar_test(b: int, c: int) -> McNemarResult:
    """McNemar test of two paired binary classifiers.

    Exact two-sided binomial test of b successes out of b + c at rate 0.5 when
    b + c <= 25, chi-square with continuity correction above.

    Args:
        b (int): Pairs where only the first classifier is right.
        c (int): Pairs where only the second classifier is right.

    Raises:
        ValueError: A negative count.

    Returns:
        McNemarResult: p-value and branch used; no discordant pairs give p = 1
            with ``degenerate`` set.
    """
    if b < 0 or c < 0:
        msg = f"Discordant counts must be non-negative, got b={b}, c={c}."
        logger.error(msg)
        raise ValueError(msg)
    n = b + c
    if n == 0:
        logger.warning("No discordant pairs: reporting p=1.")
        return McNemarResult(1.0, b, c, exact=True, degenerate=True)
    if n <= MCNEMAR_EXACT_MAX:
        p = stats.binomtest(b, n, 0.5, alternative="two-sided").pvalue
        return McNemarResult(min(1.0, float(p)), b, c, exact=True)
    statistic = (abs(b - c) - 1) ** 2 / n
    return McNemarResult(float(stats.chi2.sf(statistic, 1)), b, c, exact=False)


def bootstrap_test(
    scores_a: Sequence[float],
    scores_b: Sequence[float],
    n_resamples: int = BOOTSTRAP_RESAMPLES,
    seed: int = 0,
) -> float:
    """Two-sided paired bootstrap test of the mean difference a - b.

    The p-value is twice the smaller share of resampled means on either side
    of 0, with the usual +1 correction, capped at 1.

    Args:
        scores_a (Sequence[float]): Scores of the first system.
        scores_b (Sequence[float]): Scores of the second system, same samples.
        n_resamples (int, optional): At least 1000. Defaults to 10,000.
        seed (int, optional): Root seed of the resampling indices.

    Raises:
        ValueError: Length mismatch, empty input or too few resamples.

    Returns:
        float: Two-sided p-value.
    """
    a = np.asarray(scores_a, dtype=np.float64).ravel()
    b = np.asarray(scores_b, dtype=np.float64).ravel()
    if a.size != b.size or a.size == 0:
        msg = f"Paired scores need equal non-zero lengths, got {a.size} and {b.size}."
        logger.error(msg)
        raise ValueError(msg)
    if n_resamples < MIN_BOOTSTRAP_RESAMPLES:
        msg = f"n_resamples must be >= {MIN_BOOTSTRAP_RESAMPLES}, got {n_resamples}."
        logger.error(msg)
        raise ValueError(msg)

    diff = a - b
    idx = SeedStreams(seed).rng("bootstrap").integers(0, diff.size, size=(n_resamples, diff.size))
    means = diff[idx].mean(axis=1)
    tail = min(np.count_nonzero(means <= 0.0), np.count_nonzero(means >= 0.0))
    return min(1.0, 2.0 * (tail + 1) / (n_resamples + 1))


def effect_size(deltas: Sequence[float]) -> float:
    """Cohen's d of paired deltas: mean / sd; 0 or +-inf for zero variance."""
    d = np.asarray(deltas, dtype=np.float64).ravel()
    mean, sd = float(d.mean()), float(d.std(ddof=1))
    if sd == 0.0:
        return 0.0 if mean == 0.0 else float(np.copysign(np.inf, mean))
    return mean / sd


def ks_uniformity(p_values: Sequence[float]) -> float:
    """Kolmogorov-Smirnov distance between `p_values` and U(0, 1)."""
    return float(stats.kstest(np.asarray(p_values, dtype=np.float64), "uniform").statistic)


def null_calibration(n_samples: int, n_replications: int = 500, seed: int = 0) -> float:
    """KS distance of paired t-test p-values under a null of no effect.

    Draws `n_replications` vectors of `n_samples` standard normal deltas from
    the ``null`` seed stream. A calibrated test gives a distance near 0.

    Raises:
        ValueError: Fewer than two samples or no replication.
    """
    if n_samples < 2 or n_replications < 1:
        msg = (
            f"Null calibration needs n_samples >= 2 and n_replications >= 1, "
            f"got {n_samples} and {n_replications}."
        )
        logger.error(msg)
        raise ValueError(msg)
    seeds = SeedStreams(seed)
    p_values = [
        paired_t_test(seeds.rng("null", r).normal(size=n_samples)).p for r in range(n_replications)
    ]
    return ks_uniformity(p_values)
