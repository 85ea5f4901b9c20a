"""Monte Carlo oracle certifying the closed forms of `theory.bounds`.

Noise vectors are equicorrelated Gaussians built from a common factor,
``m_i = sigma (sqrt(rho) c + sqrt(1 - rho) e_i)``, which reaches the target
correlation exactly without a P x P Cholesky factor. Samples are drawn in
shards, each with its own seeded stream, and reduced in shard order so that a
(seed, shard count) pair always gives the same numbers.
"""

import logging
from dataclasses import dataclass, asdict
from typing import Any, Iterable, Optional

import dask.bag as db
import numpy as np
from scipy.linalg import cholesky

from neural_diversity.diversity.correlation import spectral_norm
from neural_diversity.theory.bounds import cantelli_bound, var_aggregate
from neural_diversity.utils import SeedStreams

logger = logging.getLogger(__name__)

MIN_SAMPLES = 10_000
DEFAULT_SAMPLES = 1_000_000
DEFAULT_SHARDS = 8
CERT_SIGMAS = 3.0

MC_CERT_HEADER = ["sigma2", "mu", "rho", "P", "rate", "se", "bound", "pass"]

# sigma^2, mu, rho and P of the default certification grid
DEFAULT_GRID = {
    "sigma2": [0.25, 1.0, 4.0],
    "mu": [0.5, 1.0, 2.0],
    "rho": [0.0, 0.3, 0.7, 1.0],
    "P": [1, 2, 4, 8],
}


@dataclass(frozen=True)
class McStats:
    """Empirical statistics of the aggregate M.

    Attributes:
        rate (float): Fraction of draws with M <= 0.
        rate_se (float): Binomial standard error of `rate`.
        variance (float): Unbiased sample variance of M.
        variance_se (float): Standard error of `variance` (fourth-moment estimator).
        n_samples (int): Number of draws.
    """

    rate: float
    rate_se: float
    variance: float
    variance_se: float
    n_samples: int


def _shard_sizes(n_samples: int, n_shards: int) -> list[int]:
    base, extra = divmod(n_samples, n_shards)
    return [base + (1 if k < extra else 0) for k in range(n_shards)]


def _draw_shard(
    shard: tuple[int, int], seed: int, sigma: float, mu: float, rho: float, P: int  # pylint: disable=invalid-name
) -> np.ndarray:
    """Draw one shard and return its sufficient statistics.

    Returns (count, #{M <= 0}, sum d, sum d^2, sum d^3, sum d^4) with d = M - mu.
    """
    index, size = shard
    rng = SeedStreams(seed).rng("mc", index)
    common = rng.standard_normal(size)
    own = rng.standard_normal((size, P))
    noise = sigma * (np.sqrt(rho) * common[:, None] + np.sqrt(1.0 - rho) * own)
    dev = noise.mean(axis=1)
    agg = mu + dev
    return np.array(
        [
            size,
            np.count_nonzero(agg <= 0.0),
            dev.sum(),
            (dev**2).sum(),
            (dev**3).sum(),
            (dev**4).sum(),
        ],
        dtype=np.float64,
    )


def mc_aggregate_stats(
    sigma2: float,
    mu: float,
    rho: float,
    P: int,  # pylint: disable=invalid-name
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    n_shards: int = DEFAULT_SHARDS,
    threads: Optional[int] = None,
) -> McStats:
    """Sample the aggregate of P equicorrelated Gaussian streams.

    Args:
        sigma2 (float): Per-stream noise variance.
        mu (float): Truth magnitude.
        rho (float): Pairwise correlation in [0, 1].
        P (int): Number of streams.
        n_samples (int, optional): Number of draws, >= 1e4. Defaults to 1e6.
        seed (int, optional): Root seed. Defaults to 0.
        n_shards (int, optional): Number of independent shards. Defaults to 8.
        threads (int | None, optional): Worker threads. Defaults to dask's choice.

    Raises:
        ValueError: rho outside [0, 1], P < 1 or too few samples.

    Returns:
        McStats: Rate of M <= 0 and sample variance of M with standard errors.
    """
    if not 0.0 <= rho <= 1.0:
        msg = f"rho must lie in [0, 1] for equicorrelated sampling, got {rho}."
        logger.error(msg)
        raise ValueError(msg)
    if P < 1:
        raise ValueError(f"P must be >= 1, got {P}.")
    if n_samples < MIN_SAMPLES:
        raise ValueError(f"At least {MIN_SAMPLES} samples are needed, got {n_samples}.")

    n_shards = max(1, min(n_shards, n_samples))
    shards = list(enumerate(_shard_sizes(n_samples, n_shards)))
    sigma = float(np.sqrt(sigma2))
    parts = (
        db.from_sequence(shards, npartitions=n_shards)
        .map(_draw_shard, seed=seed, sigma=sigma, mu=mu, rho=rho, P=P)
        .compute(scheduler="threads", num_workers=threads)
    )
    # fixed reduction order: shard 0, 1, ...
    total = np.zeros(6)
    for part in parts:
        total = total + part

    n, hits, s1, s2, s3, s4 = total
    rate = hits / n
    mean = s1 / n
    m2 = s2 / n - mean**2
    m4 = s4 / n - 4 * mean * s3 / n + 6 * mean**2 * s2 / n - 3 * mean**4
    variance = m2 * n / (n - 1)
    variance_se = np.sqrt(max(m4 - variance**2 * (n - 3) / (n - 1), 0.0) / n)

    stats = McStats(
        rate=float(rate),
        rate_se=float(np.sqrt(rate * (1.0 - rate) / n)),
        variance=float(variance),
        variance_se=float(variance_se),
        n_samples=int(n),
    )
    logger.debug("MC(sigma2=%s, mu=%s, rho=%s, P=%s): %s", sigma2, mu, rho, P, stats)
    return stats


def mc_hallucination_rate(
    sigma2: float,
    mu: float,
    rho: float,
    P: int,  # pylint: disable=invalid-name
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    **kwargs: Any,
) -> tuple[float, float]:
    """Empirical P(M <= 0) and its binomial standard error.

    See :func:`mc_aggregate_stats` for the arguments.
    """
    stats = mc_aggregate_stats(sigma2, mu, rho, P, n_samples, seed, **kwargs)
    return stats.rate, stats.rate_se


@dataclass(frozen=True)
class CertRow:
    """One certified grid point, serialized as a `mc_cert.csv` row."""

    sigma2: float
    mu: float
    rho: float
    P: int  # pylint: disable=invalid-name
    rate: float
    se: float
    bound: float
    passed: bool
    variance: float
    variance_se: float
    variance_expected: float
    variance_passed: bool

    def to_row(self) -> list[Any]:
        return [self.sigma2, self.mu, self.rho, self.P, self.rate, self.se, self.bound, int(self.passed)]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def certify_grid(
    grid: Optional[dict[str, Iterable[Any]]] = None,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    n_shards: int = DEFAULT_SHARDS,
    threads: Optional[int] = None,
    n_sigmas: float = CERT_SIGMAS,
    progress: bool = False,
) -> list[CertRow]:
    """Certify the variance formula and the Cantelli bound on a grid.

    A point passes when the empirical rate is at most the bound plus
    `n_sigmas` standard errors; its variance check passes when the sample
    variance is within `n_sigmas` standard errors of the closed form.

    Args:
        grid (dict | None, optional): Values of "sigma2", "mu", "rho" and "P".
            Defaults to `DEFAULT_GRID`.
        n_samples (int, optional): Draws per point. Defaults to 1e6.
        seed (int, optional): Root seed shared by every point. Defaults to 0.
        n_shards (int, optional): Shards per point. Defaults to 8.
        threads (int | None, optional): Worker threads.
        n_sigmas (float, optional): Tolerance in standard errors. Defaults to 3.
        progress (bool, optional): Show a progress bar. Defaults to False.

    Returns:
        list[CertRow]: One row per grid point, in sigma2, mu, rho, P order.
    """
    from tqdm import tqdm  # pylint: disable=import-outside-toplevel

    grid = grid or DEFAULT_GRID
    points = [
        (float(s), float(m), float(r), int(p))
        for s in grid["sigma2"]
        for m in grid["mu"]
        for r in grid["rho"]
        for p in grid["P"]
    ]
    rows = []
    for sigma2, mu, rho, p in tqdm(points, desc="certify", disable=not progress):
        stats = mc_aggregate_stats(sigma2, mu, rho, p, n_samples, seed, n_shards, threads)
        expected_var = var_aggregate(sigma2, rho, p)
        bound = cantelli_bound(expected_var, mu)
        passed = stats.rate <= bound + n_sigmas * stats.rate_se
        var_passed = abs(stats.variance - expected_var) <= n_sigmas * stats.variance_se
        if not (passed and var_passed):
            logger.warning(
                "Certification failed at sigma2=%s mu=%s rho=%s P=%s: rate %.5f (bound %.5f), "
                "variance %.5f (expected %.5f).",
                sigma2, mu, rho, p, stats.rate, bound, stats.variance, expected_var,
            )
        rows.append(
            CertRow(
                sigma2, mu, rho, p, stats.rate, stats.rate_se, bound, bool(passed),
                stats.variance, stats.variance_se, expected_var, bool(var_passed),
            )
        )
    return rows


@dataclass(frozen=True)
class CorrelationCheck:
    """Empirical check of the correlation bound for one stream pair.

    Attributes:
        rho (float): Empirical correlation of m_i and m_j.
        kappa (float): Empirical scaling factor ||v_i|| ||v_j|| / (s_i s_j).
        c_norm (float): Spectral norm of the prescribed cross-correlation.
        bound (float): ``kappa * c_norm``.
        se (float): Approximate standard error of `rho`.
        passed (bool): Whether ``rho <= bound + 3 se``.
    """

    rho: float
    kappa: float
    c_norm: float
    bound: float
    se: float
    passed: bool


def correlation_bound(
    v_i: np.ndarray, v_j: np.ndarray, c_ij: np.ndarray, sigma_i: float, sigma_j: float
) -> float:
    """Upper bound ``kappa_ij ||C_ij||_2`` on the correlation of two linear readouts.

    Args:
        v_i (np.ndarray): Readout vector of stream i.
        v_j (np.ndarray): Readout vector of stream j.
        c_ij (np.ndarray): Cross-correlation of the whitened features.
        sigma_i (float): Standard deviation of ``v_i . z_i``.
        sigma_j (float): Standard deviation of ``v_j . z_j``.

    Returns:
        float: The bound on the correlation.
    """
    if sigma_i <= 0 or sigma_j <= 0:
        raise ValueError(f"Standard deviations must be > 0, got {sigma_i} and {sigma_j}.")
    kappa = np.linalg.norm(v_i) * np.linalg.norm(v_j) / (sigma_i * sigma_j)
    return float(kappa * spectral_norm(c_ij).value)


def mc_correlation_check(
    c_ij: np.ndarray,
    v_i: np.ndarray,
    v_j: np.ndarray,
    n_samples: int = 200_000,
    seed: int = 0,
) -> CorrelationCheck:
    """Sample whitened features with cross-correlation `c_ij` and test the bound.

    Features are drawn as ``z_i ~ N(0, I)`` and ``z_j = c_ij^T z_i + L e``
    with ``L L^T = I - c_ij^T c_ij``, so both are white and
    ``E[z_i z_j^T] = c_ij``.

    Raises:
        ValueError: ``||c_ij||_2 >= 1`` (no valid joint covariance).
    """
    c_ij = np.asarray(c_ij, dtype=np.float64)
    d = c_ij.shape[0]
    c_norm = spectral_norm(c_ij).value
    if c_norm >= 1.0:
        raise ValueError(f"The cross-correlation must have spectral norm < 1, got {c_norm}.")
    chol = cholesky(np.eye(d) - c_ij.T @ c_ij, lower=True)

    rng = SeedStreams(seed).rng("mc", d)
    z_i = rng.standard_normal((n_samples, d))
    z_j = z_i @ c_ij + rng.standard_normal((n_samples, d)) @ chol.T
    m_i = z_i @ np.asarray(v_i)
    m_j = z_j @ np.asarray(v_j)

    s_i, s_j = m_i.std(ddof=1), m_j.std(ddof=1)
    rho = float(np.corrcoef(m_i, m_j)[0, 1])
    kappa = float(np.linalg.norm(v_i) * np.linalg.norm(v_j) / (s_i * s_j))
    bound = kappa * c_norm
    se = (1.0 - rho**2) / np.sqrt(n_samples)
    passed = rho <= bound + CERT_SIGMAS * se
    if not passed:
        logger.warning("Correlation bound violated: rho=%.5f > bound=%.5f.", rho, bound)
    return CorrelationCheck(rho, kappa, c_norm, float(bound), float(se), bool(passed))
