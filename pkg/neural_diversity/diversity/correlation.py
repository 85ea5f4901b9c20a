"""Cross-stream correlation matrices and the spectral diversity index.

``C_ij = (1 / BT) sum_t z_i(t) z_j(t)^T`` over the flattened positions of two
whitened streams. The diversity index is the mean spectral norm of the
cross-stream matrices: 0 for fully decorrelated streams and 1 when the streams
have collapsed onto each other.
"""

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import dask.bag as db
import numpy as np

from neural_diversity.autodiff import tensor as ad
from neural_diversity.autodiff.tensor import Tensor
from neural_diversity.diversity.whitening import FeatureBatch

logger = logging.getLogger(__name__)

POWER_TOL = 1e-8
POWER_MAX_ITERS = 1000
POWER_SEED = 0


@dataclass(frozen=True)
class SpectralNorm:
    """Result of a power iteration.

    Attributes:
        value (float): Estimate of the largest singular value.
        iterations (int): Iterations performed.
        converged (bool): False when `max_iters` was reached first.
    """

    value: float
    iterations: int
    converged: bool


def spectral_norm(
    matrix: np.ndarray,
    tol: float = POWER_TOL,
    max_iters: int = POWER_MAX_ITERS,
    seed: int = POWER_SEED,
) -> SpectralNorm:
    """Largest singular value of `matrix` by power iteration on M^T M.

    The start vector is drawn from a fixed seed. Iteration stops once two
    successive estimates differ by less than `tol`.

    Args:
        matrix (np.ndarray): 2-D array with finite entries.
        tol (float, optional): Convergence tolerance. Defaults to 1e-8.
        max_iters (int, optional): Iteration cap. Defaults to 1000.
        seed (int, optional): Seed of the start vector. Defaults to 0.

    Raises:
        ValueError: Non-finite entries or not a matrix.

    Returns:
        SpectralNorm: Estimate, iteration count and convergence flag.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"Expected a matrix, got shape {m.shape}.")
    if not np.all(np.isfinite(m)):
        raise ValueError("The matrix has non-finite entries.")

    gram = m.T @ m
    v = np.random.default_rng(seed).standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    estimate = np.linalg.norm(m @ v)
    for it in range(1, max_iters + 1):
        w = gram @ v
        w_norm = np.linalg.norm(w)
        if w_norm == 0.0:
            return SpectralNorm(0.0, it, True)
        v = w / w_norm
        new_estimate = np.linalg.norm(m @ v)
        if abs(new_estimate - estimate) < tol:
            return SpectralNorm(float(new_estimate), it, True)
        estimate = new_estimate

    logger.warning(
        "Power iteration did not converge in %s iterations (last estimate %.8g).",
        max_iters,
        estimate,
    )
    return SpectralNorm(float(estimate), max_iters, False)


class CrossCorrelation:
    """Cross-correlation matrix of streams i and j, with a cached spectral norm.

    Args:
        i (int): First stream.
        j (int): Second stream.
        matrix (np.ndarray): The d x d matrix C_ij.
    """

    def __init__(self, i: int, j: int, matrix: np.ndarray) -> None:
        self.i = i
        self.j = j
        self.matrix = matrix
        self._norm: Optional[SpectralNorm] = None

    @property
    def pair(self) -> tuple[int, int]:
        return (self.i, self.j)

    @property
    def spectral_norm(self) -> float:
        if self._norm is None:
            self._norm = spectral_norm(self.matrix)
        return self._norm.value

    @property
    def converged(self) -> bool:
        _ = self.spectral_norm
        return self._norm.converged

    def transpose(self) -> "CrossCorrelation":
        return CrossCorrelation(self.j, self.i, self.matrix.T)


def correlation_tensor(z_i: Tensor, z_j: Tensor) -> Tensor:
    """Recorded C_ij of two flattened (N, d) whitened blocks."""
    return ad.scale(ad.matmul(ad.transpose(z_i), z_j), 1.0 / z_i.shape[0])


def _require_whitened(batch: FeatureBatch) -> None:
    if not batch.whitened:
        msg = "Cross-correlations are defined on whitened features; call whiten() first."
        logger.error(msg)
        raise ValueError(msg)


def cross_correlation(batch: FeatureBatch, i: int, j: int) -> CrossCorrelation:
    """C_ij of a whitened batch, computed on detached values.

    Args:
        batch (FeatureBatch): Whitened features.
        i (int): First stream index.
        j (int): Second stream index; ``i == j`` is a diagnostic.

    Raises:
        ValueError: The batch is not whitened or an index is out of range.

    Returns:
        CrossCorrelation: The matrix and its lazily computed norm.
    """
    _require_whitened(batch)
    if not (0 <= i < batch.P and 0 <= j < batch.P):
        raise ValueError(f"Stream indices ({i}, {j}) out of range for P={batch.P}.")
    if i == j:
        logger.debug("Computing the self-correlation of stream %s.", i)
    z_i, z_j = batch.flat_numpy(i), batch.flat_numpy(j)
    return CrossCorrelation(i, j, z_i.T @ z_j / batch.n_positions)


def stream_pairs(P: int) -> list[tuple[int, int]]:  # pylint: disable=invalid-name
    """Unordered pairs (i, j), i < j, in lexicographic order."""
    return list(combinations(range(P), 2))


@dataclass(frozen=True)
class PairNorm:
    i: int
    j: int
    value: float
    converged: bool


def _pair_norm(pair: tuple[int, int], batch: FeatureBatch) -> PairNorm:
    corr = cross_correlation(batch, *pair)
    return PairNorm(pair[0], pair[1], corr.spectral_norm, corr.converged)


def pair_norms(batch: FeatureBatch, threads: Optional[int] = None) -> list[PairNorm]:
    """Spectral norms of C_ij for every unordered pair, in pair order.

    Args:
        batch (FeatureBatch): Whitened features with P >= 2.
        threads (int | None, optional): Compute pairs on this many threads.

    Returns:
        list[PairNorm]: P(P-1)/2 entries.
    """
    _require_whitened(batch)
    pairs = stream_pairs(batch.P)
    if threads is not None and threads > 1 and len(pairs) > 1:
        return (
            db.from_sequence(pairs, npartitions=min(threads, len(pairs)))
            .map(_pair_norm, batch=batch)
            .compute(scheduler="threads", num_workers=threads)
        )
    return [_pair_norm(pair, batch) for pair in pairs]


def d_spec(batch: FeatureBatch, threads: Optional[int] = None) -> float:
    """Spectral diversity index of a whitened batch.

    The mean over ordered pairs equals the mean over unordered ones, since
    ``||C_ji||_2 = ||C_ij^T||_2``.

    Args:
        batch (FeatureBatch): Whitened features (full mode for an index in [0, 1]).
        threads (int | None, optional): Worker threads for the pair norms.

    Raises:
        ValueError: Fewer than two streams.

    Returns:
        float: Mean spectral norm of the cross-stream correlations.
    """
    if batch.P < 2:
        msg = f"The diversity index needs at least 2 streams, got {batch.P}."
        logger.error(msg)
        raise ValueError(msg)
    norms = pair_norms(batch, threads)
    if not all(n.converged for n in norms):
        logger.warning("Some pair norms did not converge; the index is approximate.")
    return float(np.mean([n.value for n in norms]))
