"""Barlow Twins decorrelation across streams.

The loss pushes every cross-stream correlation matrix toward the identity:
``L = mean over pairs of ||C_ij - I||_F^2``. The full variant visits all
P(P-1)/2 unordered pairs; the RandK variant samples K of them per call.
Both reduce their pairs in lexicographic order, so that sampling every pair
without replacement gives exactly the full loss.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from neural_diversity.autodiff import tensor as ad
from neural_diversity.autodiff.tensor import Tensor
from neural_diversity.diversity.correlation import correlation_tensor, stream_pairs
from neural_diversity.diversity.whitening import FeatureBatch, WhiteningMode, whiten
from neural_diversity.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RandKConfig:
    """Pair sampling of the stochastic loss.

    Attributes:
        K (int): Pairs per call, between 1 and P(P-1)/2.
        weights (tuple[float, ...] | None): Sampling distribution over the
            unordered pairs in lexicographic order; uniform when None.
        seed (int): Seed of the sampling stream.
    """

    K: int = 2  # pylint: disable=invalid-name
    weights: Optional[tuple[float, ...]] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ConfigError(f"RandK needs K >= 1, got {self.K}.")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError(f"RandK weights must be >= 0 and sum to 1, got {self.weights}.")

    def covers_all_pairs(self) -> bool:
        return self.weights is None or all(w > 0 for w in self.weights)


@dataclass
class BtLoss:
    """A decorrelation loss with the number of pair evaluations it cost."""

    loss: Tensor
    pair_evals: int
    pairs: tuple[tuple[int, int], ...] = ()

    def item(self) -> float:
        return self.loss.item()


def _prepare(batch: FeatureBatch) -> FeatureBatch:
    if batch.P < 2:
        msg = f"The decorrelation loss needs at least 2 streams, got {batch.P}."
        logger.error(msg)
        raise ValueError(msg)
    if batch.whitened:
        return batch
    return whiten(batch, WhiteningMode.PER_DIMENSION)


def _mean_pair_loss(batch: FeatureBatch, pairs: Sequence[tuple[int, int]]) -> Tensor:
    eye = Tensor(np.eye(batch.dim, dtype=batch.streams[0].dtype))
    flat = {}
    total = None
    for i, j in sorted(pairs):
        for k in (i, j):
            if k not in flat:
                flat[k] = batch.flat(k)
        term = ad.frobenius_sq(ad.sub(correlation_tensor(flat[i], flat[j]), eye))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(pairs))


def bt_loss_full(batch: FeatureBatch) -> BtLoss:
    """Decorrelation loss over every unordered stream pair.

    Unwhitened input is standardized per dimension inside the recorded graph.

    Args:
        batch (FeatureBatch): Features of P >= 2 streams.

    Raises:
        ValueError: Fewer than two streams.

    Returns:
        BtLoss: Scalar loss and ``P(P-1)/2`` pair evaluations.
    """
    batch = _prepare(batch)
    pairs = stream_pairs(batch.P)
    return BtLoss(_mean_pair_loss(batch, pairs), len(pairs), tuple(pairs))


def randk_pairs(
    P: int, cfg: RandKConfig, rng: np.random.Generator  # pylint: disable=invalid-name
) -> list[tuple[int, int]]:
    """Sample K distinct unordered pairs, returned in lexicographic order.

    Raises:
        ConfigError: K exceeds the number of pairs or the weights do not match it.
    """
    pairs = stream_pairs(P)
    if cfg.K > len(pairs):
        msg = f"RandK asks for K={cfg.K} pairs but P={P} streams only have {len(pairs)}."
        logger.error(msg)
        raise ConfigError(msg)
    weights = None
    if cfg.weights is not None:
        if len(cfg.weights) != len(pairs):
            raise ConfigError(f"Expected {len(pairs)} RandK weights, got {len(cfg.weights)}.")
        weights = np.asarray(cfg.weights, dtype=np.float64)
        if np.count_nonzero(weights) < cfg.K:
            msg = f"RandK asks for K={cfg.K} pairs but {np.count_nonzero(weights)} have a positive weight."
            logger.error(msg)
            raise ConfigError(msg)
    picked = rng.choice(len(pairs), size=cfg.K, replace=False, p=weights)
    return [pairs[k] for k in sorted(picked)]


def bt_loss_randk(
    batch: FeatureBatch, cfg: RandKConfig, rng: Optional[np.random.Generator] = None
) -> BtLoss:
    """Decorrelation loss over K sampled stream pairs.

    With uniform weights its expectation over the sampling is the full loss.

    Args:
        batch (FeatureBatch): Features of P >= 2 streams.
        cfg (RandKConfig): Sampling configuration.
        rng (np.random.Generator | None, optional): Sampling generator;
            defaults to one seeded with `cfg.seed`.

    Returns:
        BtLoss: Scalar loss and K pair evaluations.
    """
    batch = _prepare(batch)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    pairs = randk_pairs(batch.P, cfg, rng)
    return BtLoss(_mean_pair_loss(batch, pairs), len(pairs), tuple(pairs))
