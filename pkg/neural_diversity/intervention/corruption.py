"""Inference-time substitution of hidden states across streams.

A corrupted stream receives, at randomly chosen positions, the hidden
state another stream has at the same position. Values are copied as they
are, so activation magnitudes stay realistic while the streams become more
alike.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from neural_diversity.autodiff.tensor import Tensor
from neural_diversity.errors import ConfigError
from neural_diversity.utils import StrEnum

logger = logging.getLogger(__name__)


class DonorPolicy(StrEnum):
    """Where substituted states come from."""

    RANDOM = "random"
    FIXED = "fixed"


class ScoreKind(StrEnum):
    """Per-sample score: ``ce`` is exp(-CE), ``mc`` a multiple-choice hit."""

    CE = "ce"
    MC = "mc"


@dataclass(frozen=True)
class CorruptionConfig:
    """Options of the corruption experiment.

    Attributes:
        hook_layer (int | None): 1-based layer whose output states are
            substituted before any later RMS normalization reads them; the
            model's design layer when None.
        fraction (float): Share of positions substituted, in [0, 1].
        donor (DonorPolicy): Random other stream, or `donor_stream`.
        seed (int): Root seed of positions, donors and sample indices.
        paired (bool): Score both arms on identical samples.
        target_stream (int | None): Only corrupt this stream; all when None.
        donor_stream (int | None): Donor of the fixed policy.
        n_subexp (int): Independent sub-experiments.
        n_samples (int): Samples per sub-experiment.
        score (ScoreKind): Score computed per sample.
        planted_shift (float): Constant added to corrupted scores, for
            calibrating the statistics.
        dspec_batch (int): Sequences used to measure the diversity change.
    """

    hook_layer: Optional[int] = None
    fraction: float = 0.25
    donor: DonorPolicy = DonorPolicy.RANDOM
    seed: int = 0
    paired: bool = True
    target_stream: Optional[int] = None
    donor_stream: Optional[int] = None
    n_subexp: int = 4
    n_samples: int = 128
    score: ScoreKind = ScoreKind.CE
    planted_shift: float = 0.0
    dspec_batch: int = 32

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "donor", DonorPolicy(self.donor))
            object.__setattr__(self, "score", ScoreKind(self.score))
        except ValueError as e:
            self._reject(f"Invalid corruption option: {e}")
        if not 0.0 <= self.fraction <= 1.0:
            self._reject(f"fraction must lie in [0, 1], got {self.fraction}.")
        if self.donor == DonorPolicy.FIXED and self.donor_stream is None:
            self._reject("The fixed donor policy needs donor_stream.")
        if self.donor_stream is not None and self.donor_stream == self.target_stream:
            self._reject(f"Stream {self.donor_stream} cannot be its own donor.")
        if self.n_subexp < 1 or self.n_samples < 1 or self.dspec_batch < 1:
            self._reject(
                f"Invalid n_subexp={self.n_subexp}, n_samples={self.n_samples} "
                f"or dspec_batch={self.dspec_batch}."
            )

    @staticmethod
    def _reject(msg: str) -> None:
        logger.error(msg)
        raise ConfigError(msg)


def corrupt_streams(
    states: Sequence[np.ndarray], cfg: CorruptionConfig, rng: np.random.Generator
) -> list[np.ndarray]:
    """Substitute a fraction of positions of the target stream(s).

    Donor values are always read from the uncorrupted input, so the result
    does not depend on the order in which streams are processed.

    Args:
        states (Sequence[np.ndarray]): P arrays of shape (B, T, d).
        cfg (CorruptionConfig): Fraction, targets and donor policy.
        rng (np.random.Generator): Source of positions and donors.

    Raises:
        ConfigError: Fewer than two streams, or a stream index out of range.

    Returns:
        list[np.ndarray]: Corrupted copies of `states`.
    """
    n_streams = len(states)
    if n_streams < 2:
        msg = f"Corruption needs at least 2 streams, got {n_streams}."
        logger.error(msg)
        raise ConfigError(msg)
    for index in (cfg.target_stream, cfg.donor_stream):
        if index is not None and not 0 <= index < n_streams:
            msg = f"Stream {index} does not exist among {n_streams}."
            logger.error(msg)
            raise ConfigError(msg)

    out = [np.array(s, copy=True) for s in states]
    if cfg.fraction == 0.0:
        return out

    n_batch, n_pos = states[0].shape[:2]
    n_total = n_batch * n_pos
    k = int(round(cfg.fraction * n_total))
    source = np.stack(states)
    targets = range(n_streams) if cfg.target_stream is None else [cfg.target_stream]
    for target in targets:
        flat_idx = rng.choice(n_total, size=k, replace=False)
        rows, cols = np.unravel_index(flat_idx, (n_batch, n_pos))
        if cfg.donor == DonorPolicy.FIXED:
            donors = np.full(k, cfg.donor_stream)
        else:
            # uniform over the other streams
            donors = rng.integers(0, n_streams - 1, size=k)
            donors = donors + (donors >= target)
        out[target][rows, cols] = source[donors, rows, cols]
    return out


def corruption_hook(cfg: CorruptionConfig, rng: np.random.Generator):
    """Forward hook applying :func:`corrupt_streams` to token positions.

    Positions before `offset` hold input prefix tokens and are left alone.
    """

    def hook(states: list[Tensor], offset: int) -> list[Tensor]:
        arrays = [s.data[:, offset:] for s in states]
        corrupted = corrupt_streams(arrays, cfg, rng)
        result = []
        for original, new in zip(states, corrupted):
            data = np.array(original.data, copy=True)
            data[:, offset:] = new
            result.append(Tensor(data))
        return result

    return hook
