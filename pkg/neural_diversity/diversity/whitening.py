"""Per-stream feature batches and their whitening.

Two modes are offered. Per-dimension standardization runs on the recorded
tensor ops and is what the decorrelation loss differentiates through. Full
(ZCA) whitening is computed on plain numpy and detached; it makes every
stream's covariance the identity, which the diversity index assumes.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from neural_diversity.autodiff import tensor as ad
from neural_diversity.autodiff.tensor import Tensor
from neural_diversity.errors import RankDeficientError, ShapeError
from neural_diversity.utils import StrEnum

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-5
# eigenvalues below this fraction of the largest one count as zero
RANK_RTOL = 1e-10


class WhiteningMode(StrEnum):
    PER_DIMENSION = "per_dimension"
    FULL = "full"


@dataclass
class FeatureBatch:
    """Design-layer features of P streams, each of shape (B, T, d).

    Attributes:
        streams (list[Tensor]): One block per stream.
        whitened (bool): Whether the blocks have been whitened.
        mode (WhiteningMode | None): Whitening mode applied, if any.
    """

    streams: list[Tensor]
    whitened: bool = False
    mode: Optional[WhiteningMode] = None
    _shape: tuple = field(init=False, repr=False, default=())

    def __post_init__(self) -> None:
        if not self.streams:
            raise ShapeError("A feature batch needs at least one stream.")
        shape = self.streams[0].shape
        if len(shape) != 3:
            raise ShapeError(f"Stream features must be (B, T, d), got {shape}.")
        for i, block in enumerate(self.streams):
            if block.shape != shape:
                raise ShapeError(f"Stream {i} has shape {block.shape}, stream 0 has {shape}.")
        self._shape = shape

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], **kwargs) -> "FeatureBatch":
        """Wrap numpy blocks; 2-D blocks (N, d) are read as (1, N, d)."""
        blocks = []
        for arr in arrays:
            arr = np.asarray(arr, dtype=np.float64)
            blocks.append(Tensor(arr[None] if arr.ndim == 2 else arr))
        return cls(blocks, **kwargs)

    @property
    def P(self) -> int:  # pylint: disable=invalid-name
        return len(self.streams)

    @property
    def n_positions(self) -> int:
        """Number of flattened positions B*T."""
        return self._shape[0] * self._shape[1]

    @property
    def dim(self) -> int:
        return self._shape[2]

    def flat(self, i: int) -> Tensor:
        """Stream `i` as a (B*T, d) tensor."""
        return ad.reshape(self.streams[i], (self.n_positions, self.dim))

    def flat_numpy(self, i: int) -> np.ndarray:
        return self.streams[i].data.reshape(self.n_positions, self.dim)

    def detach(self) -> "FeatureBatch":
        return FeatureBatch([s.detach() for s in self.streams], self.whitened, self.mode)


def standardize(x: Tensor, floor: float = VARIANCE_FLOOR) -> Tensor:
    """Zero mean and unit variance per column of a (N, d) tensor.

    Column variances are floored at `floor`, so a constant column maps to zeros.
    """
    centered = x - ad.mean(x, axis=0)
    std = ad.sqrt(ad.clip_min(ad.var(x, axis=0), floor))
    return ad.div(centered, std)


def zca_matrix(x: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    """Symmetric whitening matrix of the centered (N, d) data `x`.

    Raises:
        RankDeficientError: N < d or the covariance is numerically singular.
    """
    n, d = x.shape
    if n < d:
        raise RankDeficientError(
            f"Full whitening needs at least d={d} positions, got {n}", rank=n, dim=d
        )
    cov = x.T @ x / n
    eigvals, eigvecs = np.linalg.eigh(cov)
    rank = int(np.count_nonzero(eigvals > rtol * max(eigvals.max(), 0.0)))
    if rank < d or eigvals.max() <= 0:
        raise RankDeficientError(
            f"Covariance is singular, smallest eigenvalues {eigvals[: d - rank + 1]}",
            rank=rank,
            dim=d,
        )
    return (eigvecs / np.sqrt(eigvals)) @ eigvecs.T


def whiten(
    raw: FeatureBatch,
    mode: WhiteningMode = WhiteningMode.PER_DIMENSION,
    floor: float = VARIANCE_FLOOR,
) -> FeatureBatch:
    """Whiten every stream of `raw` independently.

    Args:
        raw (FeatureBatch): Raw features.
        mode (WhiteningMode, optional): Per-dimension standardization (recorded,
            differentiable) or full ZCA whitening (detached). Defaults to
            per-dimension.
        floor (float, optional): Variance floor of the per-dimension mode.

    Raises:
        RankDeficientError: Full mode on a rank-deficient covariance.

    Returns:
        FeatureBatch: Whitened features of the same shape.
    """
    mode = WhiteningMode(mode)
    shape = raw.streams[0].shape
    out = []
    for i in range(raw.P):
        if mode == WhiteningMode.PER_DIMENSION:
            out.append(ad.reshape(standardize(raw.flat(i), floor), shape))
        else:
            x = raw.flat_numpy(i)
            x = x - x.mean(axis=0)
            try:
                white = x @ zca_matrix(x)
            except RankDeficientError as e:
                logger.error("Stream %s cannot be whitened: %s", i, e)
                raise e
            out.append(Tensor(white.reshape(shape)))
    return FeatureBatch(out, whitened=True, mode=mode)
