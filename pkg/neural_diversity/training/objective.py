"""Combined language-modeling and decorrelation objective."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from neural_diversity.autodiff import tensor as ad
from neural_diversity.autodiff.tensor import Tensor
from neural_diversity.diversity.barlow import bt_loss_full, bt_loss_randk
from neural_diversity.diversity.whitening import FeatureBatch
from neural_diversity.training.config import BtVariant, TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class LossParts:
    """Total loss and its components.

    Attributes:
        total (Tensor): ``ce + lambda_bt * bt``, recorded for backward.
        ce (Tensor): Mean next-token cross-entropy.
        bt (Tensor | None): Decorrelation loss, None when it is not computed.
        pair_evals (int): Stream pairs evaluated by the decorrelation loss.
    """

    total: Tensor
    ce: Tensor
    bt: Optional[Tensor] = None
    pair_evals: int = 0

    @property
    def bt_value(self) -> float:
        return self.bt.item() if self.bt is not None else 0.0


def total_loss(
    logits: Tensor,
    targets: np.ndarray,
    features: Optional[FeatureBatch],
    cfg: TrainConfig,
    rng: Optional[np.random.Generator] = None,
) -> LossParts:
    """Cross-entropy plus `cfg.lambda_bt` times the decorrelation loss.

    The decorrelation term is skipped when `lambda_bt` is 0 or the model has
    a single stream, in which case the total is the cross-entropy tensor
    itself.

    Args:
        logits (Tensor): (B, T, V) scores.
        targets (np.ndarray): (B, T) next-token ids.
        features (FeatureBatch | None): Design-layer features.
        cfg (TrainConfig): Weight and variant of the decorrelation loss.
        rng (np.random.Generator | None, optional): Pair sampler of the RandK
            variant.

    Returns:
        LossParts: Total and components.
    """
    ce = ad.cross_entropy(logits, targets)
    if cfg.lambda_bt == 0 or features is None or features.P < 2:
        return LossParts(ce, ce)

    if cfg.bt_variant == BtVariant.RANDK:
        bt = bt_loss_randk(features, cfg.randk_config(), rng)
    else:
        bt = bt_loss_full(features)
    total = ad.add(ce, ad.scale(bt.loss, cfg.lambda_bt))
    return LossParts(total, ce, bt.loss, bt.pair_evals)
