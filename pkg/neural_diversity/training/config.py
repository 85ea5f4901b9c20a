"""Training options and the ablation arms."""

import logging
from dataclasses import dataclass, replace
from typing import Optional

from neural_diversity.diversity.barlow import RandKConfig
from neural_diversity.diversity.whitening import WhiteningMode
from neural_diversity.errors import ConfigError
from neural_diversity.model.config import PrefixMode, StreamConfig, TargetSelector
from neural_diversity.utils import StrEnum

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_BT = 0.01
ARM_DROPOUT = 0.1


class BtVariant(StrEnum):
    FULL = "full"
    RANDK = "randk"


class Arm(StrEnum):
    """Ablation arms, from a single stream to the full method.

    ``parscale`` arms share one adapter set across streams; ``stream`` arms
    give each stream its own. Arms without decorrelation regularize with
    adapter dropout instead.
    """

    STANDARD = "standard"
    PARSCALE = "parscale"
    PARSCALE_BT = "parscale_bt"
    STREAM = "stream"
    STREAM_BT = "stream_bt"
    NDLORA = "ndlora"

    @property
    def uses_bt(self) -> bool:
        return self in (Arm.PARSCALE_BT, Arm.STREAM_BT, Arm.NDLORA)


@dataclass(frozen=True)
class TrainConfig:
    """Options of one fine-tuning run.

    Attributes:
        lambda_bt (float): Weight of the decorrelation loss, >= 0.
        design_layer (int): Layer whose features are decorrelated.
        P (int): Number of streams.
        rank (int): LoRA rank.
        n_prefix (int): Prefix tokens per stream.
        epsilon (float): Aggregator smoothing.
        lr (float): Peak learning rate.
        warmup_frac (float): Fraction of the steps spent warming up, in [0, 0.5].
        steps (int): Total number of optimizer steps.
        batch_size (int): Sequences per step.
        seq_len (int): Tokens per sequence.
        seed (int): Root seed.
        lora_targets (TargetSelector): Modules receiving adapters.
        bt_variant (BtVariant): Full or sampled pairwise loss.
        randk_k (int): Pairs sampled per step by the RandK variant.
        randk_weights (tuple[float, ...] | None): Pair sampling distribution;
            uniform when None.
        dropout (float): Dropout on adapter outputs.
        shared_lora (bool): One adapter set for all streams.
        shared_prefix_init (bool): Identical prefix initialization.
        prefix_mode (PrefixMode): Key/value or input prefix.
        whitening (WhiteningMode): Whitening used for the diversity probe.
        weight_decay (float): Decoupled weight decay on adapters and aggregator.
        log_every (int): Steps between two trace rows.
        eval_size (int): Held-out sequences scored by :func:`evaluate`.
    """

    lambda_bt: float = DEFAULT_LAMBDA_BT
    design_layer: int = 2
    P: int = 4  # pylint: disable=invalid-name
    rank: int = 16
    n_prefix: int = 48
    epsilon: float = 0.1
    lr: float = 3e-4
    warmup_frac: float = 0.02
    steps: int = 2000
    batch_size: int = 16
    seq_len: int = 128
    seed: int = 0
    lora_targets: TargetSelector = TargetSelector.KVQ
    bt_variant: BtVariant = BtVariant.FULL
    randk_k: int = 2
    randk_weights: Optional[tuple[float, ...]] = None
    dropout: float = 0.0
    shared_lora: bool = False
    shared_prefix_init: bool = False
    prefix_mode: PrefixMode = PrefixMode.KV
    whitening: WhiteningMode = WhiteningMode.FULL
    weight_decay: float = 0.01
    log_every: int = 50
    eval_size: int = 64

    def __post_init__(self) -> None:
        try:
            for name, enum in [
                ("lora_targets", TargetSelector),
                ("bt_variant", BtVariant),
                ("prefix_mode", PrefixMode),
                ("whitening", WhiteningMode),
            ]:
                object.__setattr__(self, name, enum(getattr(self, name)))
        except ValueError as e:
            self._reject(f"Invalid training option: {e}")
        if self.lambda_bt < 0:
            self._reject(f"lambda_bt must be >= 0, got {self.lambda_bt}.")
        if not 0.0 <= self.warmup_frac <= 0.5:
            self._reject(f"warmup_frac must lie in [0, 0.5], got {self.warmup_frac}.")
        if self.steps < 0 or self.batch_size < 1 or self.seq_len < 2:
            self._reject(
                f"Invalid steps={self.steps}, batch_size={self.batch_size} or seq_len={self.seq_len}."
            )
        if self.lr < 0 or self.weight_decay < 0:
            self._reject(f"Invalid lr={self.lr} or weight_decay={self.weight_decay}.")
        if self.log_every < 1 or self.eval_size < 1:
            self._reject(f"Invalid log_every={self.log_every} or eval_size={self.eval_size}.")

    @staticmethod
    def _reject(msg: str) -> None:
        logger.error(msg)
        raise ConfigError(msg)

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.steps))

    def stream_config(self) -> StreamConfig:
        """Model-side options of this run."""
        return StreamConfig(
            P=self.P,
            rank=self.rank,
            n_prefix=self.n_prefix,
            epsilon=self.epsilon,
            lora_targets=self.lora_targets,
            prefix_mode=self.prefix_mode,
            shared_lora=self.shared_lora,
            shared_prefix_init=self.shared_prefix_init,
            design_layer=self.design_layer,
            adapter_dropout=self.dropout,
        )

    def randk_config(self) -> RandKConfig:
        weights = None if self.randk_weights is None else tuple(self.randk_weights)
        return RandKConfig(K=self.randk_k, weights=weights, seed=self.seed)


def apply_arm(cfg: TrainConfig, arm: str) -> TrainConfig:
    """Resolve an ablation arm into training options.

    Args:
        cfg (TrainConfig): Base options; stream count, rank, schedule and
            seed are kept.
        arm (str): One of :class:`Arm`.

    Raises:
        ConfigError: Unknown arm, or a multi-stream arm with P < 2.

    Returns:
        TrainConfig: Options of the arm.
    """
    try:
        arm = Arm(arm)
    except ValueError as e:
        msg = f"Unknown arm '{arm}', expected one of {[a.value for a in Arm]}."
        logger.error(msg)
        raise ConfigError(msg) from e

    lambda_bt = cfg.lambda_bt if cfg.lambda_bt > 0 else DEFAULT_LAMBDA_BT
    if arm == Arm.STANDARD:
        return replace(cfg, P=1, lambda_bt=0.0, shared_lora=False, dropout=0.0)
    if cfg.P < 2:
        msg = f"Arm '{arm}' needs at least two streams, got P={cfg.P}."
        logger.error(msg)
        raise ConfigError(msg)

    options = {
        Arm.PARSCALE: dict(shared_lora=True, lambda_bt=0.0, dropout=ARM_DROPOUT, lora_targets="all"),
        Arm.PARSCALE_BT: dict(shared_lora=True, lambda_bt=lambda_bt, dropout=0.0, lora_targets="all"),
        Arm.STREAM: dict(shared_lora=False, lambda_bt=0.0, dropout=ARM_DROPOUT, lora_targets="all"),
        Arm.STREAM_BT: dict(shared_lora=False, lambda_bt=lambda_bt, dropout=0.0, lora_targets="all"),
        Arm.NDLORA: dict(shared_lora=False, lambda_bt=lambda_bt, dropout=0.0, lora_targets="kvq"),
    }[arm]
    logger.debug("Arm %s resolved to %s.", arm, options)
    return replace(cfg, **options)
