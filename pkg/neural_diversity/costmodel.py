"""Fine-tuning cost arithmetic of parallel-stream variants.

Costs are in units of one forward pass through the full backbone. A standard
fine-tuning step costs 3 units (forward plus a backward pass at twice the
forward cost). Stream variants pay P forward passes, but gradients only flow
through the trainable parameters, so the backward pass shrinks with the
trainable fraction.
"""

import logging
from dataclasses import dataclass

from neural_diversity.errors import ConfigError
from neural_diversity.utils import StrEnum

logger = logging.getLogger(__name__)

BASELINE_UNITS = 3.0
BACKWARD_RATIO = 2.0
INFERENCE_LATENCY = 1.1
REFERENCE_BACKBONE_PARAMS = 495e6
REFERENCE_TRAINABLE_PARAMS = 1.3e6
COST_TABLE_HEADER = ["variant", "forward", "backward", "bt", "other", "total", "relative"]
AMORTIZATION_HEADER = ["variant", "pretrain_tokens", "finetune_tokens", "relative", "lifecycle"]


class BtMode(StrEnum):
    """Decorrelation term paid during fine-tuning."""

    NONE = "none"
    SIMPLE = "simple"
    FULL = "full"


BT_UNITS = {BtMode.NONE: 0.0, BtMode.SIMPLE: 0.1, BtMode.FULL: 1.6}
# prefix and aggregator overhead of shared and per-stream adapters
OTHER_UNITS = {True: 0.01, False: 0.05}


@dataclass(frozen=True)
class OverheadSpec:
    bt: float = 0.0
    other: float = 0.0


@dataclass(frozen=True)
class VariantCost:
    """Per-step cost of one fine-tuning variant.

    Attributes:
        name (str): Variant label.
        forward (float): Forward units, P times one backbone pass.
        backward (float): Backward units through the trainable parameters.
        bt (float): Decorrelation units.
        other (float): Prefix and aggregator units.
    """

    name: str
    forward: float
    backward: float
    bt: float
    other: float

    @property
    def total(self) -> float:
        return self.forward + self.backward + self.bt + self.other

    @property
    def relative(self) -> float:
        return self.total / BASELINE_UNITS

    def to_row(self) -> list:
        return [
            self.name,
            round(self.forward, 3),
            round(self.backward, 3),
            round(self.bt, 3),
            round(self.other, 3),
            round(self.total, 3),
            round(self.relative, 3),
        ]


def variant_cost(
    P: int,  # pylint: disable=invalid-name
    trainable_fraction: float,
    overhead: OverheadSpec = OverheadSpec(),
    name: str = "custom",
) -> VariantCost:
    """Cost of a variant with P streams and the given trainable fraction.

    Args:
        P (int): Number of streams, at least 1.
        trainable_fraction (float): Share of parameters receiving gradients,
            in (0, 1].
        overhead (OverheadSpec, optional): Decorrelation and other units.
        name (str, optional): Row label.

    Raises:
        ConfigError: An argument outside its range.

    Returns:
        VariantCost: The cost breakdown.
    """
    if P < 1:
        msg = f"P must be >= 1, got {P}."
        logger.error(msg)
        raise ConfigError(msg)
    if not 0.0 < trainable_fraction <= 1.0:
        msg = f"trainable_fraction must lie in (0, 1], got {trainable_fraction}."
        logger.error(msg)
        raise ConfigError(msg)
    if overhead.bt < 0 or overhead.other < 0:
        msg = f"Overhead units must be non-negative, got {overhead}."
        logger.error(msg)
        raise ConfigError(msg)
    return VariantCost(
        name=name,
        forward=float(P),
        backward=BACKWARD_RATIO * trainable_fraction,
        bt=overhead.bt,
        other=overhead.other,
    )


def golden_variants() -> list[VariantCost]:
    """Standard fine-tuning and the four P = 4 stream variants."""
    fraction = REFERENCE_TRAINABLE_PARAMS / REFERENCE_BACKBONE_PARAMS
    return [
        variant_cost(1, 1.0, name="Standard"),
        variant_cost(4, fraction, OverheadSpec(0.0, OTHER_UNITS[True]), "ParScale"),
        # a total of 4.155 for this row needs the per-stream overhead
        variant_cost(4, fraction, OverheadSpec(BT_UNITS[BtMode.SIMPLE], OTHER_UNITS[False]), "ParScale-BT"),
        variant_cost(4, fraction, OverheadSpec(0.0, OTHER_UNITS[False]), "Indep. LoRA"),
        variant_cost(4, fraction, OverheadSpec(BT_UNITS[BtMode.FULL], OTHER_UNITS[False]), "ND-LoRA"),
    ]


def cost_table(variants: list[VariantCost]) -> list[list]:
    """Rows of `COST_TABLE_HEADER`, values rounded to three decimals."""
    return [v.to_row() for v in variants]


def amortized_cost(pretrain_tokens: float, finetune_tokens: float, relative: float) -> float:
    """Lifecycle cost factor: (pretrain + finetune * relative) / pretrain.

    Raises:
        ConfigError: Non-positive pre-training tokens or relative factor, or
            negative fine-tuning tokens.
    """
    if pretrain_tokens <= 0 or finetune_tokens < 0 or relative <= 0:
        msg = (
            f"Invalid amortization inputs: pretrain={pretrain_tokens}, "
            f"finetune={finetune_tokens}, relative={relative}."
        )
        logger.error(msg)
        raise ConfigError(msg)
    return (pretrain_tokens + finetune_tokens * relative) / pretrain_tokens


def inference_latency_factor(P: int) -> float:  # pylint: disable=invalid-name
    """Inference latency relative to a single-stream model."""
    return 1.0 if P == 1 else INFERENCE_LATENCY


@dataclass(frozen=True)
class CostConfig:
    """The ``cost`` configuration section: one variant plus amortization inputs."""

    P: int = 4  # pylint: disable=invalid-name
    backbone_params: float = REFERENCE_BACKBONE_PARAMS
    trainable_params: float = REFERENCE_TRAINABLE_PARAMS
    bt_mode: BtMode = BtMode.FULL
    shared_lora: bool = False
    pretrain_tokens: float = 1e12
    finetune_tokens: float = 2e7

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "bt_mode", BtMode(self.bt_mode))
        except ValueError as e:
            msg = f"Invalid bt_mode: {e}"
            logger.error(msg)
            raise ConfigError(msg) from e
        if self.backbone_params <= 0 or not 0 < self.trainable_params <= self.backbone_params:
            msg = (
                f"Need 0 < trainable_params <= backbone_params, got "
                f"{self.trainable_params} and {self.backbone_params}."
            )
            logger.error(msg)
            raise ConfigError(msg)

    def variant(self) -> VariantCost:
        """Cost of the configured variant; P = 1 means standard fine-tuning."""
        if self.P == 1:
            return variant_cost(1, 1.0, name="configured")
        overhead = OverheadSpec(BT_UNITS[self.bt_mode], OTHER_UNITS[self.shared_lora])
        return variant_cost(self.P, self.trainable_params / self.backbone_params, overhead, "configured")
