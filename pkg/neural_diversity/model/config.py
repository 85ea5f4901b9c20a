"""Configuration of the frozen backbone and of the parallel streams."""

import logging
from dataclasses import dataclass, field

from neural_diversity.autodiff.tensor import Precision
from neural_diversity.errors import ConfigError
from neural_diversity.utils import StrEnum

logger = logging.getLogger(__name__)

# 256 byte values, then BOS and PAD
BYTE_VOCAB = 256
BOS_ID = 256
PAD_ID = 257
VOCAB_SIZE = 258


class ModuleTarget(StrEnum):
    """Linear maps of a backbone layer that can carry a low-rank adapter."""

    QUERY = "query"
    KEY = "key"
    VALUE = "value"
    OUTPUT = "output"
    MLP_GATE = "mlp_gate"
    MLP_UP = "mlp_up"
    MLP_DOWN = "mlp_down"

    @property
    def is_attention(self) -> bool:
        return self in (
            ModuleTarget.QUERY,
            ModuleTarget.KEY,
            ModuleTarget.VALUE,
            ModuleTarget.OUTPUT,
        )


class TargetSelector(StrEnum):
    """Groups of modules receiving adapters, one per ablation axis."""

    ALL = "all"
    KVQ = "kvq"
    NO_MLP = "no_mlp"
    NO_ATTENTION = "no_attention"
    NONE = "none"

    @property
    def modules(self) -> tuple[ModuleTarget, ...]:
        if self == TargetSelector.ALL:
            return tuple(ModuleTarget)
        if self == TargetSelector.KVQ:
            return (ModuleTarget.QUERY, ModuleTarget.KEY, ModuleTarget.VALUE)
        if self == TargetSelector.NO_MLP:
            return tuple(m for m in ModuleTarget if m.is_attention)
        if self == TargetSelector.NO_ATTENTION:
            return tuple(m for m in ModuleTarget if not m.is_attention)
        return ()


class PrefixMode(StrEnum):
    """How prefix tokens enter the streams.

    ``kv`` projects the prefix into keys and values at every layer;
    ``input`` prepends it to the token embeddings once.
    """

    KV = "kv"
    INPUT = "input"


def _reject(msg: str) -> None:
    logger.error(msg)
    raise ConfigError(msg)


@dataclass(frozen=True)
class BackboneConfig:
    """Shape of the toy backbone.

    Attributes:
        n_layers (int): Number of transformer layers L.
        d_model (int): Hidden width d.
        n_heads (int): Attention heads; must divide `d_model`.
        vocab_size (int): Byte vocabulary plus specials.
        max_seq_len (int): Longest token sequence (prefix excluded).
        d_ff (int): Width of the gated MLP; 4 d when 0.
        seed (int): Seed of the initialization.
        precision (Precision): Floating point precision of every tensor.
    """

    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = VOCAB_SIZE
    max_seq_len: int = 128
    d_ff: int = 0
    seed: int = 0
    precision: Precision = Precision.DOUBLE

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            _reject(f"The backbone needs at least one layer, got {self.n_layers}.")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            _reject(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}.")
        if self.vocab_size < 2 or self.max_seq_len < 1:
            _reject(f"Invalid vocabulary {self.vocab_size} or length {self.max_seq_len}.")
        object.__setattr__(self, "precision", Precision(self.precision))
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class StreamConfig:
    """What differentiates the P streams and how they are combined.

    Attributes:
        P (int): Number of streams.
        rank (int): LoRA rank r, 1 <= r <= d.
        n_prefix (int): Prefix tokens per stream.
        epsilon (float): Label smoothing of the aggregator, in [0, 1).
        lora_targets (TargetSelector): Modules receiving adapters.
        prefix_mode (PrefixMode): Per-layer key/value prefix or input prefix.
        shared_lora (bool): One adapter set referenced by every stream.
        shared_prefix_init (bool): Initialize every prefix identically.
        design_layer (int): Layer l* whose output is exported as features.
        adapter_dropout (float): Dropout on adapter outputs during training.
    """

    P: int = 4  # pylint: disable=invalid-name
    rank: int = 16
    n_prefix: int = 48
    epsilon: float = 0.1
    lora_targets: TargetSelector = TargetSelector.KVQ
    prefix_mode: PrefixMode = PrefixMode.KV
    shared_lora: bool = False
    shared_prefix_init: bool = False
    design_layer: int = 2
    adapter_dropout: float = 0.0
    modules: tuple = field(init=False, default=())

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "lora_targets", TargetSelector(self.lora_targets))
            object.__setattr__(self, "prefix_mode", PrefixMode(self.prefix_mode))
        except ValueError as e:
            _reject(f"Invalid stream option: {e}")
        if self.P < 1:
            _reject(f"P must be >= 1, got {self.P}.")
        if self.rank < 1:
            _reject(f"The LoRA rank must be >= 1, got {self.rank}.")
        if self.n_prefix < 0:
            _reject(f"n_prefix must be >= 0, got {self.n_prefix}.")
        if not 0.0 <= self.epsilon < 1.0:
            _reject(f"epsilon must lie in [0, 1), got {self.epsilon}.")
        if not 0.0 <= self.adapter_dropout < 1.0:
            _reject(f"adapter_dropout must lie in [0, 1), got {self.adapter_dropout}.")
        object.__setattr__(self, "modules", self.lora_targets.modules)

    def validate_for(self, backbone: BackboneConfig) -> None:
        """Check the options that depend on the backbone shape."""
        if self.rank > backbone.d_model:
            _reject(f"The LoRA rank {self.rank} exceeds d_model={backbone.d_model}.")
        if not 1 <= self.design_layer <= backbone.n_layers:
            _reject(
                f"The design layer {self.design_layer} is outside [1, {backbone.n_layers}]."
            )
