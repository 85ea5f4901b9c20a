"""The P-stream model: frozen backbone, per-stream adapters and prefixes,
learned aggregator, and the layer-synchronous forward pass.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Union

import numpy as np

from neural_diversity.autodiff import tensor as ad
from neural_diversity.autodiff.tensor import Tensor
from neural_diversity.diversity.whitening import FeatureBatch
from neural_diversity.errors import ShapeError
from neural_diversity.model.config import BackboneConfig, ModuleTarget, PrefixMode, StreamConfig
from neural_diversity.model.layers import (
    Aggregator,
    Backbone,
    LoraAdapter,
    StreamContext,
    aggregate as aggregate_states,
    expand_batch,
    layer_forward,
)
from neural_diversity.utils import SeedStreams

logger = logging.getLogger(__name__)

PREFIX_STD = 0.02

# hook(states of the P streams, number of prefix positions) -> new states
ForwardHook = Callable[[list[Tensor], int], list[Tensor]]


@dataclass
class NdModel:
    """Frozen backbone plus everything that is trained.

    Attributes:
        backbone (Backbone): Frozen shared backbone.
        config (StreamConfig): Stream options the model was built with.
        streams (list[StreamContext]): Per-stream adapters and prefixes.
        aggregator (Aggregator | None): Mixture weights, None when P is 1.
    """

    backbone: Backbone
    config: StreamConfig
    streams: list[StreamContext]
    aggregator: Optional[Aggregator] = None
    step: int = 0

    @property
    def P(self) -> int:  # pylint: disable=invalid-name
        return len(self.streams)

    def unique_adapters(self) -> list[LoraAdapter]:
        """Adapters in stream then layer order, each shared object once."""
        seen, adapters = set(), []
        for ctx in self.streams:
            for adapter in ctx.adapters.values():
                if id(adapter) not in seen:
                    seen.add(id(adapter))
                    adapters.append(adapter)
        return adapters

    def named_trainable(self) -> Iterator[tuple[str, Tensor]]:
        """Trainable tensors under their checkpoint block names."""
        for adapter in self.unique_adapters():
            owner = "shared" if adapter.stream is None else f"stream{adapter.stream}"
            yield f"{owner}/{adapter.key}.A", adapter.A
            yield f"{owner}/{adapter.key}.B", adapter.B
        for ctx in self.streams:
            if ctx.prefix is not None:
                yield f"prefix{ctx.index}", ctx.prefix
        if self.aggregator is not None:
            for name, tensor in self.aggregator.named_parameters():
                yield f"aggregator/{name}", tensor

    def trainable_parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_trainable()]


@dataclass(frozen=True)
class ParameterCount:
    """Trainable parameters by part; the backbone is reported apart."""

    adapters: int
    prefix: int
    aggregator: int
    backbone: int

    @property
    def trainable(self) -> int:
        return self.adapters + self.prefix + self.aggregator

    def as_dict(self) -> dict[str, int]:
        return {
            "adapters": self.adapters,
            "prefix": self.prefix,
            "aggregator": self.aggregator,
            "trainable": self.trainable,
            "backbone": self.backbone,
        }


@dataclass
class ForwardOutput:
    """Result of :func:`lm_forward`.

    Attributes:
        logits (Tensor): (B, T, V) next-token scores.
        features (FeatureBatch): Design-layer features of every stream.
        alpha (Tensor): Aggregator weights (B, T, P).
        final_states (list[Tensor]): Last-layer states of every stream.
    """

    logits: Tensor
    features: FeatureBatch
    alpha: Tensor
    final_states: list[Tensor]


@dataclass
class StreamOutput:
    hidden: list[Tensor]
    features: Tensor


def _module_dims(cfg: BackboneConfig, target: ModuleTarget) -> tuple[int, int]:
    if target == ModuleTarget.MLP_DOWN:
        return cfg.d_ff, cfg.d_model
    if target in (ModuleTarget.MLP_GATE, ModuleTarget.MLP_UP):
        return cfg.d_model, cfg.d_ff
    return cfg.d_model, cfg.d_model


def _make_adapters(
    rng: np.random.Generator, backbone_cfg: BackboneConfig, cfg: StreamConfig, stream: Optional[int]
) -> dict[str, LoraAdapter]:
    adapters = {}
    for layer in range(backbone_cfg.n_layers):
        for target in cfg.modules:
            d_in, d_out = _module_dims(backbone_cfg, target)
            adapter = LoraAdapter.init(
                rng, stream, layer, target, d_in, d_out, cfg.rank, backbone_cfg.precision.dtype
            )
            adapters[adapter.key] = adapter
    return adapters


def build_model(
    backbone: Union[Backbone, BackboneConfig], config: StreamConfig, seed: int = 0
) -> NdModel:
    """Assemble a P-stream model around a (pre-trained) backbone.

    The backbone is frozen. Adapters start with B = 0, so every stream
    initially computes the backbone function conditioned on its prefix.

    Args:
        backbone (Backbone | BackboneConfig): Backbone, or the config of a
            freshly initialized one.
        config (StreamConfig): Stream options, P included.
        seed (int, optional): Root seed of the stream initialization.

    Raises:
        ConfigError: The stream options do not fit the backbone.

    Returns:
        NdModel: The model, ready to train.
    """
    if isinstance(backbone, BackboneConfig):
        backbone = Backbone.init(backbone)
    bcfg = backbone.config
    config.validate_for(bcfg)
    if not backbone.frozen:
        backbone.freeze()

    seeds = SeedStreams(seed)
    dtype = bcfg.precision.dtype
    shared = _make_adapters(seeds.rng("init", 1, 0), bcfg, config, None) if config.shared_lora else None

    first_prefix = None
    streams = []
    for i in range(config.P):
        rng = seeds.rng("init", 2, i)
        adapters = shared if shared is not None else _make_adapters(rng, bcfg, config, i)
        prefix = None
        if config.n_prefix:
            if config.shared_prefix_init and first_prefix is not None:
                values = first_prefix.copy()
            else:
                values = rng.normal(0.0, PREFIX_STD, size=(config.n_prefix, bcfg.d_model)).astype(dtype)
                first_prefix = values
            prefix = Tensor(values.copy(), requires_grad=True, name=f"prefix{i}")
        streams.append(StreamContext(i, dict(adapters), prefix))

    aggregator = None
    if config.P > 1:
        aggregator = Aggregator.init(seeds.rng("init", 3), config.P, bcfg.d_model, config.epsilon, dtype)

    model = NdModel(backbone, config, streams, aggregator)
    logger.info(
        "Built a %s-stream model (targets=%s, rank=%s, prefix=%s): %s trainable parameters.",
        config.P,
        config.lora_targets,
        config.rank,
        config.n_prefix,
        parameter_count(model).trainable,
    )
    return model


def parameter_count(model: NdModel) -> ParameterCount:
    """Count trainable parameters by part (shared adapters counted once)."""
    adapters = sum(t.size for a in model.unique_adapters() for t in a.parameters())
    prefix = sum(ctx.prefix.size for ctx in model.streams if ctx.prefix is not None)
    agg = sum(t.size for t in model.aggregator.parameters()) if model.aggregator else 0
    backbone = sum(t.size for t in model.backbone.parameters())
    return ParameterCount(adapters, prefix, agg, backbone)


def _check_tokens(tokens: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.ndim != 2:
        raise ShapeError(f"Token ids must be (B, T), got shape {tokens.shape}.")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ShapeError(f"Token ids must be integers, got {tokens.dtype}.")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ShapeError(f"Sequence length {tokens.shape[1]} exceeds the maximum {cfg.max_seq_len}.")
    return tokens


def _input_states(model: NdModel, tokens: np.ndarray, ctx: StreamContext) -> Tensor:
    x = model.backbone.embed(tokens)
    if model.config.prefix_mode == PrefixMode.INPUT and ctx.prefix is not None:
        x = ad.concat([expand_batch(ctx.prefix, tokens.shape[0]), x], axis=1)
    return x


def _offset(model: NdModel, ctx: StreamContext) -> int:
    if model.config.prefix_mode == PrefixMode.INPUT and ctx.prefix is not None:
        return ctx.prefix.shape[0]
    return 0


def _run_layers(
    model: NdModel,
    tokens: np.ndarray,
    streams: list[StreamContext],
    hooks: Optional[dict[int, ForwardHook]] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[list[list[Tensor]], list[Tensor]]:
    """Run `streams` layer by layer; return per-layer states and features."""
    bcfg, cfg = model.backbone.config, model.config
    hooks = hooks or {}
    kv_prefix = cfg.prefix_mode == PrefixMode.KV
    dropout = cfg.adapter_dropout if rng is not None else 0.0
    offsets = [_offset(model, ctx) for ctx in streams]

    states = [_input_states(model, tokens, ctx) for ctx in streams]
    per_layer, features = [], []
    for index, layer in enumerate(model.backbone.layers):
        states = [
            layer_forward(x, layer, index, bcfg, ctx, kv_prefix, dropout, rng)
            for x, ctx in zip(states, streams)
        ]
        depth = index + 1
        if depth in hooks:
            states = hooks[depth](states, offsets[0])
        if depth == cfg.design_layer:
            features = [ad.slice_axis(x, 1, off) for x, off in zip(states, offsets)]
        per_layer.append([ad.slice_axis(x, 1, off) if off else x for x, off in zip(states, offsets)])
    return per_layer, features


def stream_forward(model: NdModel, tokens: np.ndarray, i: int) -> StreamOutput:
    """Run stream `i` alone through every layer.

    Args:
        model (NdModel): The model.
        tokens (np.ndarray): Token ids (B, T) or (T,).
        i (int): Stream index.

    Raises:
        ShapeError: Bad token shape, out-of-range ids or a sequence longer
            than the backbone's maximum.

    Returns:
        StreamOutput: Token-position states after every layer and the
            design-layer features.
    """
    tokens = _check_tokens(tokens, model.backbone.config)
    per_layer, features = _run_layers(model, tokens, [model.streams[i]])
    return StreamOutput([states[0] for states in per_layer], features[0])


def aggregate(states: list[Tensor], aggregator: Optional[Aggregator]) -> tuple[Tensor, Tensor]:
    """Combine final stream states; a single stream gets weight 1."""
    if aggregator is None:
        if len(states) != 1:
            raise ShapeError(f"{len(states)} streams need an aggregator.")
        n_batch, n_pos, _ = states[0].shape
        return states[0], Tensor(np.ones((n_batch, n_pos, 1), dtype=states[0].dtype))
    return aggregate_states(states, aggregator)


def lm_forward(
    model: NdModel,
    tokens: np.ndarray,
    hooks: Optional[dict[int, ForwardHook]] = None,
    rng: Optional[np.random.Generator] = None,
) -> ForwardOutput:
    """Run all P streams, aggregate and project through the frozen head.

    Args:
        model (NdModel): The model.
        tokens (np.ndarray): Token ids (B, T) or (T,).
        hooks (dict[int, ForwardHook] | None, optional): Functions applied to
            the P stream states after the given (1-based) layers.
        rng (np.random.Generator | None, optional): Enables adapter dropout
            when given. Defaults to None (evaluation).

    Returns:
        ForwardOutput: Logits, design-layer features, weights and final states.
    """
    tokens = _check_tokens(tokens, model.backbone.config)
    per_layer, features = _run_layers(model, tokens, model.streams, hooks, rng)
    final = per_layer[-1]
    combined, alpha = aggregate(final, model.aggregator)
    logits = model.backbone.head(combined)
    return ForwardOutput(logits, FeatureBatch(features), alpha, final)


def backbone_forward(backbone: Backbone, tokens: np.ndarray) -> Tensor:
    """Logits of the bare backbone, no adapters and no prefix."""
    tokens = _check_tokens(tokens, backbone.config)
    x = backbone.embed(tokens)
    empty = StreamContext(0)
    for index, layer in enumerate(backbone.layers):
        x = layer_forward(x, layer, index, backbone.config, empty, kv_prefix=False)
    return backbone.head(x)
