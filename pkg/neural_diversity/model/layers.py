"""Parameter containers and forward pieces of the stream transformer.

Linear maps are stored input-major, ``y = x @ W`` with ``W`` of shape
(d_in, d_out). Low-rank adapters follow the usual convention instead:
``A`` is (r, d_in), ``B`` is (d_out, r) and starts at zero, so a fresh
adapter adds exactly nothing.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from neural_diversity.autodiff import tensor as ad
from neural_diversity.autodiff.tensor import Tensor
from neural_diversity.model.config import BackboneConfig, ModuleTarget
from neural_diversity.utils import SeedStreams

logger = logging.getLogger(__name__)

EMBED_STD = 0.02
MASK_VALUE = -1e9

# backbone weight of each adapter target
TARGET_WEIGHTS = {
    ModuleTarget.QUERY: "wq",
    ModuleTarget.KEY: "wk",
    ModuleTarget.VALUE: "wv",
    ModuleTarget.OUTPUT: "wo",
    ModuleTarget.MLP_GATE: "w_gate",
    ModuleTarget.MLP_UP: "w_up",
    ModuleTarget.MLP_DOWN: "w_down",
}


def _normal(rng: np.random.Generator, shape: tuple, std: float, dtype: np.dtype, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True, name=name)


@dataclass
class LoraAdapter:
    """Low-rank update ``scale * B A`` of one linear map of one stream.

    Attributes:
        stream (int | None): Owning stream, None when shared by all streams.
        layer (int): Zero-based layer index.
        target (ModuleTarget): Adapted linear map.
        A (Tensor): Down projection (r, d_in).
        B (Tensor): Up projection (d_out, r), zero at initialization.
    """

    stream: Optional[int]
    layer: int
    target: ModuleTarget
    A: Tensor  # pylint: disable=invalid-name
    B: Tensor  # pylint: disable=invalid-name

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        stream: Optional[int],
        layer: int,
        target: ModuleTarget,
        d_in: int,
        d_out: int,
        rank: int,
        dtype: np.dtype,
    ) -> "LoraAdapter":
        owner = "shared" if stream is None else f"stream{stream}"
        a = _normal(rng, (rank, d_in), d_in**-0.5, dtype, f"{owner}/L{layer}.{target}.A")
        b = Tensor(np.zeros((d_out, rank), dtype=dtype), requires_grad=True, name=f"{owner}/L{layer}.{target}.B")
        return cls(stream, layer, target, a, b)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return 1.0 / self.rank

    @property
    def key(self) -> str:
        return f"L{self.layer}.{self.target}"

    def delta(
        self, x: Tensor, dropout: float = 0.0, rng: Optional[np.random.Generator] = None
    ) -> Tensor:
        """``scale * x A^T B^T``, with optional dropout on the result."""
        out = ad.matmul(ad.matmul(x, ad.transpose(self.A)), ad.transpose(self.B))
        return ad.dropout(ad.scale(out, self.scale), dropout, rng)

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]


@dataclass
class BackboneLayer:
    """Pre-normalized attention and gated MLP block."""

    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    mlp_norm: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor

    WEIGHTS = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: BackboneConfig, index: int) -> "BackboneLayer":
        d, d_ff, dtype = cfg.d_model, cfg.d_ff, cfg.precision.dtype
        out_std = (2.0 * cfg.n_layers * d) ** -0.5
        name = f"backbone/L{index}."
        return cls(
            attn_norm=Tensor(np.ones(d, dtype=dtype), requires_grad=True, name=name + "attn_norm"),
            wq=_normal(rng, (d, d), d**-0.5, dtype, name + "wq"),
            wk=_normal(rng, (d, d), d**-0.5, dtype, name + "wk"),
            wv=_normal(rng, (d, d), d**-0.5, dtype, name + "wv"),
            wo=_normal(rng, (d, d), out_std, dtype, name + "wo"),
            mlp_norm=Tensor(np.ones(d, dtype=dtype), requires_grad=True, name=name + "mlp_norm"),
            w_gate=_normal(rng, (d, d_ff), d**-0.5, dtype, name + "w_gate"),
            w_up=_normal(rng, (d, d_ff), d**-0.5, dtype, name + "w_up"),
            w_down=_normal(rng, (d_ff, d), (2.0 * cfg.n_layers * d_ff) ** -0.5, dtype, name + "w_down"),
        )

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.WEIGHTS:
            yield name, getattr(self, name)


@dataclass
class Backbone:
    """Token and position embeddings, layers, final norm and LM head."""

    config: BackboneConfig
    embedding: Tensor
    positions: Tensor
    layers: list[BackboneLayer]
    final_norm: Tensor
    lm_head: Tensor
    frozen: bool = False

    @classmethod
    def init(cls, cfg: BackboneConfig, rng: Optional[np.random.Generator] = None) -> "Backbone":
        """Randomly initialize a backbone from `cfg.seed` (or `rng`)."""
        rng = rng if rng is not None else SeedStreams(cfg.seed).rng("init", 0)
        d, dtype = cfg.d_model, cfg.precision.dtype
        backbone = cls(
            config=cfg,
            embedding=_normal(rng, (cfg.vocab_size, d), EMBED_STD, dtype, "backbone/embedding"),
            positions=_normal(rng, (cfg.max_seq_len, d), EMBED_STD, dtype, "backbone/positions"),
            layers=[BackboneLayer.init(rng, cfg, i) for i in range(cfg.n_layers)],
            final_norm=Tensor(np.ones(d, dtype=dtype), requires_grad=True, name="backbone/final_norm"),
            lm_head=_normal(rng, (d, cfg.vocab_size), d**-0.5, dtype, "backbone/lm_head"),
        )
        logger.debug("Initialized a %s-layer backbone of width %s.", cfg.n_layers, d)
        return backbone

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "embedding", self.embedding
        yield "positions", self.positions
        for i, layer in enumerate(self.layers):
            for name, tensor in layer.named_parameters():
                yield f"L{i}.{name}", tensor
        yield "final_norm", self.final_norm
        yield "lm_head", self.lm_head

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def freeze(self) -> None:
        """Freeze every backbone tensor; later updates raise."""
        for tensor in self.parameters():
            tensor.freeze()
        self.frozen = True
        logger.info("Backbone frozen (sha256 %s).", self.checksum()[:12])

    def checksum(self) -> str:
        """SHA-256 over parameter names and raw bytes, in parameter order."""
        digest = hashlib.sha256()
        for name, tensor in self.named_parameters():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(tensor.data).tobytes())
        return digest.hexdigest()

    def embed(self, tokens: np.ndarray) -> Tensor:
        """Token plus position embeddings of a (B, T) id array."""
        n_pos = tokens.shape[1]
        return ad.add(ad.embedding(self.embedding, tokens), ad.slice_axis(self.positions, 0, 0, n_pos))

    def head(self, hidden: Tensor) -> Tensor:
        return ad.matmul(ad.rms_norm(hidden, self.final_norm), self.lm_head)


@dataclass
class StreamContext:
    """What makes one stream distinct: its adapters and its prefix.

    Attributes:
        index (int): Stream index.
        adapters (dict[str, LoraAdapter]): Adapters keyed by "L{layer}.{target}";
            the same objects appear in every stream when LoRA is shared.
        prefix (Tensor | None): Prefix tokens (n_prefix, d), None when n_prefix is 0.
    """

    index: int
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)
    prefix: Optional[Tensor] = None

    def adapter(self, layer: int, target: ModuleTarget) -> Optional[LoraAdapter]:
        return self.adapters.get(f"L{layer}.{target}")


def expand_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat an (n, d) tensor along a new leading batch axis."""
    return ad.add(Tensor(np.zeros((batch,) + x.shape, dtype=x.dtype)), x)


def _project(
    x: Tensor,
    layer: BackboneLayer,
    layer_index: int,
    target: ModuleTarget,
    ctx: StreamContext,
    dropout: float,
    rng: Optional[np.random.Generator],
) -> Tensor:
    out = ad.matmul(x, getattr(layer, TARGET_WEIGHTS[target]))
    adapter = ctx.adapter(layer_index, target)
    if adapter is not None:
        out = ad.add(out, adapter.delta(x, dropout, rng))
    return out


def causal_mask(n_queries: int, n_prefix: int, dtype: np.dtype) -> Tensor:
    """Additive mask letting query t see every prefix key and keys <= t."""
    keys = np.arange(n_prefix + n_queries)
    queries = np.arange(n_queries) + n_prefix
    blocked = keys[None, :] > queries[:, None]
    return Tensor(np.where(blocked, MASK_VALUE, 0.0).astype(dtype))


def layer_forward(
    x: Tensor,
    layer: BackboneLayer,
    layer_index: int,
    cfg: BackboneConfig,
    ctx: StreamContext,
    kv_prefix: bool,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """One backbone layer applied to one stream, adapters included.

    Args:
        x (Tensor): Stream states (B, T, d).
        layer (BackboneLayer): Frozen weights of the layer.
        layer_index (int): Zero-based index of the layer.
        cfg (BackboneConfig): Backbone shape.
        ctx (StreamContext): Adapters and prefix of the stream.
        kv_prefix (bool): Prepend the projected prefix to keys and values.
        dropout (float, optional): Dropout on adapter outputs. Defaults to 0.
        rng (np.random.Generator | None, optional): Dropout generator.

    Returns:
        Tensor: Updated states (B, T, d).
    """
    n_batch, n_pos, d = x.shape
    n_heads, head_dim = cfg.n_heads, cfg.head_dim

    def proj(inp: Tensor, target: ModuleTarget) -> Tensor:
        return _project(inp, layer, layer_index, target, ctx, dropout, rng)

    normed = ad.rms_norm(x, layer.attn_norm)
    q = proj(normed, ModuleTarget.QUERY)
    k = proj(normed, ModuleTarget.KEY)
    v = proj(normed, ModuleTarget.VALUE)

    n_prefix = 0
    if kv_prefix and ctx.prefix is not None:
        p_normed = ad.rms_norm(ctx.prefix, layer.attn_norm)
        n_prefix = ctx.prefix.shape[0]
        k = ad.concat([expand_batch(proj(p_normed, ModuleTarget.KEY), n_batch), k], axis=1)
        v = ad.concat([expand_batch(proj(p_normed, ModuleTarget.VALUE), n_batch), v], axis=1)

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (n_batch, t.shape[1], n_heads, head_dim)), (0, 2, 1, 3))

    scores = ad.scale(ad.matmul(heads(q), ad.transpose(heads(k))), head_dim**-0.5)
    weights = ad.softmax(ad.add(scores, causal_mask(n_pos, n_prefix, x.dtype)))
    attended = ad.transpose(ad.matmul(weights, heads(v)), (0, 2, 1, 3))
    attended = ad.reshape(attended, (n_batch, n_pos, d))
    x = ad.add(x, proj(attended, ModuleTarget.OUTPUT))

    normed = ad.rms_norm(x, layer.mlp_norm)
    hidden = ad.mul(ad.silu(proj(normed, ModuleTarget.MLP_GATE)), proj(normed, ModuleTarget.MLP_UP))
    return ad.add(x, proj(hidden, ModuleTarget.MLP_DOWN))


@dataclass
class Aggregator:
    """Per-position MLP turning the P stream states into mixture weights.

    ``alpha = (1 - epsilon) softmax(W2 tanh(W1 [h_1..h_P] + b1) + b2) + epsilon / P``
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    epsilon: float

    @classmethod
    def init(
        cls, rng: np.random.Generator, P: int, d: int, epsilon: float, dtype: np.dtype  # pylint: disable=invalid-name
    ) -> "Aggregator":
        width = P * d
        return cls(
            w1=_normal(rng, (width, width), width**-0.5, dtype, "aggregator/w1"),
            b1=Tensor(np.zeros(width, dtype=dtype), requires_grad=True, name="aggregator/b1"),
            w2=_normal(rng, (width, P), 0.1 * width**-0.5, dtype, "aggregator/w2"),
            b2=Tensor(np.zeros(P, dtype=dtype), requires_grad=True, name="aggregator/b2"),
            epsilon=epsilon,
        )

    @property
    def P(self) -> int:  # pylint: disable=invalid-name
        return self.b2.shape[0]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "w1", self.w1
        yield "b1", self.b1
        yield "w2", self.w2
        yield "b2", self.b2

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def logits(self, states: list[Tensor]) -> Tensor:
        joined = ad.concat(states, axis=-1)
        hidden = ad.tanh(ad.add(ad.matmul(joined, self.w1), self.b1))
        return ad.add(ad.matmul(hidden, self.w2), self.b2)

    def weights(self, logits: Tensor) -> Tensor:
        """Smoothed mixture weights; every weight is at least epsilon / P."""
        return ad.add_scalar(ad.scale(ad.softmax(logits), 1.0 - self.epsilon), self.epsilon / self.P)


def aggregate(states: list[Tensor], agg: Aggregator) -> tuple[Tensor, Tensor]:
    """Mix the final stream states with the aggregator's weights.

    Args:
        states (list[Tensor]): P states of identical shape (B, T, d).
        agg (Aggregator): Aggregator parameters.

    Returns:
        tuple[Tensor, Tensor]: Combined state (B, T, d) and weights (B, T, P).
    """
    n_batch, n_pos, d = states[0].shape
    alpha = agg.weights(agg.logits(states))
    stacked = ad.concat([ad.reshape(h, (n_batch, n_pos, 1, d)) for h in states], axis=2)
    mixed = ad.matmul(ad.reshape(alpha, (n_batch, n_pos, 1, agg.P)), stacked)
    return ad.reshape(mixed, (n_batch, n_pos, d)), alpha
