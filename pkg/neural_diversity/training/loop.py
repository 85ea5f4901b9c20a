"""Backbone pre-training, stream fine-tuning and held-out evaluation."""

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from tqdm import tqdm

from neural_diversity.autodiff import tensor as ad
from neural_diversity.autodiff.tensor import Graph
from neural_diversity.diversity.correlation import PairNorm, pair_norms
from neural_diversity.diversity.whitening import WhiteningMode, whiten
from neural_diversity.errors import ConfigError, FrozenParameterError, NumericalError, RankDeficientError
from neural_diversity.model.checkpoint import config_to_dict, save_checkpoint
from neural_diversity.model.layers import Backbone
from neural_diversity.model.transformer import ForwardHook, NdModel, backbone_forward, lm_forward
from neural_diversity.training.config import TrainConfig
from neural_diversity.training.corpus import Corpus, batch_at, eval_batches
from neural_diversity.training.objective import total_loss
from neural_diversity.training.optim import AdamWConfig, AdamWState, adamw_step, cosine_lr, lr_at
from neural_diversity.utils import SeedStreams

logger = logging.getLogger(__name__)

TRAIN_TRACE_HEADER = ["step", "lr", "ce", "bt", "total", "d_spec", "alpha_min", "alpha_max"]
DIVERSITY_TRACE_HEADER = ["step", "d_spec", "bt_loss", "mode"]
PAIR_TRACE_HEADER = ["step", "i", "j", "norm", "converged"]
PRETRAIN_LR = 1e-3
PRETRAIN_WARMUP = 0.02


@dataclass
class TraceRow:
    """One logged training step; diversity fields are None for P = 1."""

    step: int
    lr: float
    ce: float
    bt: float
    total: float
    d_spec: Optional[float] = None
    alpha_min: Optional[float] = None
    alpha_max: Optional[float] = None

    def to_row(self, with_diversity: bool = True) -> list:
        row = [self.step, self.lr, self.ce, self.bt, self.total]
        if with_diversity:
            row += [self.d_spec, self.alpha_min, self.alpha_max]
        return row


@dataclass
class DiversityReport:
    """Diversity of a model on one batch.

    Attributes:
        d_spec (float): Mean pairwise spectral norm.
        pairs (list[PairNorm]): Norm of every unordered stream pair.
        mode (WhiteningMode): Whitening actually used.
        alpha_min (float): Smallest aggregator weight seen.
        alpha_max (float): Largest aggregator weight seen.
        alpha_mean (list[float]): Mean weight of each stream.
    """

    d_spec: float
    pairs: list[PairNorm]
    mode: WhiteningMode
    alpha_min: float
    alpha_max: float
    alpha_mean: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "d_spec": self.d_spec,
            "whitening": str(self.mode),
            "alpha_min": self.alpha_min,
            "alpha_max": self.alpha_max,
            "alpha_mean": self.alpha_mean,
            "pairs": [
                {"i": p.i, "j": p.j, "norm": p.value, "converged": p.converged} for p in self.pairs
            ],
        }


@dataclass
class PretrainResult:
    initial_ce: float
    final_ce: float
    steps: int


@dataclass
class TrainResult:
    """Trained model, metric traces, optimizer state and checkpoint path.

    `diversity` holds one row per logged step (`DIVERSITY_TRACE_HEADER`),
    `pairs` one row per logged step and stream pair (`PAIR_TRACE_HEADER`).
    """

    model: NdModel
    trace: list[TraceRow]
    diversity: list[list]
    state: AdamWState
    pairs: list[list] = field(default_factory=list)
    checkpoint: Optional[str] = None


def diversity_report(
    model: NdModel,
    tokens: np.ndarray,
    mode: WhiteningMode = WhiteningMode.FULL,
    threads: Optional[int] = None,
    hooks: Optional[dict[int, ForwardHook]] = None,
) -> DiversityReport:
    """Measure the diversity of the design-layer features on `tokens`.

    Full whitening falls back to per-dimension standardization when the
    features are rank deficient; the report records the mode used.

    Raises:
        ConfigError: The model has a single stream.
    """
    if model.P < 2:
        msg = f"A diversity report needs at least 2 streams, got P={model.P}."
        logger.error(msg)
        raise ConfigError(msg)
    out = lm_forward(model, tokens, hooks=hooks)
    mode = WhiteningMode(mode)
    try:
        white = whiten(out.features, mode)
    except RankDeficientError as e:
        logger.warning("Falling back to per-dimension whitening: %s", e)
        mode = WhiteningMode.PER_DIMENSION
        white = whiten(out.features, mode)
    norms = pair_norms(white, threads)
    alpha = out.alpha.data
    return DiversityReport(
        d_spec=float(np.mean([n.value for n in norms])),
        pairs=norms,
        mode=mode,
        alpha_min=float(alpha.min()),
        alpha_max=float(alpha.max()),
        alpha_mean=[float(a) for a in alpha.reshape(-1, model.P).mean(axis=0)],
    )


def evaluate(
    model: NdModel,
    corpus: Corpus,
    n: Optional[int] = None,
    batch_size: int = 16,
    hooks: Optional[dict[int, ForwardHook]] = None,
    seq_len: Optional[int] = None,
) -> np.ndarray:
    """Per-sample mean cross-entropy on the held-out split.

    Args:
        model (NdModel): Model to score.
        corpus (Corpus): Corpus holding the held-out split.
        n (int | None, optional): Number of held-out sequences; all when None.
        batch_size (int, optional): Sequences per forward pass.
        hooks (dict[int, ForwardHook] | None, optional): Forward hooks.
        seq_len (int | None, optional): Truncate sequences to this length.

    Returns:
        np.ndarray: One cross-entropy per sequence.
    """
    n = len(corpus.eval) if n is None else n
    scores = []
    for inputs, targets in eval_batches(corpus, n, batch_size):
        if seq_len is not None:
            inputs, targets = inputs[:, : seq_len - 1], targets[:, : seq_len - 1]
        logits = lm_forward(model, inputs, hooks=hooks).logits
        per_token = ad.cross_entropy(logits, targets, reduction="none").data
        scores.append(per_token.mean(axis=1))
    return np.concatenate(scores) if scores else np.zeros(0)


def _backbone_ce(backbone: Backbone, corpus: Corpus, n: int, batch_size: int) -> float:
    losses, max_len = [], backbone.config.max_seq_len
    for inputs, targets in eval_batches(corpus, n, batch_size):
        logits = backbone_forward(backbone, inputs[:, :max_len])
        losses.append(ad.cross_entropy(logits, targets[:, :max_len], reduction="none").data.mean(axis=1))
    return float(np.mean(np.concatenate(losses)))


def pretrain_backbone(
    backbone: Backbone,
    corpus: Corpus,
    steps: int,
    seed: int,
    lr: float = PRETRAIN_LR,
    batch_size: int = 16,
    eval_size: int = 64,
    progress: bool = False,
) -> PretrainResult:
    """Briefly train a fresh backbone on the corpus, then freeze it.

    Args:
        backbone (Backbone): Untrained backbone.
        corpus (Corpus): Training corpus.
        steps (int): Optimizer steps; 0 leaves the weights unchanged.
        seed (int): Root seed of the batch order.
        lr (float, optional): Peak learning rate.
        batch_size (int, optional): Sequences per step.
        eval_size (int, optional): Held-out sequences used for the report.
        progress (bool, optional): Show a progress bar.

    Raises:
        FrozenParameterError: The backbone is already frozen and `steps` > 0.
        NumericalError: The loss became non-finite.

    Returns:
        PretrainResult: Held-out cross-entropy before and after.
    """
    if backbone.frozen and steps > 0:
        msg = "Cannot pre-train a frozen backbone."
        logger.error(msg)
        raise FrozenParameterError(msg)

    initial = _backbone_ce(backbone, corpus, eval_size, batch_size)
    state = AdamWState()
    opt = AdamWConfig(weight_decay=0.0, no_decay=())
    warmup = int(round(PRETRAIN_WARMUP * steps))
    max_len = backbone.config.max_seq_len

    for step in tqdm(range(steps), desc="pretrain", disable=not progress):
        inputs, targets = batch_at(corpus, step, batch_size, seed)
        inputs, targets = inputs[:, :max_len], targets[:, :max_len]
        with Graph(name="pretrain") as graph:
            loss = ad.cross_entropy(backbone_forward(backbone, inputs), targets)
        if not np.isfinite(loss.item()):
            msg = f"Pre-training diverged at step {step} (loss {loss.item()})."
            logger.error(msg)
            raise NumericalError(msg)
        graph.backward(loss, params=backbone.parameters())
        adamw_step(backbone.named_parameters(), state, cosine_lr(step, lr, warmup, steps), opt)

    backbone.freeze()
    final = _backbone_ce(backbone, corpus, eval_size, batch_size)
    logger.info("Pre-trained the backbone for %s steps: held-out CE %.4f -> %.4f.", steps, initial, final)
    return PretrainResult(initial, final, steps)


def train(
    model: NdModel,
    corpus: Corpus,
    cfg: TrainConfig,
    state: Optional[AdamWState] = None,
    checkpoint_path: Optional[str] = None,
    threads: Optional[int] = None,
    progress: bool = False,
    until: Optional[int] = None,
) -> TrainResult:
    """Fine-tune the streams of `model` from `model.step` to `cfg.steps`.

    Data, dropout and pair sampling are keyed by (seed, step), so resuming
    from a checkpoint continues the exact trace of an uninterrupted run.

    Args:
        model (NdModel): Model with a frozen backbone.
        corpus (Corpus): Training and held-out data.
        cfg (TrainConfig): Training options.
        state (AdamWState | None, optional): Optimizer state to resume from.
        checkpoint_path (str | None, optional): Where to write the final (or
            last good) checkpoint.
        threads (int | None, optional): Threads for the pair norms.
        progress (bool, optional): Show a progress bar.
        until (int | None, optional): Stop before this step; the schedule
            still spans `cfg.steps`. Defaults to None (run to the end).

    Raises:
        ConfigError: Unfrozen backbone or a stream count differing from `cfg`.
        NumericalError: The loss became non-finite; the last good state is
            written to `checkpoint_path` first.
        FrozenParameterError: The backbone changed during training.

    Returns:
        TrainResult: Model, traces, optimizer state and checkpoint path.
    """
    if not model.backbone.frozen:
        msg = "The backbone must be frozen before fine-tuning."
        logger.error(msg)
        raise ConfigError(msg)
    if model.P != cfg.P:
        msg = f"Model has {model.P} streams but the config asks for {cfg.P}."
        logger.error(msg)
        raise ConfigError(msg)

    seeds = SeedStreams(cfg.seed)
    state = state if state is not None else AdamWState()
    opt = AdamWConfig(weight_decay=cfg.weight_decay)
    sha_before = model.backbone.checksum()
    max_len = min(cfg.seq_len - 1, model.backbone.config.max_seq_len)
    probe = corpus.eval[: cfg.batch_size, :-1][:, :max_len]
    params = model.trainable_parameters()
    metadata = {"train_config": config_to_dict(cfg), "backbone_sha256": sha_before}

    def _save() -> Optional[str]:
        if checkpoint_path is None:
            return None
        return save_checkpoint(checkpoint_path, model, state.to_arrays(), metadata)

    trace, diversity, pairs = [], [], []
    stop = cfg.steps if until is None else min(until, cfg.steps)
    for step in tqdm(range(model.step, stop), desc="train", disable=not progress):
        tic = time.perf_counter()
        lr = lr_at(step, cfg)
        inputs, targets = batch_at(corpus, step, cfg.batch_size, cfg.seed)
        inputs, targets = inputs[:, :max_len], targets[:, :max_len]
        dropout_rng = seeds.rng("dropout", step) if cfg.dropout > 0 else None

        with Graph(name="train") as graph:
            out = lm_forward(model, inputs, rng=dropout_rng)
            parts = total_loss(out.logits, targets, out.features, cfg, seeds.rng("randk", step))
        if not np.isfinite(parts.total.item()):
            path = _save()
            msg = f"Non-finite loss at step {step}; last good state kept in {path}."
            logger.error(msg)
            raise NumericalError(msg)
        graph.backward(parts.total, params=params)
        adamw_step(model.named_trainable(), state, lr, opt)
        model.step = step + 1
        logger.debug("Step %s took %.3fs.", model.step, time.perf_counter() - tic)

        if model.step % cfg.log_every == 0 or model.step == cfg.steps:
            row = TraceRow(model.step, lr, parts.ce.item(), parts.bt_value, parts.total.item())
            if model.P > 1:
                report = diversity_report(model, probe, cfg.whitening, threads)
                row.d_spec = report.d_spec
                row.alpha_min = float(out.alpha.data.min())
                row.alpha_max = float(out.alpha.data.max())
                diversity.append([model.step, report.d_spec, parts.bt_value, str(report.mode)])
                pairs += [[model.step, p.i, p.j, p.value, int(p.converged)] for p in report.pairs]
            trace.append(row)
            logger.info(
                "step %s lr %.2e ce %.4f bt %.4f d_spec %s",
                row.step,
                row.lr,
                row.ce,
                row.bt,
                "-" if row.d_spec is None else f"{row.d_spec:.4f}",
            )

    if model.backbone.checksum() != sha_before:
        msg = "The backbone changed during fine-tuning."
        logger.critical(msg)
        raise FrozenParameterError(msg)
    return TrainResult(model, trace, diversity, state, pairs, _save())
