"""Paired corruption experiment: baseline vs corrupted scores per sample.

Each sub-experiment draws its sample indices once and scores them with and
without the corruption hook, so the two arms see the same inputs. The
sub-experiment p-values are combined with Fisher's method. Two trained models
are compared the same way, on shared probes and held-out samples.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import dask.bag as db
import numpy as np

from neural_diversity.autodiff import tensor as ad
from neural_diversity.errors import ConfigError
from neural_diversity.intervention.corruption import CorruptionConfig, ScoreKind, corruption_hook
from neural_diversity.intervention.stats import (
    BOOTSTRAP_RESAMPLES,
    FisherResult,
    McNemarResult,
    TTestResult,
    bootstrap_test,
    effect_size,
    fisher_combine,
    mcnemar_test,
    paired_t_test,
)
from neural_diversity.model.transformer import ForwardHook, NdModel, lm_forward
from neural_diversity.training.corpus import Corpus
from neural_diversity.training.loop import diversity_report
from neural_diversity.utils import SeedStreams

logger = logging.getLogger(__name__)

INTERVENTION_HEADER = ["subexp", "n", "delta_dspec", "mean_delta", "t", "p"]
COMBINED_HEADER = ["chi2", "dof", "p"]
SCORE_BATCH = 16


@dataclass
class SubExperiment:
    """One paired sub-experiment.

    Attributes:
        subexp (int): Sub-experiment index.
        indices (np.ndarray): Sample indices scored by the baseline arm.
        baseline (np.ndarray): Per-sample baseline scores.
        corrupted (np.ndarray): Per-sample corrupted scores.
        delta_dspec (float): Diversity of the corrupted minus the baseline run.
        test (TTestResult): Paired t-test of the deltas.
    """

    subexp: int
    indices: np.ndarray
    baseline: np.ndarray
    corrupted: np.ndarray
    delta_dspec: float
    test: TTestResult

    @property
    def deltas(self) -> np.ndarray:
        return self.corrupted - self.baseline

    def to_row(self) -> list:
        return [self.subexp, self.test.n, self.delta_dspec, self.test.mean, self.test.t, self.test.p]


@dataclass
class PairedResult:
    """Sub-experiments of a corruption run and their Fisher combination."""

    subexperiments: list[SubExperiment]
    fisher: FisherResult

    @property
    def baseline(self) -> np.ndarray:
        return np.concatenate([s.baseline for s in self.subexperiments])

    @property
    def corrupted(self) -> np.ndarray:
        return np.concatenate([s.corrupted for s in self.subexperiments])

    @property
    def deltas(self) -> np.ndarray:
        return self.corrupted - self.baseline

    @property
    def delta_dspec(self) -> float:
        return float(np.mean([s.delta_dspec for s in self.subexperiments]))

    @property
    def effect_size(self) -> float:
        return effect_size(self.deltas)

    def rows(self) -> list[list]:
        return [s.to_row() for s in self.subexperiments]

    def combined_row(self) -> list:
        return [self.fisher.chi2, self.fisher.dof, self.fisher.p]


def _ce_scores(
    model: NdModel, rows: np.ndarray, hooks: Optional[dict[int, ForwardHook]]
) -> np.ndarray:
    max_len = model.backbone.config.max_seq_len
    scores = []
    for start in range(0, len(rows), SCORE_BATCH):
        chunk = rows[start : start + SCORE_BATCH]
        inputs, targets = chunk[:, :-1][:, :max_len], chunk[:, 1:][:, :max_len]
        logits = lm_forward(model, inputs, hooks=hooks).logits
        ce = ad.cross_entropy(logits, targets, reduction="none").data.mean(axis=1)
        scores.append(np.exp(-ce))
    return np.concatenate(scores)


def _probe_sequences(corpus: Corpus, indices: np.ndarray) -> np.ndarray:
    """Rows (true_0, distractor_0, true_1, ...) of context + continuation."""
    seqs = []
    for i in indices:
        probe = corpus.probes[i]
        seqs.append(np.concatenate([probe.context, probe.true]))
        seqs.append(np.concatenate([probe.context, probe.distractor]))
    return np.stack(seqs)


def _mc_scores(
    model: NdModel, seqs: np.ndarray, probe_len: int, hooks: Optional[dict[int, ForwardHook]]
) -> np.ndarray:
    max_len = model.backbone.config.max_seq_len
    logp = []
    for start in range(0, len(seqs), SCORE_BATCH):
        chunk = seqs[start : start + SCORE_BATCH]
        # keep the continuation when the sequence is longer than the context window
        inputs, targets = chunk[:, :-1][:, -max_len:], chunk[:, 1:][:, -max_len:]
        logits = lm_forward(model, inputs, hooks=hooks).logits
        nll = ad.cross_entropy(logits, targets, reduction="none").data
        logp.append(-nll[:, -probe_len:].sum(axis=1))
    logp = np.concatenate(logp)
    return (logp[0::2] > logp[1::2]).astype(np.float64)


def _pool_size(corpus: Corpus, kind: ScoreKind) -> int:
    return len(corpus.probes) if kind == ScoreKind.MC else len(corpus.eval)


def _sample_indices(rng: np.random.Generator, pool: int, n: int) -> np.ndarray:
    return rng.choice(pool, size=n, replace=pool < n)


def run_subexperiment(
    k: int, model: NdModel, corpus: Corpus, cfg: CorruptionConfig, layer: int
) -> SubExperiment:
    """Score sub-experiment `k` in both arms and test the deltas."""
    seeds = SeedStreams(cfg.seed)
    pool = _pool_size(corpus, cfg.score)
    indices = _sample_indices(seeds.rng("corruption", k, 0), pool, cfg.n_samples)
    corrupted_indices = (
        indices if cfg.paired else _sample_indices(seeds.rng("corruption", k, 3), pool, cfg.n_samples)
    )
    hooks = {layer: corruption_hook(cfg, seeds.rng("corruption", k, 1))}

    if cfg.score == ScoreKind.MC:
        probe_len = len(corpus.probes[0].true)
        seqs = _probe_sequences(corpus, indices)
        baseline = _mc_scores(model, seqs, probe_len, None)
        corrupted = _mc_scores(model, _probe_sequences(corpus, corrupted_indices), probe_len, hooks)
    else:
        seqs = corpus.eval[indices]
        baseline = _ce_scores(model, seqs, None)
        corrupted = _ce_scores(model, corpus.eval[corrupted_indices], hooks)
    corrupted = corrupted + cfg.planted_shift

    tokens = seqs[: cfg.dspec_batch, :-1][:, : model.backbone.config.max_seq_len]
    base_report = diversity_report(model, tokens)
    dspec_hooks = {layer: corruption_hook(cfg, seeds.rng("corruption", k, 2))}
    corrupted_report = diversity_report(model, tokens, mode=base_report.mode, hooks=dspec_hooks)
    delta_dspec = corrupted_report.d_spec - base_report.d_spec

    test = paired_t_test(corrupted - baseline)
    logger.info(
        "Sub-experiment %s: n=%s delta_dspec=%.4f mean_delta=%.4f t=%.3f p=%.3g",
        k,
        test.n,
        delta_dspec,
        test.mean,
        test.t,
        test.p,
    )
    return SubExperiment(k, indices, baseline, corrupted, delta_dspec, test)


def paired_eval(
    model: NdModel, corpus: Corpus, cfg: CorruptionConfig, threads: Optional[int] = None
) -> PairedResult:
    """Run `cfg.n_subexp` paired sub-experiments and combine them.

    Args:
        model (NdModel): Trained model with P >= 2.
        corpus (Corpus): Held-out sequences and probes.
        cfg (CorruptionConfig): Experiment options.
        threads (int | None, optional): Run sub-experiments on this many
            threads. Defaults to None (serial).

    Raises:
        ConfigError: Single-stream model or hook layer out of range.
        ValueError: The evaluation pool of the chosen score is empty.

    Returns:
        PairedResult: Per sub-experiment results and the Fisher combination.
    """
    if model.P < 2:
        msg = f"The corruption experiment needs at least 2 streams, got P={model.P}."
        logger.error(msg)
        raise ConfigError(msg)
    layer = model.config.design_layer if cfg.hook_layer is None else cfg.hook_layer
    if not 1 <= layer <= model.backbone.config.n_layers:
        msg = f"Hook layer {layer} outside [1, {model.backbone.config.n_layers}]."
        logger.error(msg)
        raise ConfigError(msg)
    if _pool_size(corpus, cfg.score) == 0:
        msg = f"No evaluation samples for score kind '{cfg.score}'."
        logger.error(msg)
        raise ValueError(msg)

    subexps = list(range(cfg.n_subexp))
    if threads is not None and threads > 1 and len(subexps) > 1:
        results = (
            db.from_sequence(subexps, npartitions=min(threads, len(subexps)))
            .map(run_subexperiment, model=model, corpus=corpus, cfg=cfg, layer=layer)
            .compute(scheduler="threads", num_workers=threads)
        )
    else:
        results = [run_subexperiment(k, model, corpus, cfg, layer) for k in subexps]

    # p underflows to 0 for very large t
    fisher = fisher_combine([max(r.test.p, np.finfo(float).tiny) for r in results])
    logger.info("Fisher combination: chi2=%.4f dof=%s p=%.3g", fisher.chi2, fisher.dof, fisher.p)
    return PairedResult(results, fisher)


@dataclass
class ArmComparison:
    """Two trained models scored on the same probes and held-out samples.

    Attributes:
        probe_indices (np.ndarray): Multiple-choice probes scored by both.
        hits_a (np.ndarray): Probe hits of the first model.
        hits_b (np.ndarray): Probe hits of the second model.
        eval_indices (np.ndarray): Held-out sequences scored by both.
        scores_a (np.ndarray): exp(-CE) of the first model.
        scores_b (np.ndarray): exp(-CE) of the second model.
        mcnemar (McNemarResult): Test of the probe hits.
        bootstrap_p (float): Paired bootstrap p-value of the score means.
    """

    probe_indices: np.ndarray
    hits_a: np.ndarray
    hits_b: np.ndarray
    eval_indices: np.ndarray
    scores_a: np.ndarray
    scores_b: np.ndarray
    mcnemar: McNemarResult
    bootstrap_p: float

    def as_dict(self) -> dict:
        return {
            "n_probes": len(self.probe_indices),
            "accuracy_a": float(self.hits_a.mean()),
            "accuracy_b": float(self.hits_b.mean()),
            "mcnemar": {
                "b": self.mcnemar.b,
                "c": self.mcnemar.c,
                "p": self.mcnemar.p,
                "exact": self.mcnemar.exact,
                "degenerate": self.mcnemar.degenerate,
            },
            "n_eval": len(self.eval_indices),
            "score_a": float(self.scores_a.mean()),
            "score_b": float(self.scores_b.mean()),
            "bootstrap_p": self.bootstrap_p,
        }


def compare_models(
    model_a: NdModel,
    model_b: NdModel,
    corpus: Corpus,
    n_samples: int,
    seed: int = 0,
    n_resamples: int = BOOTSTRAP_RESAMPLES,
) -> ArmComparison:
    """Compare two models on identical samples.

    Probe hits are compared with McNemar's test, held-out exp(-CE) scores
    with the paired bootstrap.

    Args:
        model_a (NdModel): First model.
        model_b (NdModel): Second model, any stream count.
        corpus (Corpus): Held-out sequences and probes.
        n_samples (int): Probes and held-out sequences drawn.
        seed (int, optional): Root seed of the sample and resampling indices.
        n_resamples (int, optional): Bootstrap resamples.

    Raises:
        ValueError: The corpus has no probes or no held-out sequences.

    Returns:
        ArmComparison: Per-sample scores and both tests.
    """
    if not corpus.probes or len(corpus.eval) == 0:
        msg = "Comparing models needs multiple-choice probes and held-out sequences."
        logger.error(msg)
        raise ValueError(msg)
    seeds = SeedStreams(seed)
    probe_indices = _sample_indices(seeds.rng("compare", 0), len(corpus.probes), n_samples)
    eval_indices = _sample_indices(seeds.rng("compare", 1), len(corpus.eval), n_samples)

    probe_len = len(corpus.probes[0].true)
    seqs = _probe_sequences(corpus, probe_indices)
    hits_a = _mc_scores(model_a, seqs, probe_len, None)
    hits_b = _mc_scores(model_b, seqs, probe_len, None)
    only_a = int(np.count_nonzero((hits_a == 1) & (hits_b == 0)))
    only_b = int(np.count_nonzero((hits_a == 0) & (hits_b == 1)))

    scores_a = _ce_scores(model_a, corpus.eval[eval_indices], None)
    scores_b = _ce_scores(model_b, corpus.eval[eval_indices], None)
    result = ArmComparison(
        probe_indices,
        hits_a,
        hits_b,
        eval_indices,
        scores_a,
        scores_b,
        mcnemar_test(only_a, only_b),
        bootstrap_test(scores_a, scores_b, n_resamples, seed),
    )
    logger.info(
        "Probe accuracy %.3f vs %.3f (McNemar p=%.3g); score %.4f vs %.4f (bootstrap p=%.3g).",
        hits_a.mean(),
        hits_b.mean(),
        result.mcnemar.p,
        scores_a.mean(),
        scores_b.mean(),
        result.bootstrap_p,
    )
    return result
