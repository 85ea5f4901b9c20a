from dataclasses import replace

import numpy as np
import pytest

from neural_diversity.errors import ConfigError
from neural_diversity.intervention.corruption import CorruptionConfig
from neural_diversity.intervention.experiment import INTERVENTION_HEADER, compare_models, paired_eval
from neural_diversity.model.config import BackboneConfig, StreamConfig
from neural_diversity.model.layers import Backbone
from neural_diversity.model.transformer import build_model
from neural_diversity.training.config import TrainConfig, apply_arm
from neural_diversity.training.corpus import CorpusSpec, generate_corpus
from neural_diversity.training.loop import diversity_report, pretrain_backbone, train

BACKBONE = BackboneConfig(n_layers=2, d_model=16, n_heads=2, max_seq_len=32, seed=1)
CORPUS = CorpusSpec(n_templates=4, template_len=8, seq_len=17, n_train=32, n_eval=16, n_probes=8, probe_len=2)
CFG = CorruptionConfig(n_subexp=2, n_samples=12, dspec_batch=8, fraction=0.25)


def _model(P=2, seed=0):
    model = build_model(BACKBONE, StreamConfig(P=P, rank=2, n_prefix=2, design_layer=1), seed=seed)
    rng = np.random.default_rng(seed)
    for adapter in model.unique_adapters():
        adapter.B.data = rng.normal(0.0, 0.3, size=adapter.B.shape)
    return model


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CORPUS)


@pytest.fixture(scope="module")
def model():
    return _model()


def test_zero_fraction_has_no_effect(model, corpus):
    result = paired_eval(model, corpus, replace(CFG, fraction=0.0))
    np.testing.assert_array_equal(result.deltas, 0.0)
    for sub in result.subexperiments:
        assert sub.test.degenerate
        assert sub.test.p == 1.0
        assert sub.delta_dspec == 0.0
    assert result.fisher.chi2 == pytest.approx(0.0)
    assert result.fisher.p == pytest.approx(1.0)


def test_design_of_four_subexperiments(model, corpus):
    result = paired_eval(model, corpus, replace(CFG, n_subexp=4))
    assert result.fisher.dof == 8
    assert len(result.deltas) == 4 * CFG.n_samples
    assert all(len(sub.deltas) == CFG.n_samples for sub in result.subexperiments)
    assert [len(row) for row in result.rows()] == [len(INTERVENTION_HEADER)] * 4
    assert np.all((result.baseline > 0) & (result.baseline <= 1))


def test_planted_shift_is_recovered(model, corpus):
    result = paired_eval(model, corpus, replace(CFG, fraction=0.0, planted_shift=-0.05))
    assert result.deltas.mean() == pytest.approx(-0.05, abs=0.01)


def test_collapsing_a_stream_raises_diversity(model, corpus):
    cfg = replace(CFG, fraction=1.0, donor="fixed", target_stream=1, donor_stream=0)
    result = paired_eval(model, corpus, cfg)
    assert all(sub.delta_dspec > 0 for sub in result.subexperiments)


def test_arms_share_sample_indices(model, corpus):
    first = paired_eval(model, corpus, CFG)
    second = paired_eval(model, corpus, replace(CFG, fraction=0.0))
    for a, b in zip(first.subexperiments, second.subexperiments):
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.baseline, b.baseline)


def test_unpaired_arms_score_different_samples(model, corpus):
    result = paired_eval(model, corpus, replace(CFG, fraction=0.0, paired=False))
    assert np.any(result.deltas != 0.0)


def test_threads_do_not_change_results(model, corpus):
    serial = paired_eval(model, corpus, CFG)
    threaded = paired_eval(model, corpus, CFG, threads=2)
    assert serial.rows() == threaded.rows()
    assert serial.combined_row() == threaded.combined_row()


def test_multiple_choice_scores(model, corpus):
    result = paired_eval(model, corpus, replace(CFG, score="mc"))
    assert set(np.unique(result.baseline)) <= {0.0, 1.0}
    assert len(result.baseline) == CFG.n_subexp * CFG.n_samples


def test_preconditions(corpus):
    single = build_model(BACKBONE, StreamConfig(P=1, rank=2, n_prefix=2, design_layer=1))
    with pytest.raises(ConfigError):
        paired_eval(single, corpus, CFG)
    with pytest.raises(ConfigError):
        paired_eval(_model(), corpus, replace(CFG, hook_layer=3))
    with pytest.raises(ValueError):
        paired_eval(_model(), replace(corpus, probes=[]), replace(CFG, score="mc"))


def test_comparing_a_model_with_itself(model, corpus):
    result = compare_models(model, model, corpus, n_samples=12, seed=4)
    np.testing.assert_array_equal(result.hits_a, result.hits_b)
    np.testing.assert_array_equal(result.scores_a, result.scores_b)
    assert result.mcnemar.degenerate
    assert result.mcnemar.p == 1.0
    assert result.bootstrap_p == 1.0


def test_comparing_two_models(model, corpus):
    other = _model(P=3, seed=5)
    result = compare_models(model, other, corpus, n_samples=12, seed=4)
    assert len(result.probe_indices) == len(result.eval_indices) == 12
    assert set(np.unique(result.hits_a)) <= {0.0, 1.0}
    discordant = np.count_nonzero(result.hits_a != result.hits_b)
    assert result.mcnemar.b + result.mcnemar.c == discordant
    assert 0.0 < result.bootstrap_p <= 1.0
    again = compare_models(model, other, corpus, n_samples=12, seed=4)
    assert again.as_dict() == result.as_dict()


def test_comparison_needs_probes(model, corpus):
    with pytest.raises(ValueError):
        compare_models(model, model, replace(corpus, probes=[]), n_samples=4)


@pytest.mark.slow
def test_corruption_on_a_trained_model():
    """Corrupting a trained decorrelated model raises D_spec and lowers scores."""
    backbone_cfg = BackboneConfig(n_layers=2, d_model=32, n_heads=4, max_seq_len=64, seed=0)
    corpus = generate_corpus(CorpusSpec(seq_len=33, n_train=512, n_eval=64))
    backbone = Backbone.init(backbone_cfg)
    pretrain_backbone(backbone, corpus, steps=200, seed=0, lr=3e-3)
    base = TrainConfig(
        P=4, rank=4, n_prefix=8, design_layer=1, steps=300, batch_size=8, seq_len=33, lr=3e-3,
        lambda_bt=0.05, log_every=300,
    )
    cfg = apply_arm(base, "stream_bt")
    model = build_model(backbone, cfg.stream_config(), seed=0)
    train(model, corpus, cfg)

    corruption = CorruptionConfig(n_samples=64, fraction=0.25)
    tokens = corpus.eval[: corruption.dspec_batch, :-1]
    assert diversity_report(model, tokens).d_spec < 0.95

    result = paired_eval(model, corpus, corruption)
    assert result.delta_dspec > 0
    assert result.deltas.mean() <= 0
