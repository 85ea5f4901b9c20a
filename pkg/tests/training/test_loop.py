from dataclasses import replace

import numpy as np
import pytest

from neural_diversity.errors import ConfigError, FrozenParameterError, NumericalError
from neural_diversity.model.checkpoint import load_checkpoint
from neural_diversity.model.config import BackboneConfig
from neural_diversity.model.layers import Backbone
from neural_diversity.model.transformer import build_model
from neural_diversity.training.config import TrainConfig, apply_arm
from neural_diversity.training.corpus import CorpusSpec, generate_corpus
from neural_diversity.training.loop import (
    DIVERSITY_TRACE_HEADER,
    TRAIN_TRACE_HEADER,
    diversity_report,
    evaluate,
    pretrain_backbone,
    train,
)
from neural_diversity.training.optim import AdamWState

BACKBONE = BackboneConfig(n_layers=2, d_model=16, n_heads=2, max_seq_len=32, seed=0)
CORPUS = CorpusSpec(n_templates=4, template_len=8, seq_len=17, n_train=128, n_eval=16, n_probes=8, probe_len=2)
CFG = TrainConfig(
    P=2, rank=2, n_prefix=2, design_layer=1, steps=12, batch_size=4, seq_len=17, lr=1e-2, log_every=4
)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CORPUS)


@pytest.fixture(scope="module")
def backbone(corpus):
    backbone = Backbone.init(BACKBONE)
    pretrain_backbone(backbone, corpus, steps=30, seed=0, lr=3e-3, batch_size=8)
    return backbone


def test_pretraining_lowers_held_out_loss(corpus):
    result = pretrain_backbone(Backbone.init(BACKBONE), corpus, steps=40, seed=0, lr=3e-3, batch_size=8)
    assert result.final_ce < result.initial_ce


def test_zero_pretraining_steps_leave_weights_unchanged(corpus):
    backbone = Backbone.init(BACKBONE)
    before = backbone.checksum()
    result = pretrain_backbone(backbone, corpus, steps=0, seed=0)
    assert backbone.checksum() == before
    assert backbone.frozen
    assert result.initial_ce == result.final_ce


def test_frozen_backbone_cannot_be_pretrained(backbone, corpus):
    assert backbone.frozen
    with pytest.raises(FrozenParameterError):
        pretrain_backbone(backbone, corpus, steps=1, seed=0)


def test_train_keeps_backbone_and_logs_trace(backbone, corpus):
    before = backbone.checksum()
    result = train(build_model(backbone, CFG.stream_config(), seed=0), corpus, CFG)
    assert backbone.checksum() == before
    assert [row.step for row in result.trace] == [4, 8, 12]
    assert len(result.trace[0].to_row()) == len(TRAIN_TRACE_HEADER)
    assert all(0.0 <= row.d_spec <= 1.0 + 1e-6 for row in result.trace)
    assert all(row.alpha_min >= CFG.epsilon / CFG.P for row in result.trace)
    assert [row[0] for row in result.diversity] == [4, 8, 12]
    assert all(len(row) == len(DIVERSITY_TRACE_HEADER) for row in result.diversity)
    assert [row[1] for row in result.diversity] == [row.d_spec for row in result.trace]
    assert [row[2] for row in result.diversity] == [row.bt for row in result.trace]
    assert [row[1:3] for row in result.pairs] == [[0, 1]] * 3
    assert result.model.step == 12


def test_training_is_reproducible(backbone, corpus):
    first = train(build_model(backbone, CFG.stream_config(), seed=1), corpus, CFG)
    second = train(build_model(backbone, CFG.stream_config(), seed=1), corpus, CFG)
    assert [r.to_row() for r in first.trace] == [r.to_row() for r in second.trace]


def test_resume_continues_the_trace(backbone, corpus, tmp_path):
    full = train(build_model(backbone, CFG.stream_config(), seed=2), corpus, CFG)

    model = build_model(backbone, CFG.stream_config(), seed=2)
    first = train(model, corpus, CFG, checkpoint_path=str(tmp_path / "half"), until=6)
    assert first.model.step == 6
    loaded = load_checkpoint(first.checkpoint)
    assert loaded.step == 6
    rest = train(loaded.model, corpus, CFG, AdamWState.from_arrays(loaded.extra_arrays))
    assert [r.to_row() for r in first.trace + rest.trace] == [r.to_row() for r in full.trace]


def test_single_stream_trace_has_no_diversity(backbone, corpus):
    cfg = apply_arm(CFG, "standard")
    result = train(build_model(backbone, cfg.stream_config()), corpus, cfg)
    assert all(row.d_spec is None for row in result.trace)
    assert result.diversity == []
    assert result.pairs == []
    assert len(result.trace[-1].to_row(with_diversity=False)) == 5


def test_non_finite_loss_aborts_with_checkpoint(backbone, corpus, tmp_path):
    model = build_model(backbone, CFG.stream_config())
    model.streams[0].prefix.data[:] = np.nan
    with pytest.raises(NumericalError):
        train(model, corpus, CFG, checkpoint_path=str(tmp_path / "last_good"))
    assert (tmp_path / "last_good.npz").exists()


def test_train_preconditions(corpus):
    model = build_model(BACKBONE, CFG.stream_config())
    with pytest.raises(ConfigError):
        train(model, corpus, replace(CFG, P=3))


def test_evaluate_returns_one_score_per_sequence(backbone, corpus):
    model = build_model(backbone, CFG.stream_config())
    scores = evaluate(model, corpus, n=10, batch_size=4)
    assert scores.shape == (10,)
    assert np.all(scores > 0)


def test_diversity_report(backbone, corpus):
    cfg = replace(CFG, P=3)
    model = build_model(backbone, cfg.stream_config())
    report = diversity_report(model, corpus.eval[:8, :-1])
    assert len(report.pairs) == 3
    assert report.d_spec == pytest.approx(np.mean([p.value for p in report.pairs]))
    assert len(report.alpha_mean) == 3
    assert report.as_dict()["whitening"] == "full"
    with pytest.raises(ConfigError):
        diversity_report(build_model(backbone, apply_arm(CFG, "standard").stream_config()), corpus.eval[:2])


@pytest.mark.slow
def test_ablation_ordering():
    """Decorrelated stream adapters end up more diverse than shared ones."""
    backbone_cfg = BackboneConfig(n_layers=2, d_model=32, n_heads=4, max_seq_len=64)
    spec = CorpusSpec(seq_len=33, n_train=512, n_eval=64)
    base = TrainConfig(
        P=4, rank=4, n_prefix=8, design_layer=1, steps=300, batch_size=8, seq_len=33, lr=3e-3,
        lambda_bt=0.05, log_every=300,
    )
    for seed in range(3):
        corpus = generate_corpus(replace(spec, seed=seed))
        backbone = Backbone.init(replace(backbone_cfg, seed=seed))
        pretrain_backbone(backbone, corpus, steps=200, seed=seed, lr=3e-3)
        final = {}
        for arm in ["parscale", "stream", "stream_bt"]:
            cfg = replace(apply_arm(base, arm), seed=seed)
            model = build_model(backbone, cfg.stream_config(), seed=seed)
            before = evaluate(model, corpus, n=32).mean()
            result = train(model, corpus, cfg)
            final[arm] = result.trace[-1].d_spec
            assert evaluate(model, corpus, n=32).mean() < before
        assert final["stream_bt"] < final["stream"] < final["parscale"], final
