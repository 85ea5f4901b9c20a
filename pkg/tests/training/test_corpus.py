from dataclasses import replace

import numpy as np
import pytest

from neural_diversity.errors import ConfigError
from neural_diversity.model.config import BOS_ID
from neural_diversity.training.corpus import CorpusSpec, batch_at, eval_batches, generate_corpus

SPEC = CorpusSpec(n_templates=4, template_len=8, seq_len=17, n_train=64, n_eval=16, n_probes=10, probe_len=2)


def test_regeneration_is_bit_identical():
    first, second = generate_corpus(SPEC), generate_corpus(SPEC)
    assert first.fingerprint() == second.fingerprint()
    np.testing.assert_array_equal(first.train, second.train)


def test_seed_changes_the_corpus():
    other = replace(SPEC, seed=1)
    assert generate_corpus(SPEC).fingerprint() != generate_corpus(other).fingerprint()


def test_layout():
    corpus = generate_corpus(SPEC)
    assert corpus.train.shape == (64, 17)
    assert corpus.eval.shape == (16, 17)
    np.testing.assert_array_equal(corpus.train[:, 0], BOS_ID)
    assert corpus.train[:, 1:].max() < 256
    assert corpus.token_count == (64 + 16) * 17
    assert len(corpus.probes) == 10


def test_noise_free_rows_follow_templates():
    corpus = generate_corpus(replace(SPEC, noise=0.0))
    tiled = np.tile(corpus.templates, (1, 4))
    for row in corpus.train[:8, 1:]:
        assert any(
            np.array_equal(row, tiled[t, s : s + 16]) for t in range(4) for s in range(8)
        )


def test_probes_have_distinct_continuations():
    for probe in generate_corpus(SPEC).probes:
        assert probe.context[0] == BOS_ID
        assert len(probe.true) == len(probe.distractor) == 2
        assert not np.array_equal(probe.true, probe.distractor)


def test_batches_are_keyed_by_step():
    corpus = generate_corpus(SPEC)
    x1, y1 = batch_at(corpus, 5, 4, seed=0)
    x2, _ = batch_at(corpus, 5, 4, seed=0)
    x3, _ = batch_at(corpus, 6, 4, seed=0)
    np.testing.assert_array_equal(x1, x2)
    assert not np.array_equal(x1, x3)
    assert x1.shape == y1.shape == (4, 16)
    np.testing.assert_array_equal(x1[:, 1:], y1[:, :-1])


def test_eval_batches_cover_requested_rows():
    corpus = generate_corpus(SPEC)
    sizes = [x.shape[0] for x, _ in eval_batches(corpus, 10, 4)]
    assert sizes == [4, 4, 2]


@pytest.mark.parametrize(
    "kwargs", [{"n_templates": 1}, {"noise": 1.0}, {"seq_len": 1}, {"probe_len": 24}]
)
def test_invalid_specs(kwargs):
    with pytest.raises(ConfigError):
        CorpusSpec(**kwargs)
