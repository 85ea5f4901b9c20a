import numpy as np
import pytest

from neural_diversity.autodiff import tensor as ad
from neural_diversity.autodiff.tensor import Tensor
from neural_diversity.errors import ConfigError
from neural_diversity.intervention.corruption import CorruptionConfig, corrupt_streams, corruption_hook


def _states(P=3, shape=(2, 5, 4), seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=shape) for _ in range(P)]


def test_zero_fraction_is_an_exact_no_op():
    states = _states()
    out = corrupt_streams(states, CorruptionConfig(fraction=0.0), np.random.default_rng(0))
    for before, after in zip(states, out):
        np.testing.assert_array_equal(before, after)
        assert before is not after


def test_full_fixed_substitution_makes_streams_identical():
    states = _states()
    cfg = CorruptionConfig(fraction=1.0, donor="fixed", target_stream=1, donor_stream=0)
    out = corrupt_streams(states, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(out[1], states[0])
    np.testing.assert_array_equal(out[0], states[0])
    np.testing.assert_array_equal(out[2], states[2])


def test_partial_substitution_copies_values_from_other_streams():
    states = _states(P=3, shape=(4, 10, 3))
    out = corrupt_streams(states, CorruptionConfig(fraction=0.5, target_stream=0), np.random.default_rng(1))
    changed = np.any(out[0] != states[0], axis=-1)
    assert changed.sum() == 20
    for b, t in zip(*np.nonzero(changed)):
        assert any(np.array_equal(out[0][b, t], states[d][b, t]) for d in (1, 2))
    # untouched positions keep their values
    np.testing.assert_array_equal(out[0][~changed], states[0][~changed])


def test_every_stream_is_corrupted_from_uncorrupted_states():
    states = _states(P=2, shape=(3, 6, 2))
    out = corrupt_streams(states, CorruptionConfig(fraction=1.0), np.random.default_rng(0))
    # with two streams and full substitution the streams swap
    np.testing.assert_array_equal(out[0], states[1])
    np.testing.assert_array_equal(out[1], states[0])


def test_corruption_is_deterministic_per_seed():
    states = _states()
    cfg = CorruptionConfig(fraction=0.3)
    first = corrupt_streams(states, cfg, np.random.default_rng(7))
    second = corrupt_streams(states, cfg, np.random.default_rng(7))
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


def test_single_stream_is_rejected():
    with pytest.raises(ConfigError):
        corrupt_streams(_states(P=1), CorruptionConfig(), np.random.default_rng(0))


def test_stream_index_out_of_range():
    with pytest.raises(ConfigError):
        corrupt_streams(_states(P=2), CorruptionConfig(target_stream=4), np.random.default_rng(0))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"fraction": 1.5},
        {"fraction": -0.1},
        {"donor": "fixed"},
        {"donor": "nearest"},
        {"target_stream": 1, "donor_stream": 1},
        {"n_subexp": 0},
        {"score": "bleu"},
    ],
)
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        CorruptionConfig(**kwargs)


def test_hook_leaves_prefix_positions_alone():
    states = [Tensor(s) for s in _states(P=2, shape=(1, 6, 3))]
    hook = corruption_hook(CorruptionConfig(fraction=1.0), np.random.default_rng(0))
    out = hook(states, 2)
    np.testing.assert_array_equal(out[0].data[:, :2], states[0].data[:, :2])
    np.testing.assert_array_equal(out[0].data[:, 2:], states[1].data[:, 2:])


def test_substitution_commutes_with_rms_normalization():
    states = _states(P=3, shape=(3, 6, 4))
    weight = Tensor(np.linspace(0.5, 1.5, 4))
    cfg = CorruptionConfig(fraction=0.4)
    corrupted = corrupt_streams(states, cfg, np.random.default_rng(2))
    normalized_after = [ad.rms_norm(Tensor(s), weight).data for s in corrupted]
    normalized = [ad.rms_norm(Tensor(s), weight).data for s in states]
    normalized_before = corrupt_streams(normalized, cfg, np.random.default_rng(2))
    for after, before in zip(normalized_after, normalized_before):
        np.testing.assert_allclose(after, before)
