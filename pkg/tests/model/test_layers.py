import numpy as np
import pytest

from neural_diversity.autodiff import tensor as ad
from neural_diversity.autodiff.gradcheck import finite_difference_check
from neural_diversity.autodiff.tensor import Graph, Tensor
from neural_diversity.model.config import BackboneConfig, ModuleTarget
from neural_diversity.model.layers import (
    Aggregator,
    Backbone,
    LoraAdapter,
    aggregate,
    causal_mask,
)


def _aggregator(P, d=4, epsilon=0.1, seed=0):
    return Aggregator.init(np.random.default_rng(seed), P, d, epsilon, np.dtype(np.float64))


def _states(P, seed, shape=(2, 5, 4)):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.normal(size=shape)) for _ in range(P)]


def test_lora_adapter_starts_as_a_no_op():
    rng = np.random.default_rng(0)
    adapter = LoraAdapter.init(rng, 0, 1, ModuleTarget.KEY, 8, 8, 4, np.dtype(np.float64))
    assert adapter.A.shape == (4, 8)
    assert adapter.B.shape == (8, 4)
    assert adapter.scale == pytest.approx(0.25)
    assert adapter.key == "L1.key"
    x = Tensor(rng.normal(size=(2, 3, 8)))
    np.testing.assert_array_equal(adapter.delta(x).data, 0.0)


def test_lora_delta_is_scaled_low_rank_product():
    rng = np.random.default_rng(1)
    adapter = LoraAdapter.init(rng, None, 0, ModuleTarget.MLP_UP, 6, 10, 2, np.dtype(np.float64))
    adapter.B.data = rng.normal(size=adapter.B.shape)
    x = rng.normal(size=(3, 6))
    expected = 0.5 * x @ adapter.A.data.T @ adapter.B.data.T
    np.testing.assert_allclose(adapter.delta(Tensor(x)).data, expected)


def test_backbone_checksum_tracks_parameters():
    cfg = BackboneConfig(n_layers=1, d_model=8, n_heads=2, max_seq_len=8)
    first, second = Backbone.init(cfg), Backbone.init(cfg)
    assert first.checksum() == second.checksum()
    second.layers[0].wq.data[0, 0] += 1e-12
    assert first.checksum() != second.checksum()


def test_causal_mask_shape_and_prefix_visibility():
    mask = causal_mask(3, 2, np.dtype(np.float64)).data
    assert mask.shape == (3, 5)
    np.testing.assert_array_equal(mask[:, :2], 0.0)
    assert mask[0, 3] < 0 and mask[1, 3] == 0 and mask[1, 4] < 0


@pytest.mark.parametrize("P", [2, 3, 4, 8])
def test_aggregator_contract_under_fuzzing(P):
    agg = _aggregator(P)
    floor = agg.epsilon / P
    rng = np.random.default_rng(P)
    for batch in range(500 // 4):
        logits = Tensor(rng.normal(scale=10.0 ** rng.integers(-2, 4), size=(2, 3, P)))
        alpha = agg.weights(logits).data
        np.testing.assert_allclose(alpha.sum(axis=-1), 1.0, atol=1e-6)
        assert alpha.min() >= floor, batch


@pytest.mark.parametrize("P", [2, 3, 5])
def test_symmetric_logits_give_uniform_weights(P):
    agg = _aggregator(P)
    alpha = agg.weights(Tensor(np.full((2, 3, P), 0.7))).data
    np.testing.assert_allclose(alpha, 1.0 / P, atol=1e-6)


@pytest.mark.parametrize("P, dominant", [(2, 0.95), (4, 0.925)])
def test_saturated_logit(P, dominant):
    agg = _aggregator(P)
    logits = np.zeros((1, 1, P))
    logits[..., 0] = 1e4
    alpha = agg.weights(Tensor(logits)).data[0, 0]
    assert alpha[0] == pytest.approx(dominant, abs=1e-12)
    np.testing.assert_allclose(alpha[1:], 0.1 / P, atol=1e-12)


def test_identical_states_pass_through():
    agg = _aggregator(3)
    state = _states(1, 0)[0]
    combined, alpha = aggregate([state, state, state], agg)
    np.testing.assert_allclose(combined.data, state.data, atol=1e-12)
    assert alpha.shape == (2, 5, 3)


def test_aggregate_is_the_weighted_sum():
    agg = _aggregator(3)
    states = _states(3, 1)
    combined, alpha = aggregate(states, agg)
    expected = sum(alpha.data[..., k : k + 1] * states[k].data for k in range(3))
    np.testing.assert_allclose(combined.data, expected, atol=1e-12)


@pytest.mark.parametrize("name", ["w1", "b1", "w2", "b2"])
def test_aggregator_gradients_pass_finite_differences(name):
    weights = Tensor(np.random.default_rng(9).normal(size=(2, 5, 4)))
    for instance in range(10):
        agg = _aggregator(2, seed=instance)
        agg.w2.data = np.random.default_rng(100 + instance).normal(size=agg.w2.shape)
        states = [Tensor(s.data, requires_grad=True) for s in _states(2, 50 + instance)]
        inputs = {"h0": states[0], "h1": states[1], name: getattr(agg, name)}

        def builder(**kw):
            combined, _ = aggregate([kw["h0"], kw["h1"]], agg)
            return {"loss": ad.sum(ad.mul(combined, weights))}

        graph = Graph(builder)
        for tensor in (inputs[name], states[0]):
            report = finite_difference_check(graph, inputs, tensor, max_coords=16, seed=instance)
            assert report.passed, f"{name} instance {instance}: {report.reason}"
