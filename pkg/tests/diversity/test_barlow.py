import numpy as np
import pytest

from neural_diversity.autodiff.gradcheck import finite_difference_check
from neural_diversity.autodiff.tensor import Graph, Tensor
from neural_diversity.diversity.barlow import (
    RandKConfig,
    bt_loss_full,
    bt_loss_randk,
    randk_pairs,
)
from neural_diversity.diversity.whitening import FeatureBatch, WhiteningMode, whiten
from neural_diversity.errors import ConfigError


def _random_batch(seed, P=4, shape=(2, 16, 4)):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=shape)
    return FeatureBatch.from_arrays([base + rng.normal(size=shape) for _ in range(P)])


def test_identity_correlations_give_zero_loss():
    x = np.random.default_rng(0).normal(size=(128, 6))
    batch = whiten(FeatureBatch.from_arrays([x, x, x]), WhiteningMode.FULL)
    assert bt_loss_full(batch).item() == pytest.approx(0.0, abs=1e-12)
    cfg = RandKConfig(K=2)
    assert bt_loss_randk(batch, cfg, np.random.default_rng(1)).item() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("d", [2, 5])
def test_zero_cross_correlation_costs_d(d):
    n = 64
    q, _ = np.linalg.qr(np.random.default_rng(d).normal(size=(n, 2 * d)))
    z = q * np.sqrt(n)
    batch = FeatureBatch.from_arrays([z[:, :d], z[:, d:]], whitened=True, mode=WhiteningMode.FULL)
    assert bt_loss_full(batch).item() == pytest.approx(d, abs=1e-9)


def test_full_loss_is_nonnegative_and_permutation_invariant():
    batch = _random_batch(1)
    loss = bt_loss_full(batch).item()
    assert loss > 0
    permuted = FeatureBatch([batch.streams[k] for k in (2, 0, 3, 1)])
    assert bt_loss_full(permuted).item() == pytest.approx(loss, rel=1e-12)


def test_pair_evaluation_counts():
    batch = _random_batch(2, P=5)
    assert bt_loss_full(batch).pair_evals == 10
    assert bt_loss_randk(batch, RandKConfig(K=3)).pair_evals == 3


def test_exhaustive_randk_equals_full():
    for P in [2, 3, 4]:
        batch = _random_batch(3, P=P)
        full = bt_loss_full(batch).item()
        randk = bt_loss_randk(batch, RandKConfig(K=P * (P - 1) // 2), np.random.default_rng(9)).item()
        assert abs(full - randk) <= 1e-12


def test_randk_is_unbiased():
    batch = whiten(_random_batch(4))
    full = bt_loss_full(batch).item()
    rng = np.random.default_rng(0)
    cfg = RandKConfig(K=2)
    estimates = [bt_loss_randk(batch, cfg, rng).item() for _ in range(10_000)]
    assert np.mean(estimates) == pytest.approx(full, rel=0.02)


def test_randk_pairs_are_sorted_and_distinct():
    rng = np.random.default_rng(5)
    for _ in range(50):
        pairs = randk_pairs(5, RandKConfig(K=4), rng)
        assert pairs == sorted(pairs)
        assert len(set(pairs)) == 4
        assert all(i < j for i, j in pairs)


def test_randk_respects_weights():
    cfg = RandKConfig(K=1, weights=(0.0, 1.0, 0.0))
    assert randk_pairs(3, cfg, np.random.default_rng(0)) == [(0, 2)]
    assert not cfg.covers_all_pairs()


@pytest.mark.parametrize(
    "kwargs", [{"K": 0}, {"K": 1, "weights": (0.5, 0.6)}, {"K": 1, "weights": (-0.5, 1.5)}]
)
def test_randk_config_invariants(kwargs):
    with pytest.raises(ConfigError):
        RandKConfig(**kwargs)


def test_randk_rejects_too_many_pairs():
    with pytest.raises(ConfigError):
        bt_loss_randk(_random_batch(6, P=3), RandKConfig(K=4))
    with pytest.raises(ConfigError):
        randk_pairs(3, RandKConfig(K=1, weights=(0.5, 0.5)), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        randk_pairs(3, RandKConfig(K=2, weights=(0.0, 1.0, 0.0)), np.random.default_rng(0))


def test_single_stream_is_rejected():
    with pytest.raises(ValueError):
        bt_loss_full(_random_batch(7, P=1))


def _loss_builder(P, variant):
    def builder(**streams):
        batch = FeatureBatch([streams[f"z{i}"] for i in range(P)])
        if variant == "full":
            return {"loss": bt_loss_full(batch).loss}
        return {"loss": bt_loss_randk(batch, RandKConfig(K=2), np.random.default_rng(3)).loss}

    return builder


@pytest.mark.parametrize("variant, P", [("full", 2), ("full", 3), ("randk", 3)])
def test_gradients_pass_finite_differences(variant, P):
    for instance in range(10):
        rng = np.random.default_rng(200 + instance)
        inputs = {f"z{i}": Tensor(rng.normal(size=(2, 8, 3)), requires_grad=True) for i in range(P)}
        graph = Graph(_loss_builder(P, variant))
        for name in ["z0", f"z{P - 1}"]:
            report = finite_difference_check(graph, inputs, inputs[name], tolerance=1e-4)
            assert report.passed, f"{variant} P={P} instance {instance} {name}: {report.reason}"
