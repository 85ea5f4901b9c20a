import numpy as np
import pytest

from neural_diversity.autodiff import tensor as ad
from neural_diversity.autodiff.gradcheck import finite_difference_check
from neural_diversity.autodiff.tensor import Graph, Tensor
from neural_diversity.diversity.whitening import FeatureBatch, WhiteningMode
from neural_diversity.model.config import BackboneConfig, ModuleTarget
from neural_diversity.model.transformer import build_model, lm_forward
from neural_diversity.training.config import TrainConfig
from neural_diversity.training.objective import total_loss


def _logits(seed=0, shape=(2, 5, 11)):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=shape)), rng.integers(0, shape[-1], size=shape[:-1])


def _features(seed=1, P=3):
    rng = np.random.default_rng(seed)
    return FeatureBatch.from_arrays([rng.normal(size=(2, 8, 4)) for _ in range(P)])


def test_zero_weight_gives_plain_cross_entropy():
    logits, targets = _logits()
    parts = total_loss(logits, targets, _features(), TrainConfig(lambda_bt=0.0))
    assert parts.total is parts.ce
    assert parts.bt is None
    assert parts.total.item() == ad.cross_entropy(logits, targets).item()


def test_decorrelated_features_add_nothing():
    n, d = 64, 3
    q, _ = np.linalg.qr(np.random.default_rng(2).normal(size=(n, d)))
    z = q * np.sqrt(n)
    batch = FeatureBatch.from_arrays([z, z], whitened=True, mode=WhiteningMode.FULL)
    logits, targets = _logits()
    parts = total_loss(logits, targets, batch, TrainConfig(lambda_bt=0.5))
    assert parts.bt_value == pytest.approx(0.0, abs=1e-12)
    assert parts.total.item() == pytest.approx(parts.ce.item(), abs=1e-12)


@pytest.mark.parametrize("variant", ["full", "randk"])
def test_components_recombine(variant):
    logits, targets = _logits(3)
    cfg = TrainConfig(lambda_bt=0.01, bt_variant=variant, randk_k=2)
    parts = total_loss(logits, targets, _features(4), cfg, np.random.default_rng(0))
    assert abs(parts.total.item() - (parts.ce.item() + 0.01 * parts.bt_value)) < 1e-9
    assert parts.pair_evals == (3 if variant == "full" else 2)


def test_single_stream_skips_decorrelation():
    logits, targets = _logits()
    parts = total_loss(logits, targets, _features(P=1), TrainConfig(lambda_bt=1.0))
    assert parts.bt is None


def test_full_pipeline_gradients_pass_finite_differences():
    backbone = BackboneConfig(n_layers=2, d_model=16, n_heads=2, max_seq_len=8, seed=5)
    cfg = TrainConfig(P=2, rank=2, n_prefix=2, design_layer=1, lambda_bt=0.1)
    for instance in range(10):
        model = build_model(backbone, cfg.stream_config(), seed=instance)
        rng = np.random.default_rng(instance)
        for adapter in model.unique_adapters():
            adapter.B.data = rng.normal(0.0, 0.2, size=adapter.B.shape)
        tokens = rng.integers(0, 256, size=(2, 6))
        targets = rng.integers(0, 256, size=(2, 6))
        checked = {
            "a": model.streams[0].adapter(0, ModuleTarget.KEY).A,
            "b": model.streams[1].adapter(1, ModuleTarget.QUERY).B,
            "prefix": model.streams[1].prefix,
            "w2": model.aggregator.w2,
        }

        def builder(**_):
            out = lm_forward(model, tokens)
            return {"loss": total_loss(out.logits, targets, out.features, cfg).total}

        graph = Graph(builder)
        for name, tensor in checked.items():
            report = finite_difference_check(graph, checked, tensor, max_coords=8, seed=instance)
            assert report.passed, f"instance {instance} {name}: {report.reason}"
