import itertools

import numpy as np
import pytest

from neural_diversity.diversity.correlation import (
    cross_correlation,
    d_spec,
    pair_norms,
    spectral_norm,
)
from neural_diversity.diversity.whitening import FeatureBatch, WhiteningMode, whiten


def _full(arrays):
    return whiten(FeatureBatch.from_arrays(arrays), WhiteningMode.FULL)


@pytest.mark.parametrize(
    "matrix, expected",
    [(np.diag([2.0, 1.0]), 2.0), (np.eye(5), 1.0), (np.zeros((3, 3)), 0.0)],
)
def test_spectral_norm_simple(matrix, expected):
    result = spectral_norm(matrix)
    assert result.value == pytest.approx(expected, abs=1e-9)
    assert result.converged


@pytest.mark.parametrize("seed", range(5))
def test_spectral_norm_matches_eigensolver(seed):
    m = np.random.default_rng(seed).normal(size=(8, 8))
    oracle = np.sqrt(np.linalg.eigvalsh(m.T @ m).max())
    assert spectral_norm(m).value == pytest.approx(oracle, abs=1e-6)


def test_spectral_norm_flags_non_convergence():
    m = np.random.default_rng(0).normal(size=(8, 8))
    result = spectral_norm(m, tol=0.0, max_iters=3)
    assert not result.converged
    assert result.iterations == 3


def test_spectral_norm_is_deterministic():
    m = np.random.default_rng(1).normal(size=(6, 6))
    assert spectral_norm(m) == spectral_norm(m)


def test_copy_and_sign_flip():
    x = np.random.default_rng(2).normal(size=(256, 8))
    batch = _full([x, x, -x])
    np.testing.assert_allclose(cross_correlation(batch, 0, 1).matrix, np.eye(8), atol=1e-6)
    np.testing.assert_allclose(cross_correlation(batch, 0, 2).matrix, -np.eye(8), atol=1e-6)
    assert cross_correlation(batch, 0, 0).spectral_norm == pytest.approx(1.0, abs=1e-6)


def test_transpose_relation():
    rng = np.random.default_rng(3)
    batch = _full([rng.normal(size=(128, 4)), rng.normal(size=(128, 4))])
    c01 = cross_correlation(batch, 0, 1)
    np.testing.assert_allclose(cross_correlation(batch, 1, 0).matrix, c01.matrix.T)
    assert c01.transpose().pair == (1, 0)


def test_cross_correlation_requires_whitened_batch():
    x = np.random.default_rng(4).normal(size=(32, 4))
    with pytest.raises(ValueError):
        cross_correlation(FeatureBatch.from_arrays([x, x]), 0, 1)


def test_independent_streams_have_small_norms():
    rng = np.random.default_rng(5)
    batch = _full([rng.normal(size=(4096, 8)) for _ in range(2)])
    c01 = cross_correlation(batch, 0, 1)
    assert np.abs(c01.matrix).max() < 5 / np.sqrt(4096)
    assert c01.spectral_norm <= 0.2


def test_identical_streams_collapse():
    x = np.random.default_rng(6).normal(size=(512, 8))
    assert d_spec(_full([x, x, x])) == pytest.approx(1.0, abs=1e-6)


def test_independent_streams_d_spec():
    rng = np.random.default_rng(7)
    assert d_spec(_full([rng.normal(size=(4096, 8)) for _ in range(4)])) <= 0.2


def test_two_identical_two_independent():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4096, 8))
    batch = _full([x, x, rng.normal(size=(4096, 8)), rng.normal(size=(4096, 8))])
    norms = pair_norms(batch)
    assert len(norms) == 6
    assert norms[0].value == pytest.approx(1.0, abs=1e-6)
    # 2 of the 12 ordered pairs are collapsed
    ordered = [cross_correlation(batch, i, j).spectral_norm for i, j in itertools.permutations(range(4), 2)]
    assert d_spec(batch) == pytest.approx(np.mean(ordered), abs=1e-9)
    assert 2 / 12 <= d_spec(batch) <= 2 / 12 + 0.2


def test_d_spec_is_permutation_invariant():
    rng = np.random.default_rng(9)
    base = rng.normal(size=(256, 4))
    arrays = [base + 0.5 * rng.normal(size=(256, 4)) for _ in range(4)]
    reference = d_spec(_full(arrays))
    for perm in [(1, 0, 2, 3), (3, 2, 1, 0), (2, 0, 3, 1)]:
        assert d_spec(_full([arrays[k] for k in perm])) == pytest.approx(reference, abs=1e-6)


def test_pair_norms_threaded_matches_serial():
    rng = np.random.default_rng(10)
    batch = _full([rng.normal(size=(128, 4)) for _ in range(4)])
    assert pair_norms(batch, threads=3) == pair_norms(batch)


def test_d_spec_needs_two_streams():
    x = np.random.default_rng(11).normal(size=(64, 4))
    with pytest.raises(ValueError):
        d_spec(_full([x]))
