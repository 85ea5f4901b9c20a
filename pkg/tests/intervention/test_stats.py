import numpy as np
import pytest
from scipy import stats

from neural_diversity.intervention.stats import (
    bootstrap_test,
    effect_size,
    fisher_combine,
    ks_uniformity,
    mcnemar_test,
    null_calibration,
    paired_t_test,
)


def test_t_test_matches_the_closed_form():
    res = paired_t_test([1.0, 2.0, 3.0, 4.0])
    sd = np.std([1, 2, 3, 4], ddof=1)
    assert res.t == pytest.approx(2.5 / (sd / 2.0))
    assert res.p == pytest.approx(2 * stats.t.sf(res.t, 3))
    assert not res.degenerate


def test_all_zero_deltas_give_no_effect():
    res = paired_t_test(np.zeros(10))
    assert (res.t, res.p, res.degenerate) == (0.0, 1.0, True)


def test_constant_nonzero_deltas_are_flagged():
    res = paired_t_test([1.0, 1.0, 1.0, 1.0])
    assert res.degenerate
    assert res.p == 1.0
    assert res.t == np.inf


def test_t_test_needs_two_deltas():
    with pytest.raises(ValueError):
        paired_t_test([0.3])


def test_t_test_power():
    hits = [paired_t_test(np.random.default_rng(s).normal(0.5, 1.0, 100)).p < 0.01 for s in range(100)]
    assert np.mean(hits) >= 0.95


def test_t_test_null_calibration():
    p_values = [paired_t_test(np.random.default_rng(s).normal(size=30)).p for s in range(500)]
    assert ks_uniformity(p_values) < 0.1


@pytest.mark.parametrize("n_samples", [8, 128])
def test_null_calibration_is_uniform(n_samples):
    assert null_calibration(n_samples, seed=1) < 0.1
    assert null_calibration(n_samples, seed=1) == null_calibration(n_samples, seed=1)


def test_null_calibration_rejects_tiny_designs():
    with pytest.raises(ValueError):
        null_calibration(1)
    with pytest.raises(ValueError):
        null_calibration(10, n_replications=0)


def test_planted_shift_is_recovered():
    rng = np.random.default_rng(0)
    baseline = rng.uniform(0.2, 0.8, size=512)
    corrupted = baseline + rng.normal(0.0, 0.05, size=512) - 0.05
    res = paired_t_test(corrupted - baseline)
    assert res.mean == pytest.approx(-0.05, abs=0.01)
    assert res.p < 0.001


def test_fisher_four_halves():
    res = fisher_combine([0.5] * 4)
    assert res.chi2 == pytest.approx(5.545, abs=1e-3)
    assert res.dof == 8
    assert res.p == pytest.approx(stats.chi2.sf(-8 * np.log(0.5), 8))


def test_fisher_single_p_is_identity():
    assert fisher_combine([0.037]).p == pytest.approx(0.037, abs=1e-9)


def test_fisher_p_one_contributes_nothing():
    assert fisher_combine([0.2, 1.0]).chi2 == pytest.approx(fisher_combine([0.2]).chi2)


@pytest.mark.parametrize("p_values", [[0.0, 0.5], [1.2], [], [np.nan]])
def test_fisher_rejects_invalid_inputs(p_values):
    with pytest.raises(ValueError):
        fisher_combine(p_values)


def test_fisher_is_monotone():
    base = [0.3, 0.6, 0.9]
    for i in range(3):
        smaller = list(base)
        smaller[i] /= 2
        assert fisher_combine(smaller).p <= fisher_combine(base).p


def test_mcnemar_exact_tail():
    res = mcnemar_test(15, 0)
    assert res.exact
    assert res.p == pytest.approx(2 * 0.5**15, abs=1e-9)


def test_mcnemar_symmetric_counts():
    assert mcnemar_test(5, 5).p == pytest.approx(1.0)


def test_mcnemar_without_discordant_pairs():
    res = mcnemar_test(0, 0)
    assert res.degenerate
    assert res.p == 1.0


def test_mcnemar_chi_square_branch():
    res = mcnemar_test(30, 10)
    assert not res.exact
    assert res.p == pytest.approx(stats.chi2.sf(19**2 / 40, 1))


def test_mcnemar_rejects_negative_counts():
    with pytest.raises(ValueError):
        mcnemar_test(-1, 3)


def test_bootstrap_identical_arrays():
    a = np.random.default_rng(0).normal(size=50)
    assert bootstrap_test(a, a.copy()) >= 0.95


def test_bootstrap_disjoint_supports():
    n_resamples = 2000
    assert bootstrap_test(np.ones(40), np.zeros(40), n_resamples=n_resamples) <= 2 / n_resamples


def test_bootstrap_is_deterministic_per_seed():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=30), rng.normal(size=30)
    assert bootstrap_test(a, b, seed=3) == bootstrap_test(a, b, seed=3)


def test_bootstrap_power():
    hits = []
    for s in range(40):
        rng = np.random.default_rng(s)
        b = rng.normal(size=200)
        a = b + rng.normal(0.5, 1.0, size=200)
        hits.append(bootstrap_test(a, b, n_resamples=2000, seed=s) < 0.05)
    assert np.mean(hits) >= 0.9


@pytest.mark.parametrize("kwargs", [{"scores_b": np.zeros(3)}, {"n_resamples": 100}])
def test_bootstrap_rejects_invalid_inputs(kwargs):
    args = {"scores_a": np.zeros(4), "scores_b": np.zeros(4), **kwargs}
    with pytest.raises(ValueError):
        bootstrap_test(**args)


def test_effect_size():
    assert effect_size([1.0, 2.0, 3.0]) == pytest.approx(2.0)
    assert effect_size([0.0, 0.0]) == 0.0
