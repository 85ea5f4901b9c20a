import numpy as np
import pytest

from neural_diversity.errors import ConfigError
from neural_diversity.theory.bounds import (
    RhoSchedule,
    TheoryParams,
    bound_curve,
    cantelli_bound,
    diversity_bound,
    find_p_star,
    g_derivative,
    rho_schedule,
    var_aggregate,
)


@pytest.mark.parametrize(
    "sigma2, rho, P, expected",
    [
        (1.0, 0.0, 4, 0.25),
        (1.0, 1.0, 8, 1.0),
        (1.0, 0.5, 4, 0.625),
        (2.0, 0.0, 1, 2.0),
    ],
)
def test_var_aggregate(sigma2, rho, P, expected):
    assert var_aggregate(sigma2, rho, P) == pytest.approx(expected, abs=1e-12)


def test_var_aggregate_rejects_zero_streams():
    with pytest.raises(ConfigError):
        var_aggregate(1.0, 0.5, 0)


def test_var_aggregate_monotonicity():
    rhos = np.linspace(0, 1, 11)
    for P in [2, 4, 16]:
        values = [var_aggregate(1.0, r, P) for r in rhos]
        assert all(a < b for a, b in zip(values, values[1:]))
    for rho in [0.0, 0.3, 0.9]:
        values = [var_aggregate(1.0, rho, P) for P in range(1, 20)]
        assert all(a > b for a, b in zip(values, values[1:]))


@pytest.mark.parametrize(
    "variance, mu, expected",
    [(0.0, 1.0, 0.0), (1.0, 1.0, 0.5), (3.0, 1.0, 0.75), (1.0, 2.0, 0.2)],
)
def test_cantelli_bound(variance, mu, expected):
    assert cantelli_bound(variance, mu) == pytest.approx(expected)


@pytest.mark.parametrize("mu", [0.0, -1.0])
def test_cantelli_bound_rejects_non_positive_mu(mu):
    with pytest.raises(ConfigError):
        cantelli_bound(1.0, mu)


def test_cantelli_bound_monotonicity():
    variances = np.linspace(0, 5, 21)
    bounds = [cantelli_bound(v, 1.0) for v in variances]
    assert all(a < b for a, b in zip(bounds, bounds[1:]))
    mus = np.linspace(0.1, 3, 21)
    bounds = [cantelli_bound(1.0, m) for m in mus]
    assert all(a > b for a, b in zip(bounds, bounds[1:]))


def test_diversity_bound_fully_decorrelated():
    params = TheoryParams(sigma2=1.0, mu=1.0, P=4, kappa_bar=1.0, h0=0.0)
    assert diversity_bound(params, 0.0) == pytest.approx(cantelli_bound(0.25, 1.0))


@pytest.mark.parametrize("P", [1, 2, 8, 64])
def test_diversity_bound_complete_collapse_ignores_P(P):
    params = TheoryParams(sigma2=2.0, mu=1.0, P=P, kappa_bar=1.0)
    assert diversity_bound(params, 1.0) == pytest.approx(cantelli_bound(2.0, 1.0))


def test_diversity_bound_worked_example():
    params = TheoryParams(sigma2=1.0, mu=1.0, P=4, kappa_bar=0.5, h0=0.01)
    assert diversity_bound(params, 0.5) == pytest.approx(0.4375 / 1.4375 + 0.01)
    assert diversity_bound(params, 0.5) == pytest.approx(0.3143, abs=1e-4)


def test_diversity_bound_rejects_proxy_above_one():
    params = TheoryParams(sigma2=1.0, mu=1.0, P=4, kappa_bar=2.0)
    with pytest.raises(ConfigError):
        diversity_bound(params, 0.75)


def test_diversity_bound_is_clamped():
    params = TheoryParams(sigma2=100.0, mu=0.1, P=1, kappa_bar=1.0, h0=1.0)
    assert diversity_bound(params, 1.0) == 1.0


@pytest.mark.parametrize(
    "kwargs",
    [
        {"sigma2": 0.0, "mu": 1.0},
        {"sigma2": 1.0, "mu": 0.0},
        {"sigma2": 1.0, "mu": 1.0, "rho": 1.5},
        {"sigma2": 1.0, "mu": 1.0, "P": 0},
        {"sigma2": 1.0, "mu": 1.0, "h0": 2.0},
    ],
)
def test_theory_params_invariants(kwargs):
    with pytest.raises(ConfigError):
        TheoryParams(**kwargs)


def test_rho_schedule_values():
    assert rho_schedule(RhoSchedule(0.0, 0.01, 1.0), 5) == (pytest.approx(0.04), False)
    for P in [1, 5, 50]:
        assert rho_schedule(RhoSchedule(0.3, 0.0, 1.0), P).value == pytest.approx(0.3)


def test_rho_schedule_clips_with_flag():
    value, clipped = rho_schedule(RhoSchedule(0.9, 0.5, 2.0), 4)
    assert value == 1.0
    assert clipped


@pytest.mark.parametrize("beta, gamma", [(-0.1, 1.0), (0.1, 0.0), (0.1, -1.0)])
def test_rho_schedule_rejects_bad_growth(beta, gamma):
    with pytest.raises(ConfigError):
        RhoSchedule(0.0, beta, gamma)


def test_bound_curve_without_growth_decreases():
    curve = bound_curve(1.0, 1.0, RhoSchedule(0.0, 0.0, 1.0), range(1, 65))
    np.testing.assert_allclose(curve.g, 1.0 / np.arange(1, 65))
    assert np.all(curve.first_differences() < 0)
    p_star = find_p_star(curve)
    assert p_star.P == 64
    assert p_star.boundary


def test_u_shape_minimizer():
    curve = bound_curve(1.0, 1.0, RhoSchedule(0.0, 0.01, 1.0), range(1, 65))
    P = np.arange(1, 65)
    np.testing.assert_allclose(curve.g, 1.01 / P + 0.01 * P - 0.02, atol=1e-12)
    assert int(P[np.argmin(curve.g)]) == 10

    p_star = find_p_star(curve)
    assert p_star.P == 10
    assert not p_star.boundary
    assert p_star.B == pytest.approx(curve.B[9])
    assert curve.sign_changes() == 1
    assert np.all(curve.second_differences() >= -1e-12)


def test_b_is_increasing_in_g():
    curve = bound_curve(2.0, 1.5, RhoSchedule(0.1, 0.02, 1.5), range(1, 40))
    order = np.argsort(curve.g)
    assert np.all(np.diff(curve.B[order]) >= 0)


def test_flat_curve_ties_break_toward_smaller_P():
    curve = bound_curve(1.0, 1.0, RhoSchedule(1.0, 0.0, 1.0), range(1, 9))
    assert np.all(curve.B == curve.B[0])
    p_star = find_p_star(curve)
    assert p_star.P == 1
    assert p_star.ties == tuple(range(1, 9))


@pytest.mark.parametrize(
    "P_range", [[], [0, 1, 2], [1, 3, 2], [1, 1, 2]]
)
def test_bound_curve_rejects_bad_ranges(P_range):
    with pytest.raises(ConfigError):
        bound_curve(1.0, 1.0, RhoSchedule(), P_range)


def test_g_derivative_matches_differences():
    schedule = RhoSchedule(0.05, 0.02, 1.5)

    def g(p):
        rho = schedule.rho0 + schedule.beta * (p - 1.0) ** schedule.gamma
        return (1.0 - rho) / p + rho

    h = 1e-6
    for P in [2.0, 5.0, 8.0, 10.0]:
        numeric = (g(P + h) - g(P - h)) / (2 * h)
        assert g_derivative(schedule, P) == pytest.approx(numeric, rel=1e-5, abs=1e-9)

    schedule = RhoSchedule(0.0, 0.01, 1.0)
    # the continuous minimizer sqrt(101) sits between 10 and 11
    assert g_derivative(schedule, 10.0) < 0 < g_derivative(schedule, 11.0)
