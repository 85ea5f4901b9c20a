"""Closed forms of the variance-aggregation theory of hallucination.

The aggregate of P streams is ``M = mu + mean(m_i)`` with per-stream noise of
variance ``sigma2`` and average pairwise correlation ``rho``. Hallucination is
the event ``M <= 0``; Cantelli's inequality bounds its probability by
``Var(M) / (Var(M) + mu^2)``. When correlation grows with P the bound becomes
U-shaped in P and has a finite minimizer ``P*``.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Sequence

import numpy as np

from neural_diversity.errors import ConfigError

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-15


def _reject(msg: str) -> None:
    logger.error(msg)
    raise ConfigError(msg)


@dataclass(frozen=True)
class TheoryParams:
    """Parameters of the noise model of P aggregated streams.

    Attributes:
        sigma2 (float): Per-stream noise variance, > 0.
        mu (float): Magnitude of the truth signal, > 0.
        rho (float): Average pairwise correlation in [0, 1].
        P (int): Number of streams, >= 1.
        kappa_bar (float): Average correlation scaling factor, >= 0.
        h0 (float): Approximation-failure mass in [0, 1].
    """

    sigma2: float
    mu: float
    rho: float = 0.0
    P: int = 1  # pylint: disable=invalid-name
    kappa_bar: float = 1.0
    h0: float = 0.0

    def __post_init__(self) -> None:
        if not self.sigma2 > 0:
            _reject(f"sigma2 must be > 0, got {self.sigma2}.")
        if not self.mu > 0:
            _reject(f"mu must be > 0, got {self.mu}.")
        if not 0.0 <= self.rho <= 1.0:
            _reject(f"rho must lie in [0, 1], got {self.rho}.")
        if int(self.P) != self.P or self.P < 1:
            _reject(f"P must be an integer >= 1, got {self.P}.")
        if self.kappa_bar < 0:
            _reject(f"kappa_bar must be >= 0, got {self.kappa_bar}.")
        if not 0.0 <= self.h0 <= 1.0:
            _reject(f"h0 must lie in [0, 1], got {self.h0}.")


@dataclass(frozen=True)
class RhoSchedule:
    """Correlation growing with the stream count: ``rho0 + beta (P-1)^gamma``.

    ``beta = 0`` is accepted and gives a constant correlation.
    """

    rho0: float = 0.0
    beta: float = 0.01
    gamma: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho0 <= 1.0:
            _reject(f"rho0 must lie in [0, 1], got {self.rho0}.")
        if self.beta < 0:
            _reject(f"beta must be >= 0, got {self.beta}.")
        if not self.gamma > 0:
            _reject(f"gamma must be > 0, got {self.gamma}.")


class RhoValue(NamedTuple):
    value: float
    clipped: bool


def _check_streams(P: int) -> None:  # pylint: disable=invalid-name
    if P < 1:
        _reject(f"The number of streams must be >= 1, got {P}.")


def variance_factor(rho: float, P: int) -> float:  # pylint: disable=invalid-name
    """g = (1 - rho) / P + rho, the share of the per-stream variance left after averaging."""
    _check_streams(P)
    return (1.0 - rho) / P + rho


def var_aggregate(sigma2: float, rho: float, P: int) -> float:  # pylint: disable=invalid-name
    """Variance of the aggregate M of P equicorrelated streams.

    Args:
        sigma2 (float): Per-stream noise variance.
        rho (float): Average pairwise correlation.
        P (int): Number of streams.

    Raises:
        ConfigError: P < 1.

    Returns:
        float: ``sigma2 * ((1 - rho) / P + rho)``.
    """
    return sigma2 * variance_factor(rho, P)


def cantelli_bound(variance: float, mu: float) -> float:
    """One-sided Cantelli bound on P(M <= 0) for E[M] = mu.

    Args:
        variance (float): Variance of M, >= 0.
        mu (float): Mean of M, > 0.

    Raises:
        ConfigError: mu <= 0 or variance < 0.

    Returns:
        float: ``variance / (variance + mu^2)``, in [0, 1).
    """
    if not mu > 0:
        _reject(f"mu must be > 0 for the Cantelli bound, got {mu}.")
    if variance < 0:
        _reject(f"variance must be >= 0, got {variance}.")
    return variance / (variance + mu * mu)


def diversity_bound(params: TheoryParams, d_spec: float) -> float:
    """Hallucination bound expressed through the spectral diversity index.

    The average correlation is replaced by its proxy ``kappa_bar * d_spec``,
    the Cantelli bound of the resulting variance is computed and ``h0`` is
    added. The result is clamped to [0, 1].

    Args:
        params (TheoryParams): Noise model; its `rho` is ignored.
        d_spec (float): Spectral diversity index of the streams.

    Raises:
        ConfigError: ``kappa_bar * d_spec`` lies outside [0, 1].

    Returns:
        float: The upper bound on the hallucination probability.
    """
    proxy = params.kappa_bar * d_spec
    if not 0.0 <= proxy <= 1.0:
        _reject(
            f"The correlation proxy kappa_bar * d_spec = {proxy} is outside [0, 1] "
            f"(kappa_bar={params.kappa_bar}, d_spec={d_spec})."
        )
    bound = cantelli_bound(var_aggregate(params.sigma2, proxy, params.P), params.mu)
    return float(min(1.0, max(0.0, bound + params.h0)))


def rho_schedule(schedule: RhoSchedule, P: int) -> RhoValue:  # pylint: disable=invalid-name
    """Correlation at P streams, clipped to 1.

    Args:
        schedule (RhoSchedule): Growth law of the correlation.
        P (int): Number of streams, >= 1.

    Returns:
        RhoValue: The value in [0, 1] and whether clipping occurred.
    """
    _check_streams(P)
    raw = schedule.rho0 + schedule.beta * float(P - 1) ** schedule.gamma
    if raw > 1.0:
        logger.warning("rho(%s) = %.6g exceeds 1 and is clipped.", P, raw)
        return RhoValue(1.0, True)
    return RhoValue(raw, False)


def g_derivative(schedule: RhoSchedule, P: float) -> float:  # pylint: disable=invalid-name
    """Derivative of the variance factor along the schedule.

    ``g'(P) = rho'(P) (1 - 1/P) - (1 - rho(P)) / P^2``; the correlation is
    flat where it is clipped.
    """
    if P < 1:
        _reject(f"The number of streams must be >= 1, got {P}.")
    raw = schedule.rho0 + schedule.beta * (P - 1.0) ** schedule.gamma
    if raw > 1.0:
        return 0.0
    if P == 1:
        if schedule.beta == 0 or schedule.gamma > 1:
            d_rho = 0.0
        elif schedule.gamma == 1:
            d_rho = schedule.beta
        else:
            d_rho = float("inf")
    else:
        d_rho = schedule.beta * schedule.gamma * (P - 1.0) ** (schedule.gamma - 1.0)
    return d_rho * (1.0 - 1.0 / P) - (1.0 - raw) / (P * P)


@dataclass(frozen=True)
class CurveRow:
    P: int  # pylint: disable=invalid-name
    rho: float
    g: float
    B: float  # pylint: disable=invalid-name
    clipped: bool = False


@dataclass
class BoundCurve:
    """Rows of (P, rho(P), g(P), B(P)) over an ascending range of P."""

    rows: list[CurveRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def P(self) -> np.ndarray:  # pylint: disable=invalid-name
        return np.array([r.P for r in self.rows])

    @property
    def g(self) -> np.ndarray:
        return np.array([r.g for r in self.rows])

    @property
    def B(self) -> np.ndarray:  # pylint: disable=invalid-name
        return np.array([r.B for r in self.rows])

    @property
    def clipped(self) -> bool:
        return any(r.clipped for r in self.rows)

    def first_differences(self) -> np.ndarray:
        return np.diff(self.g)

    def second_differences(self) -> np.ndarray:
        return np.diff(self.g, n=2)

    def sign_changes(self) -> int:
        """Number of sign changes of the non-zero first differences of g."""
        signs = np.sign(self.first_differences())
        signs = signs[signs != 0]
        return int(np.count_nonzero(np.diff(signs)))

    def to_rows(self) -> list[list[Any]]:
        """CSV rows matching the header ``P,rho,g,B``."""
        return [[r.P, r.rho, r.g, r.B] for r in self.rows]


def bound_curve(
    sigma2: float, mu: float, schedule: RhoSchedule, P_range: Sequence[int]  # pylint: disable=invalid-name
) -> BoundCurve:
    """Evaluate the Cantelli bound along a correlation schedule.

    Args:
        sigma2 (float): Per-stream noise variance.
        mu (float): Truth magnitude.
        schedule (RhoSchedule): Growth law of the correlation.
        P_range (Sequence[int]): Ascending stream counts, all >= 1.

    Raises:
        ConfigError: The range is empty, not ascending or not made of integers >= 1.

    Returns:
        BoundCurve: One row per P.
    """
    values = list(P_range)
    if not values:
        _reject("The range of stream counts is empty.")
    if any(int(p) != p or p < 1 for p in values):
        _reject(f"Stream counts must be integers >= 1, got {values}.")
    if any(b <= a for a, b in zip(values, values[1:])):
        _reject(f"Stream counts must be strictly ascending, got {values}.")

    rows = []
    for p in values:
        rho, clipped = rho_schedule(schedule, int(p))
        g = variance_factor(rho, int(p))
        rows.append(CurveRow(int(p), rho, g, cantelli_bound(sigma2 * g, mu), clipped))
    return BoundCurve(rows)


@dataclass(frozen=True)
class PStar:
    """Minimizer of a bound curve.

    Attributes:
        P (int): Smallest stream count reaching the minimum.
        B (float): Bound at that count.
        boundary (bool): Whether the minimizer is the first or last P scanned.
        ties (tuple[int, ...]): Every P reaching the minimum.
    """

    P: int  # pylint: disable=invalid-name
    B: float  # pylint: disable=invalid-name
    boundary: bool
    ties: tuple[int, ...] = ()


def find_p_star(curve: BoundCurve) -> PStar:
    """Integer minimizer of B over the curve, ties broken toward smaller P.

    Args:
        curve (BoundCurve): Non-empty curve.

    Returns:
        PStar: The minimizer with its boundary and tie flags.
    """
    if not len(curve):
        _reject("Cannot minimize an empty bound curve.")
    b = curve.B
    candidates = np.flatnonzero(b <= b.min() + TIE_TOLERANCE)
    best = int(candidates[0])
    ties = tuple(int(curve.rows[i].P) for i in candidates)
    boundary = len(curve) > 1 and best in (0, len(curve) - 1)

    if len(ties) > 1:
        logger.info("The bound minimum is shared by P in %s; keeping P=%s.", ties, ties[0])
    if boundary:
        logger.warning(
            "boundary minimizer: P*=%s is at the edge of the scanned range [%s, %s].",
            curve.rows[best].P,
            curve.rows[0].P,
            curve.rows[-1].P,
        )
    return PStar(curve.rows[best].P, float(b[best]), boundary, ties)
