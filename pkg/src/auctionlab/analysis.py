"""Post-run accuracy metrics: ratio tables, fluctuation, and click-volume bounds.

Two ratio views are provided. The per-stage table scores each stage in
isolation (stage conversions against stage payments), which is the right
lens for offline CPA and stage-paced runs. The checkpoint table scores the
run cumulatively through each stage end, which is the feedback a bidder
can actually act on under delayed conversions; with sparse stages the
per-stage view is dominated by conversion noise no payment rule can cancel.

Eligibility convention everywhere: a (bidder, window) entry appears only
when its conversion count is at least 1. An eligible window with zero
payment yields an infinite ratio rather than being dropped.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SchemaError
from .mechanisms import SimulationResult

RATIO_CSV_HEADER = "bidder,stage,ratio"
METRIC_SUMMARY_CSV_HEADER = "mechanism,metric,upper,lower,mean"


@dataclass
class RatioTable:
    """Eligible (bidder, stage-or-group, ratio) entries for one run."""

    bidder: np.ndarray
    stage: np.ndarray
    ratio: np.ndarray

    def __post_init__(self) -> None:
        if not (self.bidder.shape == self.stage.shape == self.ratio.shape):
            raise SchemaError("ratio table columns must have identical shapes")

    @property
    def num_entries(self) -> int:
        return int(self.ratio.size)

    def summary(self) -> dict[str, float]:
        """Upper/lower quartiles and mean of the ratio column."""
        if self.ratio.size == 0:
            return {"upper": float("nan"), "lower": float("nan"), "mean": float("nan")}
        return {
            "upper": float(np.quantile(self.ratio, 0.75)),
            "lower": float(np.quantile(self.ratio, 0.25)),
            "mean": float(np.mean(self.ratio)),
        }


def conversion_ratio(conversions: float, payment: float, tcpa: float) -> float:
    """Target-to-paid ratio tCPA * Z / P for one eligible window."""
    if conversions < 1.0:
        raise ConfigError(f"ratio needs at least one conversion, got {conversions}")
    if payment < 0.0:
        raise ConfigError(f"payment must be nonnegative, got {payment}")
    if payment == 0.0:
        return float("inf")
    return conversions * tcpa / payment


def _table_from_windows(conversions: np.ndarray, payments: np.ndarray, tcpa: np.ndarray) -> RatioTable:
    """Build a ratio table from (window, bidder) conversion/payment arrays."""
    T, M = conversions.shape
    bidders = []
    stages = []
    ratios = []
    for m in range(M):
        for t in range(T):
            z = conversions[t, m]
            if z < 1.0:
                continue
            bidders.append(m)
            stages.append(t)
            p = payments[t, m]
            ratios.append(z * tcpa[m] / p if p > 0.0 else float("inf"))
    return RatioTable(
        np.array(bidders, dtype=np.int64),
        np.array(stages, dtype=np.int64),
        np.array(ratios, dtype=np.float64),
    )


def cpa_ratio_table(result: SimulationResult) -> RatioTable:
    """Per-stage ratios: each stage's conversions against that stage's payments."""
    return _table_from_windows(result.stage_conversions, result.stage_payments, result.tcpa)


def checkpoint_ratio_table(result: SimulationResult) -> RatioTable:
    """Cumulative ratios through each stage end.

    Entry (m, t) compares all conversions through stage t against all
    payments through stage t. This is the quantity released to bidders at
    the boundary under delayed feedback.
    """
    return _table_from_windows(
        np.cumsum(result.stage_conversions, axis=0),
        np.cumsum(result.stage_payments, axis=0),
        result.tcpa,
    )


def cfp_tau_rollup(
    stage_conversions: np.ndarray,
    stage_payments: np.ndarray,
    tcpa: np.ndarray | float,
    tau: int,
) -> RatioTable:
    """Ratios over consecutive groups of tau stages.

    Stages are merged in run order into groups of tau; a trailing partial
    group is folded into the last full group so every stage is counted
    exactly once and group totals sum to the whole-run totals. tau = 1
    reproduces the per-stage table; tau >= T yields a single group.
    """
    conversions = np.asarray(stage_conversions, dtype=np.float64)
    payments = np.asarray(stage_payments, dtype=np.float64)
    if conversions.ndim == 1:
        conversions = conversions[:, None]
        payments = payments[:, None]
    if conversions.shape != payments.shape:
        raise SchemaError(
            f"stage conversions {conversions.shape} and payments {payments.shape} must match"
        )
    T, M = conversions.shape
    if tau < 1:
        raise ConfigError(f"tau must be at least 1, got {tau}")
    tcpa_arr = np.broadcast_to(np.asarray(tcpa, dtype=np.float64), (M,))

    num_groups = max(T // tau, 1)
    bounds = [min(g * tau, T) for g in range(num_groups)] + [T]
    grouped_z = np.vstack([conversions[bounds[g]: bounds[g + 1]].sum(axis=0) for g in range(num_groups)])
    grouped_p = np.vstack([payments[bounds[g]: bounds[g + 1]].sum(axis=0) for g in range(num_groups)])
    return _table_from_windows(grouped_z, grouped_p, tcpa_arr)


def pplt_objective(
    stage_conversions: np.ndarray,
    stage_payments: np.ndarray,
    tcpa: np.ndarray,
) -> np.ndarray:
    """Per-bidder mean absolute per-stage ratio error.

    A stage with no conversions and no payment contributes zero; a stage
    with conversions but zero payment contributes infinity. The stage
    pacing oracle drives this to exactly zero.
    """
    z = np.asarray(stage_conversions, dtype=np.float64)
    p = np.asarray(stage_payments, dtype=np.float64)
    tcpa = np.asarray(tcpa, dtype=np.float64)
    T, M = z.shape
    errors = np.zeros((T, M))
    idle = (z == 0.0) & (p == 0.0)
    unpaid = (z > 0.0) & (p == 0.0)
    rest = ~(idle | unpaid)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rest, z * tcpa[None, :] / np.where(p > 0.0, p, 1.0), 1.0)
    errors[rest] = np.abs(ratio[rest] - 1.0)
    errors[unpaid] = np.inf
    # Paid with zero conversions: error is the full overshoot P / (eps target),
    # treated as infinite as well since the target is zero.
    paid_no_z = (z == 0.0) & (p > 0.0)
    errors[paid_no_z] = np.inf
    return errors.mean(axis=0)


def fluctuation_stats(payments: np.ndarray, tcpa: float) -> tuple[float, float]:
    """Population variance and range of tCPA-normalized per-click payments."""
    payments = np.asarray(payments, dtype=np.float64)
    if payments.size == 0:
        return float("nan"), float("nan")
    scaled = payments / tcpa
    return float(np.var(scaled)), float(np.max(scaled) - np.min(scaled))


@dataclass
class FluctuationTable:
    """Per-bidder payment dispersion over clicked rounds."""

    bidder: np.ndarray
    variance: np.ndarray
    value_range: np.ndarray

    def summary(self) -> dict[str, float]:
        if self.bidder.size == 0:
            return {"upper": float("nan"), "lower": float("nan"), "mean": float("nan")}
        return {
            "upper": float(np.quantile(self.variance, 0.75)),
            "lower": float(np.quantile(self.variance, 0.25)),
            "mean": float(np.mean(self.variance)),
        }


def payment_fluctuation(result: SimulationResult) -> FluctuationTable:
    """Dispersion of per-click payments (zero payments included) per bidder.

    Bidders with no clicks are excluded; payments are normalized by the
    bidder's tCPA before computing variance and range.
    """
    clicked = result.rounds.click == 1
    bidders = []
    variances = []
    ranges = []
    for m in range(result.num_bidders):
        pays = result.rounds.payment[clicked & (result.rounds.bidder == m)]
        if pays.size == 0:
            continue
        var, rng = fluctuation_stats(pays, float(result.tcpa[m]))
        bidders.append(m)
        variances.append(var)
        ranges.append(rng)
    return FluctuationTable(
        np.array(bidders, dtype=np.int64),
        np.array(variances, dtype=np.float64),
        np.array(ranges, dtype=np.float64),
    )


def chernoff_min_clicks(epsilon: float, cvr: float) -> int:
    """Click volume above which conversion counts concentrate within epsilon.

    Evaluates ceil((2 + eps) * ln(1 / eps) / (eps^2 * cvr)). For eps >= 1
    the multiplicative bound is vacuous: a warning is issued and 0 is
    returned.
    """
    if epsilon <= 0.0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    if not 0.0 < cvr <= 1.0:
        raise ConfigError(f"cvr must lie in (0, 1], got {cvr}")
    if epsilon >= 1.0:
        warnings.warn(f"relative deviation {epsilon} >= 1 makes the bound vacuous; returning 0")
        return 0
    return int(np.ceil((2.0 + epsilon) * np.log(1.0 / epsilon) / (epsilon * epsilon * cvr)))


def chernoff_empirical_check(
    ctr: float,
    cvr: float,
    epsilon: float,
    trials: int,
    click_volume: int | None = None,
    seed: int = 0,
) -> float:
    """Monte Carlo violation rate for the click-volume bound.

    Each trial draws a Binomial(click_volume, cvr) conversion count and
    flags a violation when it deviates from its mean by more than epsilon
    relatively. click_volume defaults to chernoff_min_clicks(epsilon, cvr).
    ctr is accepted for interface symmetry; conditioning on clicks makes
    the click-through rate drop out of the bound.
    """
    if trials < 1:
        raise ConfigError(f"trials must be at least 1, got {trials}")
    if click_volume is None:
        click_volume = chernoff_min_clicks(epsilon, cvr)
    if click_volume == 0:
        return 0.0
    rng = np.random.Generator(np.random.Philox(key=[seed, 21]))
    draws = rng.binomial(click_volume, cvr, size=trials)
    mean = click_volume * cvr
    violations = np.abs(draws / mean - 1.0) > epsilon
    return float(np.mean(violations))


def etic_violation_rate(ratios: np.ndarray, epsilon: float) -> float:
    """Fraction of ratio entries outside the [1 - eps, 1 + eps] band.

    Empty input yields nan: no eligible windows means the truthfulness
    check is vacuous, not passed.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.size == 0:
        return float("nan")
    return float(np.mean(np.abs(ratios - 1.0) > epsilon))


def write_ratio_csv(table: RatioTable, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(RATIO_CSV_HEADER + "\n")
        for b, s, r in zip(table.bidder, table.stage, table.ratio):
            fh.write(f"{int(b)},{int(s)},{repr(float(r))}\n")


def write_metric_summary_csv(rows: list[tuple[str, str, float, float, float]], path: str) -> None:
    """Write (mechanism, metric, upper, lower, mean) summary rows."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(METRIC_SUMMARY_CSV_HEADER + "\n")
        for mechanism, metric, upper, lower, mean in rows:
            fh.write(f"{mechanism},{metric},{repr(float(upper))},{repr(float(lower))},{repr(float(mean))}\n")
