"""Step-function survival curves and the product-limit machinery built on them.

Everything downstream (tree terminal estimates, ensemble predictions,
augmented training outcomes) is represented by one type: a right-continuous,
nonincreasing step function on [0, tau] that starts at 1. The product-limit
estimator here generalizes the classical Kaplan-Meier to observations whose
"outcome" is itself a survival curve, contributing fractional deaths and
fractional at-risk mass.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "CurveError",
    "StepSurvivalCurve",
    "OutcomeKind",
    "OutcomeCurve",
    "Horizon",
    "restricted_mean",
    "modified_km",
    "KmDiagnostics",
    "psi_residual",
    "shift_augment",
    "average_curves",
]

# At-risk denominators below this are treated as exhausted risk sets; the
# product-limit curve freezes at its last value from that point on.
ATRISK_FLOOR = 1e-12

_MONOTONE_TOL = 1e-12


class CurveError(ValueError):
    """Raised when curve inputs violate the step-curve invariants."""


@dataclass(frozen=True)
class StepSurvivalCurve:
    """Right-continuous nonincreasing step function, implicitly 1 on [0, t_0).

    Parameters
    ----------
    times : array-like
        Strictly increasing jump times, all >= 0.
    values : array-like
        Survival probability immediately after each jump time, in [0, 1],
        nonincreasing.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or v.ndim != 1 or t.shape != v.shape:
            raise CurveError("times and values must be 1-d arrays of equal length")
        if t.size:
            if np.any(~np.isfinite(t)) or np.any(t < 0):
                raise CurveError("jump times must be finite and >= 0")
            if np.any(np.diff(t) <= 0):
                raise CurveError("jump times must be strictly increasing")
            if np.any(~np.isfinite(v)) or np.any(v < -_MONOTONE_TOL) or np.any(v > 1 + _MONOTONE_TOL):
                raise CurveError("values must lie in [0, 1]")
            if np.any(np.diff(v) > _MONOTONE_TOL):
                raise CurveError("values must be nonincreasing")
            if t[0] == 0.0 and v[0] < 1.0:
                raise CurveError("curve must equal 1 at t = 0")
            # Scrub float dust so downstream comparisons stay exact.
            v = np.minimum.accumulate(np.clip(v, 0.0, 1.0))
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @staticmethod
    def unit() -> "StepSurvivalCurve":
        """The curve that is identically 1 (no observed decrements)."""
        return StepSurvivalCurve(np.empty(0), np.empty(0))

    def at(self, t) -> np.ndarray | float:
        """Evaluate S(t), right-continuously. Accepts scalars or arrays."""
        t_arr = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t_arr, side="right")
        vals = np.concatenate(([1.0], self.values))[idx]
        return float(vals) if np.isscalar(t) or t_arr.ndim == 0 else vals

    def left_at(self, t) -> np.ndarray | float:
        """Evaluate the left limit S(t-)."""
        t_arr = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t_arr, side="left")
        vals = np.concatenate(([1.0], self.values))[idx]
        return float(vals) if np.isscalar(t) or t_arr.ndim == 0 else vals

    def drops(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (times, masses) of the strictly positive decrements."""
        if not self.times.size:
            return np.empty(0), np.empty(0)
        prev = np.concatenate(([1.0], self.values[:-1]))
        mass = prev - self.values
        keep = mass > 0
        return self.times[keep], mass[keep]

    def compact(self) -> "StepSurvivalCurve":
        """Drop jump entries that do not change the function."""
        t, m = self.drops()
        if t.size == self.times.size:
            return self
        vals = 1.0 - np.cumsum(m)
        return StepSurvivalCurve(t, vals)

    def truncated(self, horizon: float) -> "StepSurvivalCurve":
        """Discard jumps at or beyond `horizon`; mass is held at the last value."""
        if horizon <= 0:
            raise CurveError("horizon must be positive")
        keep = self.times < horizon
        return StepSurvivalCurve(self.times[keep], self.values[keep])

    def final_value(self) -> float:
        return float(self.values[-1]) if self.values.size else 1.0

    def coarsened(self, max_points: int) -> "StepSurvivalCurve":
        """Thin the jump set to at most max_points, selected at mass-weighted
        quantiles of the decrement distribution. The final value is kept, so
        total decrement mass is preserved; intermediate mass collapses onto
        the next retained jump."""
        t, m = self.drops()
        if t.size <= max_points:
            return self.compact()
        cum = np.cumsum(m)
        targets = np.linspace(0.0, cum[-1], max_points + 1)[1:]
        pick = np.unique(np.searchsorted(cum, targets, side="left").clip(0, t.size - 1))
        keep_t = t[pick]
        keep_v = 1.0 - cum[pick]
        return StepSurvivalCurve(keep_t, keep_v)


class OutcomeKind(enum.Enum):
    EVENT = "event"
    CENSORED = "censored"
    AUGMENTED = "augmented"


@dataclass(frozen=True)
class OutcomeCurve:
    """A training outcome: an indicator curve at an observed time, or a
    carried-back augmented curve. `delta` is the censoring indicator
    (1 = uncensored)."""

    curve: StepSurvivalCurve
    kind: OutcomeKind
    delta: int
    time: float = field(default=float("nan"))

    def __post_init__(self):
        if self.kind is OutcomeKind.EVENT and self.delta != 1:
            raise CurveError("event outcomes require delta = 1")
        if self.kind is OutcomeKind.CENSORED and self.delta != 0:
            raise CurveError("censored outcomes require delta = 0")
        if self.kind is OutcomeKind.AUGMENTED and self.delta != 1:
            raise CurveError("augmented outcomes require delta = 1")

    @staticmethod
    def event(time: float) -> "OutcomeCurve":
        if not time > 0:
            raise CurveError("event time must be positive")
        return OutcomeCurve(StepSurvivalCurve([time], [0.0]), OutcomeKind.EVENT, 1, time)

    @staticmethod
    def censored(time: float) -> "OutcomeCurve":
        if not time > 0:
            raise CurveError("censoring time must be positive")
        return OutcomeCurve(StepSurvivalCurve([time], [0.0]), OutcomeKind.CENSORED, 0, time)


@dataclass(frozen=True)
class Horizon:
    """Overall study length and per-stratum maximal lengths."""

    tau: float
    strata_taus: tuple[float, ...] = ()

    def __post_init__(self):
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise CurveError("tau must be positive and finite")
        for tl in self.strata_taus:
            if not 0 < tl <= self.tau:
                raise CurveError("each stratum length must lie in (0, tau]")


def restricted_mean(curve: StepSurvivalCurve, tau: float) -> float:
    """Integrate the curve over [0, tau], exactly, as a sum over step segments."""
    if not tau > 0:
        raise CurveError("tau must be positive")
    keep = curve.times < tau
    edges = np.concatenate(([0.0], curve.times[keep], [tau]))
    vals = np.concatenate(([1.0], curve.values[keep]))
    return float(np.sum(vals * np.diff(edges)))


@dataclass(frozen=True)
class KmDiagnostics:
    frozen_at: float | None = None


def modified_km(
    observations: Sequence[tuple[OutcomeCurve, float]],
    *,
    return_diagnostics: bool = False,
):
    """Product-limit estimator over curve-valued outcomes.

    At each pooled decrement point s the factor is max(0, 1 - d(s)/Y(s)) with
    fractional deaths d(s) = sum_i w_i delta_i (-dS_i(s)) and fractional
    at-risk mass Y(s) = sum_i w_i S_i(s-). Reduces to the classical
    Kaplan-Meier when all outcomes are indicator curves.

    Parameters
    ----------
    observations : sequence of (OutcomeCurve, weight)
        Weights must be >= 0 with at least one positive.
    return_diagnostics : bool
        Also return a KmDiagnostics (records at-risk exhaustion).
    """
    if not observations:
        raise CurveError("modified_km requires at least one observation")
    weights = np.array([w for _, w in observations], dtype=float)
    if np.any(weights < 0):
        raise CurveError("weights must be nonnegative")
    if not np.any(weights > 0):
        raise CurveError("modified_km requires at least one positive weight")

    times_parts, drop_parts, death_parts = [], [], []
    for (oc, w) in observations:
        t, m = oc.curve.drops()
        times_parts.append(t)
        drop_parts.append(w * m)
        death_parts.append(w * m * oc.delta)
    all_t = np.concatenate(times_parts)
    grid = np.unique(all_t)
    drop_tot = np.zeros(grid.size)
    death_tot = np.zeros(grid.size)
    pos = np.searchsorted(grid, all_t)
    np.add.at(drop_tot, pos, np.concatenate(drop_parts))
    np.add.at(death_tot, pos, np.concatenate(death_parts))

    total_w = float(weights.sum())
    atrisk = total_w - np.concatenate(([0.0], np.cumsum(drop_tot)[:-1]))
    curve, frozen_at = _product_limit(grid, death_tot, atrisk)
    if return_diagnostics:
        return curve, KmDiagnostics(frozen_at=frozen_at)
    return curve


def _product_limit(grid, deaths, atrisk):
    """Shared product-limit core: factors 1 - d/Y with freezing on exhausted Y."""
    frozen_at = None
    factors = np.ones(grid.size)
    live = atrisk > ATRISK_FLOOR
    factors[live] = np.maximum(0.0, 1.0 - deaths[live] / atrisk[live])
    dead = ~live & (deaths > 0)
    if np.any(dead):
        frozen_at = float(grid[np.argmax(dead)])
        factors[grid >= frozen_at] = 1.0
    jump = (factors < 1.0) & (deaths > 0)
    surv = np.cumprod(factors)[jump]
    return StepSurvivalCurve(grid[jump], surv), frozen_at


def psi_residual(
    curve: StepSurvivalCurve,
    observations: Sequence[tuple[OutcomeCurve, float]],
    t: float,
    tau: float | None = None,
) -> float:
    """Weighted mean of the estimating function at time t.

    Each row contributes delta_i * S_i(t) + (1 - delta_i) *
    min(S(t)/S(X_i), 1) - S(t); for the curve fitted by modified_km on the
    same rows this averages to zero at every t.
    """
    if t < 0 or (tau is not None and t > tau):
        raise CurveError("t must lie in [0, tau]")
    s_t = curve.at(t)
    num = 0.0
    wsum = 0.0
    for (oc, w) in observations:
        if w == 0.0:
            continue
        if oc.delta == 1:
            contrib = oc.curve.at(t)
        else:
            s_x = curve.at(oc.time)
            contrib = 1.0 if s_x <= 0 else min(s_t / s_x, 1.0)
        num += w * (contrib - s_t)
        wsum += w
    return num / wsum


def shift_augment(
    next_curve: StepSurvivalCurve,
    visit_length: float,
    horizon: float | None = None,
) -> OutcomeCurve:
    """Carry an optimized next-visit curve back over an observed visit.

    The result is 1 for t <= visit_length and next_curve(t - visit_length)
    beyond it, optionally truncated at `horizon` (mass held at the last
    value). Used for advancement rows, so delta = 1.
    """
    if not visit_length > 0:
        raise CurveError("visit length must be positive")
    t, m = next_curve.drops()
    shifted = StepSurvivalCurve(visit_length + t, 1.0 - np.cumsum(m))
    if horizon is not None:
        shifted = shifted.truncated(horizon)
    return OutcomeCurve(shifted, OutcomeKind.AUGMENTED, 1, visit_length)


def average_curves(curves: Iterable[StepSurvivalCurve]) -> StepSurvivalCurve:
    """Pointwise arithmetic mean of step curves on their merged jump grid."""
    curves = list(curves)
    if not curves:
        raise CurveError("average_curves requires at least one curve")
    grid = np.unique(np.concatenate([c.times for c in curves])) if any(
        c.times.size for c in curves
    ) else np.empty(0)
    if not grid.size:
        return StepSurvivalCurve.unit()
    vals = np.mean([c.at(grid) for c in curves], axis=0)
    return StepSurvivalCurve(grid, vals).compact()
