"""Strata-aware backward recursion: pooled initialization, per-visit policy
prediction with stochastic augmentation, forest refitting, and cross-strata
carry-back, ending in a single deployable policy.

Strata partition cumulative time from baseline; index 1 is the latest
interval and W the earliest. Later strata are fitted and frozen before
earlier strata start, so an earlier stratum can carry back optimized
curves from visits that fall beyond its own boundary.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .curves import OutcomeCurve, StepSurvivalCurve, shift_augment
from .forest import ForestHyperparams, ForestModel, fit_forest

__all__ = [
    "EngineError",
    "SequencingError",
    "FeatureRegistry",
    "VisitRecord",
    "Trajectory",
    "StrataPlan",
    "IterationLogEntry",
    "DtrEstimate",
    "assign_strata",
    "choose_cutpoint",
    "pool_stratum",
    "backward_sweep",
    "fit_dtr",
    "apply_policy",
]


class EngineError(ValueError):
    """Raised on invalid trajectories, plans, or configurations."""


class SequencingError(RuntimeError):
    """Raised when strata are processed out of their required order."""


@dataclass(frozen=True)
class FeatureRegistry:
    """Names and layout of the history vector plus the action feature.

    `cumulative_time_feature` names the history column holding B_k; the
    engine reads it to derive the active horizon tau - B at prediction
    time.
    """

    history_names: tuple[str, ...]
    action_name: str = "action"
    action_values: tuple[float, ...] = (0.0, 1.0)
    cumulative_time_feature: str = "b_cum"

    def __post_init__(self):
        if self.cumulative_time_feature not in self.history_names:
            raise EngineError(
                f"registry must include the cumulative-time feature "
                f"{self.cumulative_time_feature!r}"
            )

    @property
    def feature_names(self) -> list[str]:
        return list(self.history_names) + [self.action_name]

    @property
    def b_index(self) -> int:
        return self.history_names.index(self.cumulative_time_feature)

    @property
    def dim(self) -> int:
        return len(self.history_names)


@dataclass(frozen=True)
class VisitRecord:
    """One patient-visit observation."""

    patient_id: str
    k: int
    history: np.ndarray
    action: float
    x: float
    delta: int
    gamma: int
    b: float

    def __post_init__(self):
        object.__setattr__(self, "history", np.asarray(self.history, dtype=float))
        if self.k < 1:
            raise EngineError(f"visit index must be >= 1, got {self.k}")
        if not self.x > 0:
            raise EngineError(f"visit length must be positive, got {self.x}")
        if self.delta not in (0, 1) or self.gamma not in (0, 1):
            raise EngineError("delta and gamma must be 0/1")
        if self.gamma == 1 and self.delta == 0:
            raise EngineError("a failure cannot be censored in the same record")


@dataclass(frozen=True)
class Trajectory:
    patient_id: str
    visits: tuple[VisitRecord, ...]

    def __post_init__(self):
        v = self.visits
        if not v:
            raise EngineError(f"patient {self.patient_id}: empty trajectory")
        b = 0.0
        for i, rec in enumerate(v):
            if rec.k != i + 1:
                raise EngineError(
                    f"patient {self.patient_id}: visit indices must be contiguous from 1"
                )
            if abs(rec.b - b) > 1e-9 * max(1.0, b):
                raise EngineError(
                    f"patient {self.patient_id} visit {rec.k}: B_k {rec.b} does not "
                    f"telescope (expected {b})"
                )
            final = i == len(v) - 1
            if final:
                if rec.delta == 1 and rec.gamma == 0:
                    raise EngineError(
                        f"patient {self.patient_id}: final record must be a failure "
                        f"or censored, not an advancement"
                    )
            else:
                if not (rec.delta == 1 and rec.gamma == 0):
                    raise EngineError(
                        f"patient {self.patient_id} visit {rec.k}: non-final records "
                        f"must be advancements (delta=1, gamma=0)"
                    )
            b += rec.x
        object.__setattr__(self, "visits", tuple(v))

    @property
    def n_visits(self) -> int:
        return len(self.visits)

    @property
    def total_time(self) -> float:
        return float(sum(r.x for r in self.visits))

    @property
    def failed(self) -> bool:
        last = self.visits[-1]
        return last.delta == 1 and last.gamma == 1


def validate_trajectories(trajectories: Sequence[Trajectory], tau: float, k_max: int | None):
    for tr in trajectories:
        if k_max is not None and tr.n_visits > k_max:
            raise EngineError(
                f"patient {tr.patient_id}: {tr.n_visits} visits exceed the configured "
                f"cap {k_max}; trajectories are rejected, not truncated"
            )
        if tr.total_time > tau * (1 + 1e-9):
            raise EngineError(
                f"patient {tr.patient_id}: cumulative time {tr.total_time} exceeds tau {tau}"
            )


@dataclass(frozen=True)
class StrataPlan:
    """Partition of [0, tau] by cumulative time; stratum 1 is the latest
    interval. A visit belongs to the stratum containing its B_k."""

    tau: float
    cutpoints: tuple[float, ...] = ()

    def __post_init__(self):
        cps = tuple(sorted(float(c) for c in self.cutpoints))
        for c in cps:
            if not 0.0 < c < self.tau:
                raise EngineError(f"cutpoint {c} outside (0, tau)")
        if len(set(cps)) != len(cps):
            raise EngineError("cutpoints must be distinct")
        object.__setattr__(self, "cutpoints", cps)

    @property
    def n_strata(self) -> int:
        return len(self.cutpoints) + 1

    def stratum_of(self, b: float) -> int:
        """1 = latest interval, n_strata = earliest."""
        edges = np.asarray(self.cutpoints)
        interval = int(np.searchsorted(edges, b, side="right"))  # 0 = earliest
        return self.n_strata - interval

    def max_visits_per_stratum(self, trajectories: Sequence[Trajectory]) -> dict[int, int]:
        """M_l: the maximum number of visits any one patient has in stratum l."""
        out = {l: 0 for l in range(1, self.n_strata + 1)}
        for tr in trajectories:
            counts: dict[int, int] = {}
            for rec in tr.visits:
                l = self.stratum_of(rec.b)
                counts[l] = counts.get(l, 0) + 1
            for l, c in counts.items():
                out[l] = max(out[l], c)
        return out


def assign_strata(
    trajectories: Sequence[Trajectory],
    cutpoints: Sequence[float],
    tau: float,
) -> tuple[StrataPlan, dict[tuple[str, int], int]]:
    """Label every visit with its stratum; single-stratum when no cutpoints."""
    plan = StrataPlan(tau=tau, cutpoints=tuple(cutpoints))
    labels = {
        (tr.patient_id, rec.k): plan.stratum_of(rec.b)
        for tr in trajectories
        for rec in tr.visits
    }
    return plan, labels


def choose_cutpoint(
    trajectories: Sequence[Trajectory],
    tau: float,
    min_event_share: float = 0.30,
    grid_size: int = 100,
) -> float | None:
    """Data-driven two-strata cutpoint.

    Takes the latest grid cutpoint for which the later stratum still holds
    at least `min_event_share` of all failure events (counted at their
    cumulative event times), provided both resulting strata contain at
    least one failure by visit membership. Returns None (single-stratum
    fallback) when unattainable.
    """
    event_times = np.array(
        [tr.total_time for tr in trajectories if tr.failed], dtype=float
    )
    event_b = np.array(
        [tr.visits[-1].b for tr in trajectories if tr.failed], dtype=float
    )
    if event_times.size == 0:
        raise EngineError("choose_cutpoint requires at least one failure event")
    grid = np.linspace(0.0, tau, grid_size + 1)[1:-1]
    if min_event_share <= 0.0:
        return float(grid[0])
    share_later = np.array([(event_times >= c).mean() for c in grid])
    ok = share_later >= min_event_share
    # Both strata must be fittable: failures on each side by B_k membership.
    fittable = np.array(
        [(event_b >= c).any() and (event_b < c).any() for c in grid]
    )
    qualifying = np.nonzero(ok & fittable)[0]
    if qualifying.size == 0:
        return None
    return float(grid[qualifying[-1]])


# ---------------------------------------------------------------------------
# Pooling and sweeps.


@dataclass
class _Row:
    record: VisitRecord
    next_record: VisitRecord | None
    outcome: OutcomeCurve


def pool_stratum(
    trajectories: Sequence[Trajectory],
    labels: dict[tuple[str, int], int],
    stratum: int,
    min_events: float = 1.0,
) -> list[_Row]:
    """One training row per visit record in the stratum.

    Failure rows and advancement rows enter as events at the observed
    visit endpoint; censored rows as censored indicators. Augmentation
    later replaces only advancement rows' outcomes.
    """
    rows: list[_Row] = []
    n_failures = 0.0
    for tr in trajectories:
        for i, rec in enumerate(tr.visits):
            if labels[(tr.patient_id, rec.k)] != stratum:
                continue
            nxt = tr.visits[i + 1] if i + 1 < len(tr.visits) else None
            if rec.delta == 1:
                outcome = OutcomeCurve.event(rec.x)
                if rec.gamma == 1:
                    n_failures += 1
            else:
                outcome = OutcomeCurve.censored(rec.x)
            rows.append(_Row(rec, nxt, outcome))
    if not rows:
        raise EngineError(f"stratum {stratum} holds no visit records")
    if n_failures < min_events:
        raise EngineError(
            f"stratum {stratum} has {n_failures:.0f} failure events, fewer than the "
            f"required {min_events:.0f}; consider fewer strata"
        )
    return rows


@dataclass
class SweepResult:
    rows: list[_Row]
    n_augmented: int
    visit_order: list[int]
    policy_actions: dict[tuple[str, int], float]
    policy_values: dict[tuple[str, int], float]


def backward_sweep(
    model: ForestModel,
    rows: list[_Row],
    labels: dict[tuple[str, int], int],
    stratum: int,
    frozen_models: dict[int, ForestModel],
    registry: FeatureRegistry,
    tau: float,
) -> SweepResult:
    """One backward pass over the stratum's visits (last to first).

    Every visit row gets one predict-then-argmax under the current model.
    Advancement rows are re-outcomed with the time-shifted optimized curve
    of their successor visit: from this stratum's model when the successor
    is in the same stratum, else from the frozen model of the later
    stratum the successor belongs to.
    """
    by_visit: dict[int, list[int]] = {}
    for i, row in enumerate(rows):
        by_visit.setdefault(row.record.k, []).append(i)
    visit_order = sorted(by_visit, reverse=True)

    # Batched policy pass for all of this stratum's visits under the current
    # model (one predict-then-argmax per visit per sweep).
    H = np.array([row.record.history for row in rows])
    taus = np.maximum(tau - np.array([row.record.b for row in rows]), 1e-9)
    batch_actions, batch_values = model.policy_batch(H, taus)
    actions = {
        (row.record.patient_id, row.record.k): float(batch_actions[i])
        for i, row in enumerate(rows)
    }
    values = {
        (row.record.patient_id, row.record.k): float(batch_values[i])
        for i, row in enumerate(rows)
    }

    # Resolve each advancement row's successor provider.
    adv_idx: list[int] = []
    providers: list[ForestModel] = []
    for i, row in enumerate(rows):
        rec = row.record
        if not (rec.delta == 1 and rec.gamma == 0):
            continue
        nxt = row.next_record
        if nxt is None:
            raise EngineError(
                f"patient {rec.patient_id} visit {rec.k}: advancement row without "
                f"a successor record"
            )
        next_stratum = labels[(nxt.patient_id, nxt.k)]
        if next_stratum == stratum:
            provider = model
        elif next_stratum < stratum:
            if next_stratum not in frozen_models:
                raise SequencingError(
                    f"stratum {stratum} needs stratum {next_stratum}'s final model "
                    f"before it is frozen"
                )
            provider = frozen_models[next_stratum]
        else:
            raise SequencingError(
                f"successor visit of patient {rec.patient_id} k={rec.k} fell in an "
                f"earlier stratum {next_stratum}; ordering violated"
            )
        adv_idx.append(i)
        providers.append(provider)

    # Optimized successor curves, batched per provider model.
    star: dict[int, StepSurvivalCurve] = {}
    max_pts = model.hyper.curve_max_points
    for provider in {id(p): p for p in providers}.values():
        group = [i for i, p in zip(adv_idx, providers) if p is provider]
        Hn = np.array([rows[i].next_record.history for i in group])
        tn = np.maximum(tau - np.array([rows[i].next_record.b for i in group]), 1e-9)
        acts, _ = provider.policy_batch(Hn, tn)
        grid, vals = provider.curve_values_on_grid(Hn, acts)
        for j, i in enumerate(group):
            star[i] = StepSurvivalCurve(grid, vals[j]).compact().coarsened(max_pts)

    # Emit rows in their input order; the backward visit order is recorded
    # in the log (with one fixed model per sweep the order does not change
    # any computed value).
    new_rows: list[_Row] = []
    n_aug = 0
    for i, row in enumerate(rows):
        rec = row.record
        if i in star:
            horizon = max(tau - rec.b, 1e-9)
            outcome = shift_augment(star[i], rec.x, horizon=horizon)
            new_rows.append(_Row(rec, row.next_record, outcome))
            n_aug += 1
        else:
            new_rows.append(_Row(rec, row.next_record, row.outcome))
    return SweepResult(new_rows, n_aug, visit_order, actions, values)


# ---------------------------------------------------------------------------
# The full estimator.


@dataclass(frozen=True)
class IterationLogEntry:
    j: int
    stratum: int
    iteration_in_stratum: int
    kind: str  # "init" or "refit"
    n_rows: int
    n_augmented: int
    visits_covered: tuple[int, ...]


@dataclass
class DtrEstimate:
    final_model: ForestModel
    plan: StrataPlan
    registry: FeatureRegistry
    iteration_log: list[IterationLogEntry]
    m_per_stratum: dict[int, int]
    stratum_models: dict[int, ForestModel] = field(default_factory=dict)
    intermediate_models: list[tuple[int, int, ForestModel]] = field(default_factory=list)

    @property
    def total_iterations(self) -> int:
        return len(self.iteration_log)

    def policy(self, h: np.ndarray) -> float:
        return apply_policy(self, h)

    def policy_batch(self, H: np.ndarray) -> np.ndarray:
        H = np.atleast_2d(np.asarray(H, dtype=float))
        taus = np.maximum(self.plan.tau - H[:, self.registry.b_index], 1e-9)
        actions, _ = self.final_model.policy_batch(H, taus)
        return actions

    def to_json_dict(self) -> dict:
        return {
            "format": "grsf-dtr/1",
            "tau": self.plan.tau,
            "cutpoints": list(self.plan.cutpoints),
            "registry": {
                "history_names": list(self.registry.history_names),
                "action_name": self.registry.action_name,
                "action_values": list(self.registry.action_values),
                "cumulative_time_feature": self.registry.cumulative_time_feature,
            },
            "m_per_stratum": {str(k): v for k, v in self.m_per_stratum.items()},
            "iteration_log": [
                {
                    "j": e.j,
                    "stratum": e.stratum,
                    "iteration_in_stratum": e.iteration_in_stratum,
                    "kind": e.kind,
                    "n_rows": e.n_rows,
                    "n_augmented": e.n_augmented,
                    "visits_covered": list(e.visits_covered),
                }
                for e in self.iteration_log
            ],
            "final_model": self.final_model.to_json_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @staticmethod
    def from_json_dict(obj: dict) -> "DtrEstimate":
        if obj.get("format") != "grsf-dtr/1":
            raise EngineError(f"unsupported estimate format {obj.get('format')!r}")
        reg = FeatureRegistry(
            history_names=tuple(obj["registry"]["history_names"]),
            action_name=obj["registry"]["action_name"],
            action_values=tuple(obj["registry"]["action_values"]),
            cumulative_time_feature=obj["registry"]["cumulative_time_feature"],
        )
        return DtrEstimate(
            final_model=ForestModel.from_json_dict(obj["final_model"]),
            plan=StrataPlan(tau=obj["tau"], cutpoints=tuple(obj["cutpoints"])),
            registry=reg,
            iteration_log=[
                IterationLogEntry(
                    j=e["j"],
                    stratum=e["stratum"],
                    iteration_in_stratum=e["iteration_in_stratum"],
                    kind=e["kind"],
                    n_rows=e["n_rows"],
                    n_augmented=e["n_augmented"],
                    visits_covered=tuple(e["visits_covered"]),
                )
                for e in obj["iteration_log"]
            ],
            m_per_stratum={int(k): v for k, v in obj["m_per_stratum"].items()},
        )

    @staticmethod
    def from_json(s: str) -> "DtrEstimate":
        return DtrEstimate.from_json_dict(json.loads(s))


def _rows_to_arrays(rows: list[_Row]):
    X = np.array([np.concatenate([r.record.history, [r.record.action]]) for r in rows])
    outcomes = [r.outcome for r in rows]
    return X, outcomes


def fit_dtr(
    trajectories: Sequence[Trajectory],
    plan: StrataPlan,
    registry: FeatureRegistry,
    hyper: ForestHyperparams,
    *,
    k_max: int | None = None,
    keep_intermediate: bool = False,
) -> DtrEstimate:
    """Run the full backward-recursive estimator over all strata.

    Strata are processed latest-first (l = 1..W); each runs one pooled
    initialization fit followed by sweep+refit rounds until it has
    executed M_l fitting iterations, for a total of sum_l M_l. The final
    deployed policy is the earliest stratum's last model.
    """
    validate_trajectories(trajectories, plan.tau, k_max)
    _, labels = assign_strata(trajectories, plan.cutpoints, plan.tau)
    m_l = plan.max_visits_per_stratum(trajectories)

    log: list[IterationLogEntry] = []
    frozen: dict[int, ForestModel] = {}
    intermediates: list[tuple[int, int, ForestModel]] = []
    j_global = 0
    model = None
    for stratum in range(1, plan.n_strata + 1):
        if m_l.get(stratum, 0) == 0:
            raise EngineError(
                f"stratum {stratum} contains no visits; adjust the cutpoints"
            )
        rows = pool_stratum(trajectories, labels, stratum, min_events=hyper.min_events)
        it_seeds = np.random.SeedSequence((hyper.seed, stratum)).spawn(m_l[stratum])

        for it in range(1, m_l[stratum] + 1):
            if it == 1:
                fit_rows = rows
                n_aug = 0
                visits = tuple(sorted({r.record.k for r in rows}, reverse=True))
            else:
                sweep = backward_sweep(
                    model, rows, labels, stratum, frozen, registry, plan.tau
                )
                fit_rows = sweep.rows
                rows = sweep.rows
                n_aug = sweep.n_augmented
                visits = tuple(sweep.visit_order)
            X, outcomes = _rows_to_arrays(fit_rows)
            it_seed = int(it_seeds[it - 1].generate_state(1)[0])
            hp = ForestHyperparams(**{**_hyper_dict(hyper), "seed": it_seed})
            model = fit_forest(
                X,
                outcomes,
                hp,
                feature_names=registry.feature_names,
                action_values=list(registry.action_values),
            )
            j_global += 1
            log.append(
                IterationLogEntry(
                    j=j_global,
                    stratum=stratum,
                    iteration_in_stratum=it,
                    kind="init" if it == 1 else "refit",
                    n_rows=len(fit_rows),
                    n_augmented=n_aug,
                    visits_covered=visits,
                )
            )
            if keep_intermediate:
                intermediates.append((stratum, it, model))
        frozen[stratum] = model

    expected = sum(m_l.values())
    if j_global != expected:
        raise SequencingError(
            f"executed {j_global} iterations, expected sum of per-stratum maxima {expected}"
        )
    return DtrEstimate(
        final_model=frozen[plan.n_strata],
        plan=plan,
        registry=registry,
        iteration_log=log,
        m_per_stratum=m_l,
        stratum_models=frozen,
        intermediate_models=intermediates,
    )


def _hyper_dict(h: ForestHyperparams) -> dict:
    from dataclasses import asdict

    return asdict(h)


def apply_policy(estimate: DtrEstimate, h: np.ndarray) -> float:
    """The single deployed decision rule: criterion argmax on the final
    model at the history's remaining horizon tau - B."""
    h = np.asarray(h, dtype=float)
    if h.shape != (estimate.registry.dim,):
        raise EngineError(
            f"history dimension {h.shape} does not match registry ({estimate.registry.dim})"
        )
    tau_active = max(estimate.plan.tau - h[estimate.registry.b_index], 1e-9)
    action, _ = estimate.final_model.policy_argmax(h, tau_active)
    return action
