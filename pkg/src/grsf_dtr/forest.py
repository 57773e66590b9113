"""Generalized random survival forest over curve-valued outcomes.

Trees split on a log-rank statistic generalized to fractional deaths and
fractional at-risk mass, so indicator outcomes (classical right-censored
rows) and augmented curve outcomes share one code path. Growth enforces
alpha-regularity and terminal-node floors, and every tree is reproducible
from (master seed, tree index).
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .curves import (
    OutcomeCurve,
    StepSurvivalCurve,
    _product_limit,
    average_curves,
)

__all__ = [
    "ForestFitError",
    "ForestHyperparams",
    "SurvivalTree",
    "ForestModel",
    "logrank_split_score",
    "grow_tree",
    "fit_forest",
]


class ForestFitError(RuntimeError):
    """Raised when a forest cannot be fit from the given rows."""


@dataclass(frozen=True)
class ForestHyperparams:
    """Tree and ensemble controls.

    `split_rand` is the random-split constant: with that probability the
    split variable at a node is drawn uniformly over the features, which
    guarantees each feature a split probability of at least split_rand / d.
    `grid_max_points` caps the pooled decrement grid one fit works on;
    decrement times beyond that are snapped to mass-weighted quantiles.
    """

    n_trees: int = 100
    n_min: int = 5
    min_events: float = 2.0
    alpha: float = 0.1
    split_rand: float = 0.2
    mtry: int | None = None
    subsample: float = 0.632
    seed: int = 0
    grid_max_points: int = 512
    max_cut_candidates: int = 32
    curve_max_points: int = 64
    allow_action_split: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0 < self.alpha <= 0.5:
            raise ValueError("alpha must lie in (0, 0.5]")
        if not 0 < self.split_rand < 1:
            raise ValueError("split_rand must lie in (0, 1)")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")


# ---------------------------------------------------------------------------
# Compiled training data: outcomes as sparse decrement masses on a shared grid.


class _CompiledData:
    def __init__(self, X, outcomes, weights, grid_max_points):
        self.X = np.ascontiguousarray(X, dtype=float)
        n = self.X.shape[0]
        if weights is None:
            weights = np.ones(n)
        self.w = np.asarray(weights, dtype=float)
        self.delta = np.array([oc.delta for oc in outcomes], dtype=float)

        times_parts, mass_parts, row_parts = [], [], []
        for i, oc in enumerate(outcomes):
            t, m = oc.curve.drops()
            times_parts.append(t)
            mass_parts.append(m)
            row_parts.append(np.full(t.size, i, dtype=np.int64))
        all_t = np.concatenate(times_parts) if times_parts else np.empty(0)
        all_m = np.concatenate(mass_parts) if mass_parts else np.empty(0)
        all_r = np.concatenate(row_parts) if row_parts else np.empty(0, dtype=np.int64)

        uniq = np.unique(all_t)
        if uniq.size > grid_max_points:
            # Mass-weighted quantiles of the pooled decrement times.
            order = np.argsort(all_t, kind="stable")
            ts, ms = all_t[order], all_m[order]
            cum = np.cumsum(ms)
            targets = np.linspace(0, cum[-1], grid_max_points + 1)[1:]
            pick = np.searchsorted(cum, targets, side="left").clip(0, ts.size - 1)
            self.grid = np.unique(ts[pick])
        else:
            self.grid = uniq

        if all_t.size:
            # Snap every decrement to the nearest grid time.
            hi = np.searchsorted(self.grid, all_t).clip(0, self.grid.size - 1)
            lo = np.maximum(hi - 1, 0)
            col = np.where(
                np.abs(self.grid[lo] - all_t) <= np.abs(self.grid[hi] - all_t), lo, hi
            )
            # Merge duplicates within a row, build CSR.
            key = all_r * self.grid.size + col
            order = np.argsort(key, kind="stable")
            key_s, mass_s = key[order], all_m[order]
            boundary = np.concatenate(([True], key_s[1:] != key_s[:-1]))
            uniq_key = key_s[boundary]
            seg = np.cumsum(boundary) - 1
            merged = np.bincount(seg, weights=mass_s)
            rows_u = (uniq_key // self.grid.size).astype(np.int64)
            self.col = (uniq_key % self.grid.size).astype(np.int64)
            self.drop = merged
            self.row_ptr = np.cumsum(
                np.bincount(rows_u + 1, minlength=n + 1).astype(np.int64)
            )
            per_row_total = np.bincount(rows_u, weights=merged, minlength=n)
        else:
            self.col = np.empty(0, dtype=np.int64)
            self.drop = np.empty(0)
            self.row_ptr = np.zeros(n + 1, dtype=np.int64)
            per_row_total = np.zeros(n)
        self.event_mass = self.delta * per_row_total

    def entries(self, rows):
        """Flat CSR entry indices for the given row subset, plus local row ids."""
        counts = self.row_ptr[rows + 1] - self.row_ptr[rows]
        total = int(counts.sum())
        if total == 0:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        idx = np.repeat(self.row_ptr[rows] - np.cumsum(counts) + counts, counts) + np.arange(total)
        local = np.repeat(np.arange(rows.size), counts)
        return idx, local


# ---------------------------------------------------------------------------
# Split scoring.


def _logrank_from_tables(death_left, atrisk_left, death_tot, atrisk_tot):
    """Squared standardized log-rank score from per-decrement-point tables.

    Arrays are aligned on the decrement points with positive total deaths.
    Variance terms with total at-risk <= 1 are skipped; a zero variance
    yields a zero score.
    """
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(atrisk_tot > 0, atrisk_left / atrisk_tot, 0.0)
        num = np.sum(death_left - frac * death_tot, axis=-1)
        ok = atrisk_tot > 1.0
        var_terms = np.where(
            ok,
            death_tot * frac * (1.0 - frac) * (atrisk_tot - death_tot) / np.where(ok, atrisk_tot - 1.0, 1.0),
            0.0,
        )
        var = np.sum(var_terms, axis=-1)
    score = np.where(var > 0, num * num / np.where(var > 0, var, 1.0), 0.0)
    return score


def logrank_split_score(
    rows: Sequence[tuple[np.ndarray, OutcomeCurve, float]],
    feature: int,
    cut: float,
) -> float:
    """Score one candidate split on raw rows (exact pooled decrement grid).

    Rows with feature value <= cut form the left child. This is the
    reference implementation; tree growth uses an equivalent vectorized
    path over a compiled grid.
    """
    feats = np.array([r[0][feature] for r in rows], dtype=float)
    left = feats <= cut
    times, masses, deaths, lefts = [], [], [], []
    for (_, oc, w), is_left in zip(rows, left):
        t, m = oc.curve.drops()
        times.append(t)
        masses.append(w * m)
        deaths.append(w * m * oc.delta)
        lefts.append(np.full(t.size, is_left))
    all_t = np.concatenate(times)
    grid = np.unique(all_t)
    pos = np.searchsorted(grid, all_t)
    drop_tot = np.zeros(grid.size)
    death_tot = np.zeros(grid.size)
    drop_l = np.zeros(grid.size)
    death_l = np.zeros(grid.size)
    all_m = np.concatenate(masses)
    all_d = np.concatenate(deaths)
    all_left = np.concatenate(lefts)
    np.add.at(drop_tot, pos, all_m)
    np.add.at(death_tot, pos, all_d)
    np.add.at(drop_l, pos[all_left], all_m[all_left])
    np.add.at(death_l, pos[all_left], all_d[all_left])
    w_all = sum(r[2] for r in rows)
    w_left = sum(r[2] for r, il in zip(rows, left) if il)
    atrisk_tot = w_all - np.concatenate(([0.0], np.cumsum(drop_tot)[:-1]))
    atrisk_l = w_left - np.concatenate(([0.0], np.cumsum(drop_l)[:-1]))
    dmask = death_tot > 0
    return float(
        _logrank_from_tables(death_l[dmask], atrisk_l[dmask], death_tot[dmask], atrisk_tot[dmask])
    )


# ---------------------------------------------------------------------------
# Tree growth.


class SurvivalTree:
    """Flat-array binary tree. Internal nodes hold (feature, cut); terminals
    hold a product-limit curve plus member count and event mass."""

    def __init__(self):
        self.feature: list[int] = []
        self.cut: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.leaf_id: list[int] = []
        self.leaf_times: list[np.ndarray] = []
        self.leaf_values: list[np.ndarray] = []
        self.leaf_n: list[int] = []
        self.leaf_event_mass: list[float] = []

    def _add_internal(self, feature, cut):
        self.feature.append(feature)
        self.cut.append(cut)
        self.left.append(-1)
        self.right.append(-1)
        self.leaf_id.append(-1)
        return len(self.feature) - 1

    def _add_leaf(self, curve: StepSurvivalCurve, n: int, event_mass: float):
        self.feature.append(-1)
        self.cut.append(np.nan)
        self.left.append(-1)
        self.right.append(-1)
        self.leaf_id.append(len(self.leaf_times))
        self.leaf_times.append(curve.times)
        self.leaf_values.append(curve.values)
        self.leaf_n.append(n)
        self.leaf_event_mass.append(event_mass)
        return len(self.feature) - 1

    def seal(self):
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.cut = np.asarray(self.cut, dtype=float)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.leaf_id = np.asarray(self.leaf_id, dtype=np.int64)
        # Per-leaf cumulative integral knots, for batched restricted means.
        self._edges = [np.concatenate(([0.0], t)) for t in self.leaf_times]
        self._vals = [np.concatenate(([1.0], v)) for v in self.leaf_values]
        self._cumint = [
            np.concatenate(([0.0], np.cumsum(v[:-1] * np.diff(e))))
            for e, v in zip(self._edges, self._vals)
        ]
        return self

    def route(self, X: np.ndarray) -> np.ndarray:
        """Leaf id for every row of X."""
        n = X.shape[0]
        node = np.zeros(n, dtype=np.int64)
        out = np.full(n, -1, dtype=np.int64)
        active = np.arange(n)
        while active.size:
            nd = node[active]
            is_leaf = self.leaf_id[nd] >= 0
            if np.any(is_leaf):
                done = active[is_leaf]
                out[done] = self.leaf_id[node[done]]
                active = active[~is_leaf]
                nd = node[active]
            if not active.size:
                break
            go_left = X[active, self.feature[nd]] <= self.cut[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
        return out

    def leaf_curve(self, leaf: int) -> StepSurvivalCurve:
        return StepSurvivalCurve(self.leaf_times[leaf], self.leaf_values[leaf])

    def leaf_rmst(self, leaves: np.ndarray, taus: np.ndarray) -> np.ndarray:
        """Restricted mean of each row's leaf curve at that row's horizon."""
        out = np.empty(leaves.size)
        order = np.argsort(leaves, kind="stable")
        sorted_leaves = leaves[order]
        starts = np.concatenate(([0], np.nonzero(np.diff(sorted_leaves))[0] + 1, [leaves.size]))
        for a, b in zip(starts[:-1], starts[1:]):
            lf = int(sorted_leaves[a])
            rows = order[a:b]
            e, v, ci = self._edges[lf], self._vals[lf], self._cumint[lf]
            t = taus[rows]
            cell = np.searchsorted(e, t, side="right") - 1
            out[rows] = ci[cell] + v[cell] * (t - e[cell])
        return out


def _quantile_cuts(vals: np.ndarray, max_cuts: int) -> np.ndarray:
    """Candidate cut values: interior distinct values, thinned to at most
    max_cuts evenly spaced ranks of the in-node empirical distribution."""
    sv = np.sort(vals)
    uniq = np.unique(sv)
    if uniq.size < 2:
        return np.empty(0)
    if uniq.size - 1 <= max_cuts:
        return uniq[:-1]
    pos = (np.arange(1, max_cuts + 1) * sv.size) // (max_cuts + 1)
    cuts = np.unique(sv[pos])
    return cuts[cuts < sv[-1]]


class _TreeGrower:
    def __init__(self, data: _CompiledData, hyper: ForestHyperparams, rng: np.random.Generator):
        self.d = data
        self.h = hyper
        self.rng = rng
        d_total = data.X.shape[1]
        self.allowed = np.arange(d_total)
        if not hyper.allow_action_split:
            self.allowed = self.allowed[:-1]  # action is the trailing feature
        self.mtry = hyper.mtry or math.ceil(math.sqrt(self.allowed.size))
        self.mtry = min(self.mtry, self.allowed.size)
        self.use_kernels = _kernels.HAVE_NUMBA

    def grow(self, rows: np.ndarray) -> SurvivalTree:
        tree = SurvivalTree()
        self._grow_node(tree, rows)
        return tree.seal()

    # Recursive growth; depth is bounded by alpha-regularity.
    def _grow_node(self, tree: SurvivalTree, rows: np.ndarray) -> int:
        d = self.d
        n_node = rows.size
        events = float(d.event_mass[rows].sum())
        if n_node < 2 * self.h.n_min or events < 2 * self.h.min_events:
            return self._leaf(tree, rows, n_node, events)
        node = self._node_tables(rows)
        if self.rng.random() < self.h.split_rand:
            f0 = int(self.allowed[self.rng.integers(self.allowed.size)])
            best = self._best_split(rows, node, [f0])
            if best is None:
                rest = [int(f) for f in self.allowed if f != f0]
                best = self._best_split(rows, node, rest)
        else:
            sub = self.rng.choice(self.allowed, size=self.mtry, replace=False)
            best = self._best_split(rows, node, [int(f) for f in sub])
            if best is None:
                rest = [int(f) for f in self.allowed if f not in set(int(x) for x in sub)]
                best = self._best_split(rows, node, rest)
        if best is None:
            return self._leaf(tree, rows, n_node, events)
        feature, cut = best
        go_left = d.X[rows, feature] <= cut
        idx = tree._add_internal(feature, cut)
        left_id = self._grow_node(tree, rows[go_left])
        right_id = self._grow_node(tree, rows[~go_left])
        tree.left[idx] = left_id
        tree.right[idx] = right_id
        return idx

    def _leaf(self, tree, rows, n_node, events):
        tables = self._node_tables(rows)
        support, drop_vec, death_vec = tables[:3]
        w_node = float(self.d.w[rows].sum())
        atrisk = w_node - np.concatenate(([0.0], np.cumsum(drop_vec)[:-1]))
        curve, _ = _product_limit(self.d.grid[support], death_vec, atrisk)
        return tree._add_leaf(curve, int(n_node), events)

    def _node_tables(self, rows):
        """Pooled decrement tables of a node on its local grid support."""
        if self.use_kernels:
            support, drop_vec, death_vec, ent_row, ent_col, ent_drop, ent_death = (
                _kernels.node_tables(
                    rows, self.d.row_ptr, self.d.col, self.d.drop, self.d.delta, self.d.w
                )
            )
            return support, drop_vec, death_vec, ent_row, ent_col, ent_drop, ent_death
        idx, local = self.d.entries(rows)
        cols = self.d.col[idx]
        support = np.unique(cols)
        loc = np.searchsorted(support, cols)
        wmass = self.d.drop[idx] * self.d.w[rows][local]
        dmass = wmass * self.d.delta[rows][local]
        drop_vec = np.bincount(loc, weights=wmass, minlength=support.size)
        death_vec = np.bincount(loc, weights=dmass, minlength=support.size)
        return support, drop_vec, death_vec, local, loc, wmass, dmass

    def _best_split(self, rows, node_tables, features):
        if not features:
            return None
        support, drop_vec, death_vec, local, loc, wmass, dmass = node_tables
        d = self.d
        n_node = rows.size
        lo = max(self.h.n_min, int(math.ceil(self.h.alpha * n_node)))
        if self.use_kernels:
            Xcand = np.ascontiguousarray(d.X[rows][:, features])
            fi, cut, score = _kernels.best_split(
                Xcand,
                d.w[rows],
                d.event_mass[rows],
                local,
                loc,
                wmass,
                dmass,
                drop_vec,
                death_vec,
                lo,
                float(self.h.min_events),
                self.h.max_cut_candidates,
            )
            if fi < 0:
                return None
            return features[fi], float(cut)
        w_rows = d.w[rows]
        ev_rows = d.event_mass[rows]
        w_node = float(w_rows.sum())
        atrisk_tot = w_node - np.concatenate(([0.0], np.cumsum(drop_vec)[:-1]))
        dmask = death_vec > 0
        death_tot = death_vec[dmask]
        atrisk_tot_d = atrisk_tot[dmask]
        total_events = float(ev_rows.sum())

        best_score = -np.inf
        best = None
        for f in features:
            vals = d.X[rows, f]
            cuts = _quantile_cuts(vals, self.h.max_cut_candidates)
            if not cuts.size:
                continue
            order = np.argsort(vals, kind="stable")
            sv = vals[order]
            rank = np.empty(n_node, dtype=np.int64)
            rank[order] = np.arange(n_node)
            left_counts = np.searchsorted(sv, cuts, side="right")
            # Feasibility on row counts and event mass.
            n_left = left_counts
            n_right = n_node - n_left
            bucket_of_row = np.searchsorted(left_counts, rank, side="right")
            n_buckets = cuts.size + 1
            ev_left = np.cumsum(
                np.bincount(bucket_of_row, weights=ev_rows, minlength=n_buckets)
            )[:-1]
            w_left = np.cumsum(
                np.bincount(bucket_of_row, weights=w_rows, minlength=n_buckets)
            )[:-1]
            feasible = (
                (n_left >= lo)
                & (n_right >= lo)
                & (ev_left >= self.h.min_events)
                & ((total_events - ev_left) >= self.h.min_events)
            )
            if not np.any(feasible):
                continue
            # Per-bucket decrement tables on the node support.
            m = support.size
            flat = bucket_of_row[local] * m + loc
            drop_b = np.bincount(flat, weights=wmass, minlength=n_buckets * m).reshape(
                n_buckets, m
            )
            death_b = np.bincount(flat, weights=dmass, minlength=n_buckets * m).reshape(
                n_buckets, m
            )
            drop_left = np.cumsum(drop_b, axis=0)[:-1]
            death_left = np.cumsum(death_b, axis=0)[:-1]
            atrisk_left = w_left[:, None] - np.concatenate(
                (np.zeros((cuts.size, 1)), np.cumsum(drop_left, axis=1)[:, :-1]), axis=1
            )
            scores = _logrank_from_tables(
                death_left[:, dmask], atrisk_left[:, dmask], death_tot, atrisk_tot_d
            )
            scores = np.where(feasible, scores, -np.inf)
            j = int(np.argmax(scores))
            if scores[j] > best_score:
                best_score = float(scores[j])
                best = (f, float(cuts[j]))
        return best


def grow_tree(
    features: np.ndarray,
    outcomes: Sequence[OutcomeCurve],
    hyper: ForestHyperparams,
    rng: np.random.Generator,
    weights: np.ndarray | None = None,
) -> SurvivalTree:
    """Grow a single tree on all given rows (no subsampling)."""
    data = _CompiledData(features, outcomes, weights, hyper.grid_max_points)
    return _TreeGrower(data, hyper, rng).grow(np.arange(data.X.shape[0]))


# ---------------------------------------------------------------------------
# Forest.


@dataclass
class ForestModel:
    """Fitted ensemble plus the feature registry it was trained against.

    The action enters as the trailing feature column; predictions for
    (history, action) queries compose the full feature vector internally.
    """

    trees: list[SurvivalTree]
    hyper: ForestHyperparams
    feature_names: list[str]
    action_values: list[float]
    seed: int
    grid: np.ndarray = None  # pooled decrement grid the fit worked on

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def compose(self, H: np.ndarray, action: float) -> np.ndarray:
        H = np.atleast_2d(np.asarray(H, dtype=float))
        if H.shape[1] != self.n_features - 1:
            raise ValueError(
                f"history dimension {H.shape[1]} does not match registry ({self.n_features - 1})"
            )
        return np.column_stack([H, np.full(H.shape[0], action)])

    def predict_curve(self, h: np.ndarray, action: float) -> StepSurvivalCurve:
        """Ensemble curve for one (history, action) query: the pointwise
        average of the terminal curves the query routes to."""
        if action not in self.action_values:
            raise ValueError(f"unknown action {action!r}")
        x = self.compose(h, action)
        curves = [t.leaf_curve(int(t.route(x)[0])) for t in self.trees]
        return average_curves(curves)

    def action_rmst(self, H: np.ndarray, taus: np.ndarray) -> np.ndarray:
        """Restricted means for every action, batched: (n_rows, n_actions).

        Linearity of the restricted mean lets the ensemble average be taken
        over per-tree leaf integrals.
        """
        H = np.atleast_2d(H)
        taus = np.asarray(taus, dtype=float)
        out = np.zeros((H.shape[0], len(self.action_values)))
        for ai, a in enumerate(self.action_values):
            x = self.compose(H, a)
            acc = np.zeros(H.shape[0])
            for t in self.trees:
                acc += t.leaf_rmst(t.route(x), taus)
            out[:, ai] = acc / len(self.trees)
        return out

    def policy_argmax(self, h: np.ndarray, tau_active: float) -> tuple[float, float]:
        """Best action for one history at the given horizon; ties go to the
        smallest action index."""
        if not tau_active > 0:
            raise ValueError("tau_active must be positive")
        vals = self.action_rmst(np.atleast_2d(h), np.array([tau_active]))[0]
        j = int(np.argmax(vals))
        return self.action_values[j], float(vals[j])

    def policy_batch(self, H: np.ndarray, taus: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized argmax over actions: returns (actions, criterion values)."""
        vals = self.action_rmst(H, taus)
        j = np.argmax(vals, axis=1)
        actions = np.asarray(self.action_values, dtype=float)[j]
        return actions, vals[np.arange(vals.shape[0]), j]

    def curve_values_on_grid(self, H: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Ensemble curves for many (history, action) rows, evaluated on the
        fit-time decrement grid: returns (grid, (n_rows, grid_size) values)."""
        if self.grid is None:
            grid = np.unique(
                np.concatenate([t for tr in self.trees for t in tr.leaf_times])
            )
        else:
            grid = self.grid
        H = np.atleast_2d(H)
        n = H.shape[0]
        acc = np.zeros((n, grid.size))
        if grid.size == 0:
            return grid, acc
        X = np.column_stack([H, np.asarray(actions, dtype=float)])
        for t in self.trees:
            leaves = t.route(X)
            order = np.argsort(leaves, kind="stable")
            sl = leaves[order]
            starts = np.concatenate(([0], np.nonzero(np.diff(sl))[0] + 1, [n]))
            for a, b in zip(starts[:-1], starts[1:]):
                lf = int(sl[a])
                vals = np.concatenate(([1.0], t.leaf_values[lf]))[
                    np.searchsorted(t.leaf_times[lf], grid, side="right")
                ]
                acc[order[a:b]] += vals
        return grid, acc / len(self.trees)

    # -- serialization ------------------------------------------------------

    def to_json_dict(self) -> dict:
        hyper = asdict(self.hyper)
        hyper.pop("n_jobs")  # execution detail, not part of model identity
        return {
            "format": "grsf-forest/1",
            "hyperparams": hyper,
            "feature_names": list(self.feature_names),
            "action_values": [float(a) for a in self.action_values],
            "seed": self.seed,
            "grid": [] if self.grid is None else self.grid.tolist(),
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "cut": [None if np.isnan(c) else c for c in t.cut.tolist()],
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "leaf_id": t.leaf_id.tolist(),
                    "leaves": [
                        {
                            "times": t.leaf_times[i].tolist(),
                            "values": t.leaf_values[i].tolist(),
                            "n": int(t.leaf_n[i]),
                            "event_mass": float(t.leaf_event_mass[i]),
                        }
                        for i in range(len(t.leaf_times))
                    ],
                }
                for t in self.trees
            ],
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "ForestModel":
        if obj.get("format") != "grsf-forest/1":
            raise ValueError(f"unsupported model format {obj.get('format')!r}")
        trees = []
        for td in obj["trees"]:
            t = SurvivalTree()
            t.feature = list(td["feature"])
            t.cut = [np.nan if c is None else c for c in td["cut"]]
            t.left = list(td["left"])
            t.right = list(td["right"])
            t.leaf_id = list(td["leaf_id"])
            for ld in td["leaves"]:
                t.leaf_times.append(np.asarray(ld["times"], dtype=float))
                t.leaf_values.append(np.asarray(ld["values"], dtype=float))
                t.leaf_n.append(int(ld["n"]))
                t.leaf_event_mass.append(float(ld["event_mass"]))
            trees.append(t.seal())
        return ForestModel(
            trees=trees,
            hyper=ForestHyperparams(**obj["hyperparams"]),
            feature_names=list(obj["feature_names"]),
            action_values=[float(a) for a in obj["action_values"]],
            seed=int(obj["seed"]),
            grid=np.asarray(obj.get("grid", []), dtype=float),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @staticmethod
    def from_json(s: str) -> "ForestModel":
        return ForestModel.from_json_dict(json.loads(s))


def fit_forest(
    features: np.ndarray,
    outcomes: Sequence[OutcomeCurve],
    hyper: ForestHyperparams,
    *,
    feature_names: Sequence[str],
    action_values: Sequence[float],
    weights: np.ndarray | None = None,
) -> ForestModel:
    """Fit an ensemble on independently seeded subsamples without replacement.

    The result is a deterministic function of (data, hyperparams, seed)
    regardless of `n_jobs`.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(outcomes):
        raise ForestFitError("features must be (n_rows, d) matching outcomes")
    if X.shape[0] < 1:
        raise ForestFitError("at least one row is required")
    if len(feature_names) != X.shape[1]:
        raise ForestFitError(
            f"{len(feature_names)} feature names for {X.shape[1]} feature columns"
        )
    data = _CompiledData(X, outcomes, weights, hyper.grid_max_points)
    if not np.any(data.w > 0):
        raise ForestFitError("at least one row must carry positive weight")
    total_events = float(data.event_mass.sum())
    if total_events < hyper.min_events:
        raise ForestFitError(
            f"total event mass {total_events:.3g} is below min_events={hyper.min_events}"
        )

    n = X.shape[0]
    n_sub = max(1, int(round(hyper.subsample * n)))
    seeds = np.random.SeedSequence(hyper.seed).spawn(hyper.n_trees)

    def build(i: int) -> SurvivalTree:
        rng = np.random.default_rng(seeds[i])
        rows = np.sort(rng.choice(n, size=n_sub, replace=False))
        return _TreeGrower(data, hyper, rng).grow(rows)

    if hyper.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=hyper.n_jobs) as pool:
            trees = list(pool.map(build, range(hyper.n_trees)))
    else:
        trees = [build(i) for i in range(hyper.n_trees)]
    return ForestModel(
        trees=trees,
        hyper=hyper,
        feature_names=list(feature_names),
        action_values=[float(a) for a in action_values],
        seed=hyper.seed,
        grid=data.grid,
    )
