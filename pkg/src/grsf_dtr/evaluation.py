"""Policy value estimation: Monte-Carlo ground truth on the simulator,
inverse-probability-of-censoring weighting with fitted (or supplied)
nuisance models, and repeated 80/20 cross-validation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .curves import OutcomeCurve
from .engine import FeatureRegistry, Trajectory
from .forest import ForestHyperparams, ForestModel, fit_forest
from .simlab import SimConfig, _design_matrix, simulate_under_policy, HISTORY_NAMES

__all__ = [
    "EvalReport",
    "mc_value",
    "PropensityModel",
    "fit_propensity",
    "CensoringModel",
    "fit_censoring",
    "TruePropensity",
    "TrueCensoring",
    "ipcw_value",
    "cross_validate",
]

PROB_FLOOR = 0.01


@dataclass
class EvalReport:
    method: str
    value: float | None
    se: float | None = None
    n: int = 0
    per_fold: list[float] = field(default_factory=list)
    n_nonzero_weights: int | None = None
    max_weight_share: float | None = None
    no_match: bool = False
    notes: list[str] = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "value": self.value,
            "se": self.se,
            "n": self.n,
            "per_fold": list(self.per_fold),
            "n_nonzero_weights": self.n_nonzero_weights,
            "max_weight_share": self.max_weight_share,
            "no_match": self.no_match,
            "notes": list(self.notes),
            "config_echo": self.config_echo,
        }


def mc_value(policy, config: SimConfig, n: int = 10_000, seed: int | None = None) -> EvalReport:
    """Monte-Carlo value of a policy: mean truncated survival over a cohort
    simulated with censoring disabled."""
    cfg = SimConfig(**{**_cfg_dict(config), "n_patients": n})
    ds = simulate_under_policy(
        cfg, policy, disable_censoring=True, build_trajectories=False, seed=seed
    )
    vals = np.minimum(ds.total_times, cfg.tau)
    return EvalReport(
        method="MC",
        value=float(vals.mean()),
        se=float(vals.std(ddof=1) / np.sqrt(n)),
        n=n,
        config_echo={"tau": cfg.tau, "seed": cfg.seed if seed is None else seed},
    )


def _cfg_dict(cfg: SimConfig) -> dict:
    from dataclasses import asdict

    return asdict(cfg)


# ---------------------------------------------------------------------------
# Propensity.


def _irls_logistic(X: np.ndarray, y: np.ndarray, max_iter: int = 30, tol: float = 1e-10):
    """Maximum-likelihood logistic regression by iteratively reweighted
    least squares. Returns (coef, converged)."""
    n, p = X.shape
    beta = np.zeros(p)
    for _ in range(max_iter):
        with np.errstate(over="ignore"):
            mu = 1.0 / (1.0 + np.exp(-(X @ beta)))
        w = mu * (1.0 - mu)
        if np.all(w < 1e-12):
            return beta, False
        grad = X.T @ (y - mu)
        hess = (X * w[:, None]).T @ X + 1e-10 * np.eye(p)
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            return beta, True
        if np.max(np.abs(beta)) > 1e3:
            return beta, False  # separation; caller caps probabilities
    # no tolerance convergence within the budget: treat as suspect
    return beta, False


@dataclass
class PropensityModel:
    """Per-visit-position logistic models over the history vector, with a
    pooled fallback for degenerate positions. Probabilities are clipped to
    [PROB_FLOOR, 1 - PROB_FLOOR]."""

    coefs: dict[int, np.ndarray]
    pooled: np.ndarray
    registry: FeatureRegistry
    notes: list[str] = field(default_factory=list)

    def prob_action(self, H: np.ndarray, actions: np.ndarray, k: int) -> np.ndarray:
        H = np.atleast_2d(H)
        X = np.column_stack([np.ones(H.shape[0]), H])
        beta = self.coefs.get(k, self.pooled)
        p1 = 1.0 / (1.0 + np.exp(-(X @ beta)))
        p1 = np.clip(p1, PROB_FLOOR, 1.0 - PROB_FLOOR)
        a = np.asarray(actions, dtype=float)
        return np.where(a > 0.5, p1, 1.0 - p1)


def fit_propensity(
    trajectories: Sequence[Trajectory],
    registry: FeatureRegistry,
    k_max: int | None = None,
) -> PropensityModel:
    """Logistic treatment models fitted separately at each visit position."""
    H_all, y_all, ks = [], [], []
    for tr in trajectories:
        for rec in tr.visits:
            H_all.append(rec.history)
            y_all.append(rec.action)
            ks.append(rec.k)
    H_all = np.asarray(H_all)
    y_all = np.asarray(y_all, dtype=float)
    ks = np.asarray(ks)
    X_all = np.column_stack([np.ones(len(y_all)), H_all])

    notes: list[str] = []
    pooled, ok = _irls_logistic(X_all, y_all)
    if not ok:
        notes.append("pooled propensity fit hit a separation guard; probabilities capped")
        warnings.warn(notes[-1])
    coefs: dict[int, np.ndarray] = {}
    positions = range(1, (k_max or int(ks.max())) + 1)
    for k in positions:
        mask = ks == k
        yk = y_all[mask]
        if mask.sum() < 10 or len(np.unique(yk)) < 2:
            notes.append(f"visit {k}: degenerate treatment data, pooled fallback")
            continue
        beta, ok = _irls_logistic(X_all[mask], yk)
        if not ok:
            notes.append(f"visit {k}: separation guard hit; probabilities capped")
            warnings.warn(notes[-1])
        coefs[k] = beta
    return PropensityModel(coefs=coefs, pooled=pooled, registry=registry, notes=notes)


# ---------------------------------------------------------------------------
# Censoring.


@dataclass
class CensoringModel:
    """Censoring survival curves from a forest fitted with the censoring
    indicator flipped (event = censored visit end)."""

    model: ForestModel | None
    registry: FeatureRegistry
    degenerate: bool = False

    def g_at(self, H: np.ndarray, actions: np.ndarray, x: np.ndarray) -> np.ndarray:
        """G(x | H, A): probability the visit remains uncensored past x."""
        H = np.atleast_2d(H)
        if self.degenerate:
            return np.ones(H.shape[0])
        grid, vals = self.model.curve_values_on_grid(H, np.asarray(actions, dtype=float))
        idx = np.searchsorted(grid, np.asarray(x, dtype=float), side="right")
        padded = np.column_stack([np.ones(vals.shape[0]), vals])
        g = padded[np.arange(vals.shape[0]), idx]
        return np.clip(g, PROB_FLOOR, 1.0)


def fit_censoring(
    trajectories: Sequence[Trajectory],
    registry: FeatureRegistry,
    hyper: ForestHyperparams | None = None,
) -> CensoringModel:
    """Pooled-visit censoring forest: censored rows enter as events at X,
    uncensored visit ends as censored observations of the C clock."""
    X_rows, outcomes = [], []
    n_cens = 0
    for tr in trajectories:
        for rec in tr.visits:
            X_rows.append(np.concatenate([rec.history, [rec.action]]))
            if rec.delta == 0:
                outcomes.append(OutcomeCurve.event(rec.x))
                n_cens += 1
            else:
                outcomes.append(OutcomeCurve.censored(rec.x))
    hyper = hyper or ForestHyperparams(n_trees=50, seed=7)
    if n_cens < hyper.min_events:
        warnings.warn("no (or too few) censoring events; using a degenerate G = 1")
        return CensoringModel(model=None, registry=registry, degenerate=True)
    model = fit_forest(
        np.asarray(X_rows),
        outcomes,
        hyper,
        feature_names=registry.feature_names,
        action_values=list(registry.action_values),
    )
    return CensoringModel(model=model, registry=registry)


# ---------------------------------------------------------------------------
# True nuisances (for simulator-based sanity checks).


class TruePropensity:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.s1 = HISTORY_NAMES.index("s1")
        self.s2 = HISTORY_NAMES.index("s2")

    def prob_action(self, H, actions, k):
        from .simlab import propensity

        H = np.atleast_2d(H)
        p1 = propensity(H[:, self.s1], H[:, self.s2], self.cfg.beta_pi)
        a = np.asarray(actions, dtype=float)
        return np.where(a > 0.5, p1, 1.0 - p1)


class TrueCensoring:
    """Exact per-visit censoring survival G(x | H, A) = exp(-lambda_C x)."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg

    def g_at(self, H, actions, x):
        H = np.atleast_2d(H)
        names = list(HISTORY_NAMES)
        s1 = H[:, names.index("s1")]
        s2 = H[:, names.index("s2")]
        g = H[:, names.index("g_prior_visits")]
        b = H[:, names.index("b_cum")]
        xp = H[:, names.index("x_prev")]
        X = _design_matrix(self.cfg, s1, s2, np.asarray(actions, dtype=float), g, b, xp)
        lam_c = np.exp(X @ np.asarray(self.cfg.beta_c))
        return np.exp(-lam_c * np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# IPCW.


def ipcw_value(
    test: Sequence[Trajectory],
    policy,
    propensity_model,
    censoring_model,
    tau: float,
    k_max: int,
) -> EvalReport:
    """Self-normalized IPCW value over a test set.

    A patient carries weight only if uncensored and concordant with the
    policy at every visit; the weight is the inverse product of the
    per-visit treatment probabilities and censoring survival factors.
    """
    n = len(test)
    for tr in test:
        if tr.n_visits > k_max:
            raise ValueError(
                f"patient {tr.patient_id} has {tr.n_visits} visits > k_max {k_max}"
            )
    concordant = np.ones(n, dtype=bool)
    inv_denom = np.ones(n)
    t_trunc = np.array([min(tr.total_time, tau) for tr in test])
    uncensored = np.array([tr.failed for tr in test])

    for k in range(1, k_max + 1):
        rows = [i for i, tr in enumerate(test) if tr.n_visits >= k]
        if not rows:
            break
        H = np.array([test[i].visits[k - 1].history for i in rows])
        acts = np.array([test[i].visits[k - 1].action for i in rows])
        xs = np.array([test[i].visits[k - 1].x for i in rows])
        pol_acts = policy.decide(H, None)
        p_treat = np.clip(propensity_model.prob_action(H, acts, k), PROB_FLOOR, 1.0)
        g = np.clip(censoring_model.g_at(H, acts, xs), PROB_FLOOR, 1.0)
        for j, i in enumerate(rows):
            if pol_acts[j] != acts[j]:
                concordant[i] = False
            inv_denom[i] /= p_treat[j] * g[j]

    weights = np.where(concordant & uncensored, inv_denom, 0.0)
    wsum = weights.sum()
    if wsum <= 0:
        return EvalReport(
            method="IPCW",
            value=None,
            n=n,
            n_nonzero_weights=0,
            max_weight_share=None,
            no_match=True,
            notes=["no trajectories matched the policy while uncensored"],
        )
    value = float(np.sum(t_trunc * weights) / wsum)
    share = float(weights.max() / wsum)
    # Delta-method standard error of the self-normalized estimator.
    se = float(np.sqrt(np.sum((weights * (t_trunc - value)) ** 2)) / wsum)
    return EvalReport(
        method="IPCW",
        value=value,
        se=se,
        n=n,
        n_nonzero_weights=int((weights > 0).sum()),
        max_weight_share=share,
    )


# ---------------------------------------------------------------------------
# Cross-validation.


def cross_validate(
    trajectories: Sequence[Trajectory],
    registry: FeatureRegistry,
    tau: float,
    k_max: int,
    dtr_hyper: ForestHyperparams,
    *,
    strata: str | Sequence[float] = "single",
    folds: int = 10,
    train_frac: float = 0.8,
    seed: int = 0,
) -> EvalReport:
    """Repeated 80/20 splits: fit the DTR and nuisance models on the train
    side, IPCW-evaluate the fitted policy on the held-out side."""
    from .engine import StrataPlan, choose_cutpoint, fit_dtr
    from .simlab import FunctionPolicy

    rng = np.random.default_rng(seed)
    n = len(trajectories)
    per_fold: list[float] = []
    notes: list[str] = []
    num = 0.0
    den = 0.0
    n_nonzero = 0
    for fold in range(folds):
        perm = rng.permutation(n)
        n_train = int(round(train_frac * n))
        train = [trajectories[i] for i in perm[:n_train]]
        test = [trajectories[i] for i in perm[n_train:]]
        if not any(tr.failed for tr in train):
            notes.append(f"fold {fold}: no failure events in training split, skipped")
            warnings.warn(notes[-1])
            continue
        if strata == "single":
            plan = StrataPlan(tau=tau)
        elif strata == "auto":
            cut = choose_cutpoint(train, tau)
            plan = StrataPlan(tau=tau, cutpoints=() if cut is None else (cut,))
        else:
            plan = StrataPlan(tau=tau, cutpoints=tuple(strata))
        est = fit_dtr(train, plan, registry, dtr_hyper, k_max=k_max)
        prop = fit_propensity(train, registry, k_max=k_max)
        cens = fit_censoring(train, registry)
        rep = ipcw_value(test, FunctionPolicy(est.policy_batch), prop, cens, tau, k_max)
        if rep.no_match:
            notes.append(f"fold {fold}: no matching trajectories")
            continue
        per_fold.append(rep.value)
        # pool across folds, weighting each by its matched-patient count
        num += rep.value * rep.n_nonzero_weights
        den += rep.n_nonzero_weights
        n_nonzero += rep.n_nonzero_weights
    value = float(num / den) if den > 0 else None
    return EvalReport(
        method="CV-IPCW",
        value=value,
        n=n,
        per_fold=per_fold,
        n_nonzero_weights=n_nonzero,
        no_match=den == 0,
        notes=notes,
        config_echo={"folds": folds, "train_frac": train_frac, "seed": seed},
    )
