import numpy as np
import pytest

from grsf_dtr.engine import Trajectory, VisitRecord
from grsf_dtr.evaluation import (
    TrueCensoring,
    TruePropensity,
    cross_validate,
    fit_censoring,
    fit_propensity,
    ipcw_value,
    mc_value,
    _irls_logistic,
)
from grsf_dtr.forest import ForestHyperparams
from grsf_dtr.simlab import (
    ConstantPolicy,
    FunctionPolicy,
    SimConfig,
    preset_config,
    simulate_cohort,
)

REG = preset_config("10v-mod-500").registry()


def intercept_only_config(lam_t, lam_u=1e-12, tau=1000.0, n=100):
    z = -30.0  # effectively disables a clock
    return SimConfig(
        n_patients=n,
        k_max=10,
        tau=tau,
        beta_t=(0, 0, 0, 0, 0, 0, 0, float(np.log(lam_t))),
        beta_u=(0, 0, 0, 0, 0, 0, 0, z if lam_u <= 1e-12 else float(np.log(lam_u))),
        beta_c=(0, 0, 0, 0, 0, 0, 0, -30.0),
    )


class TestMcValue:
    def test_everyone_survives_gives_tau_exactly(self):
        cfg = intercept_only_config(lam_t=1e-13, tau=500.0)
        rep = mc_value(ConstantPolicy(0.0), cfg, n=400, seed=1)
        assert rep.value == 500.0
        assert rep.se == 0.0

    def test_closed_form_truncated_exponential_mean(self):
        lam, tau = 0.01, 300.0
        cfg = intercept_only_config(lam_t=lam, tau=tau)
        rep = mc_value(ConstantPolicy(1.0), cfg, n=20_000, seed=2)
        want = (1.0 - np.exp(-lam * tau)) / lam
        assert abs(rep.value - want) < 3 * rep.se

    def test_null_covariate_policies_agree(self):
        cfg = preset_config("10v-mod-500", n_patients=1)
        p_a = FunctionPolicy(lambda H: (H[:, 6] <= 0.5).astype(float))
        # same rule with a spurious dependence on the binary baseline column
        p_b = FunctionPolicy(
            lambda H: np.where(H[:, 1] >= -1, (H[:, 6] <= 0.5).astype(float), 0.0)
        )
        ra = mc_value(p_a, cfg, n=6000, seed=3)
        rb = mc_value(p_b, cfg, n=6000, seed=3)
        assert ra.value == pytest.approx(rb.value, abs=1e-12)


def make_traj(pid, specs, z=0.5, actions=None):
    visits = []
    b = 0.0
    x_prev = 0.0
    for k, (x, delta, gamma) in enumerate(specs, start=1):
        h = np.zeros(len(REG.history_names))
        h[0] = z
        h[5] = x_prev
        h[6] = z
        h[8] = b
        a = 1.0 if actions is None else float(actions[k - 1])
        visits.append(
            VisitRecord(pid, k, h, a, x, delta, gamma, b)
        )
        b += x
        x_prev = x
    return Trajectory(pid, tuple(visits))


class _StubProp:
    def __init__(self, p=1.0):
        self.p = p

    def prob_action(self, H, actions, k):
        return np.full(np.atleast_2d(H).shape[0], self.p)


class _StubCens:
    def __init__(self, g=1.0):
        self.g = g

    def g_at(self, H, actions, x):
        return np.full(np.atleast_2d(H).shape[0], self.g)


class TestIpcwValue:
    def test_unit_weights_reduce_to_plain_mean(self):
        trajs = [
            make_traj("a", [(100.0, 1, 1)]),
            make_traj("b", [(40.0, 1, 0), (30.0, 1, 1)]),
            make_traj("c", [(250.0, 1, 1)]),
        ]
        rep = ipcw_value(
            trajs, ConstantPolicy(1.0), _StubProp(1.0), _StubCens(1.0), tau=1000.0, k_max=5
        )
        assert rep.value == pytest.approx(np.mean([100.0, 70.0, 250.0]))
        assert rep.n_nonzero_weights == 3

    def test_hand_computed_four_patient_example(self):
        # Patients: two concordant failures, one censored, one deviating.
        trajs = [
            make_traj("a", [(100.0, 1, 1)]),                  # w = 1/(0.8*0.5)
            make_traj("b", [(50.0, 1, 0), (150.0, 1, 1)]),    # w = 1/(0.8^2*0.5^2)
            make_traj("c", [(60.0, 0, 0)]),                   # censored: w = 0
            make_traj("d", [(80.0, 1, 1)], actions=[0.0]),    # deviates: w = 0
        ]
        rep = ipcw_value(
            trajs, ConstantPolicy(1.0), _StubProp(0.8), _StubCens(0.5), tau=1000.0, k_max=5
        )
        w_a = 1.0 / (0.8 * 0.5)
        w_b = 1.0 / (0.8**2 * 0.5**2)
        want = (100.0 * w_a + 200.0 * w_b) / (w_a + w_b)
        assert rep.value == pytest.approx(want, rel=1e-12)
        assert rep.n_nonzero_weights == 2
        assert rep.max_weight_share == pytest.approx(w_b / (w_a + w_b))

    def test_truncation_at_tau(self):
        trajs = [make_traj("a", [(400.0, 1, 1)])]
        rep = ipcw_value(
            trajs, ConstantPolicy(1.0), _StubProp(1.0), _StubCens(1.0), tau=300.0, k_max=3
        )
        assert rep.value == pytest.approx(300.0)

    def test_no_matching_trajectories(self):
        trajs = [make_traj("a", [(100.0, 1, 1)])]
        rep = ipcw_value(
            trajs, ConstantPolicy(0.0), _StubProp(1.0), _StubCens(1.0), tau=1000.0, k_max=3
        )
        assert rep.no_match
        assert rep.value is None
        assert rep.n_nonzero_weights == 0

    def test_scale_invariance_of_self_normalized_estimator(self):
        # equal visit counts so a probability rescale multiplies every
        # patient's weight by the same constant
        trajs = [
            make_traj("a", [(40.0, 1, 0), (100.0, 1, 1)]),
            make_traj("b", [(40.0, 1, 0), (30.0, 1, 1)]),
        ]
        r1 = ipcw_value(trajs, ConstantPolicy(1.0), _StubProp(0.9), _StubCens(0.8), 1000.0, 5)
        r2 = ipcw_value(trajs, ConstantPolicy(1.0), _StubProp(0.45), _StubCens(0.4), 1000.0, 5)
        assert r1.value == pytest.approx(r2.value, rel=1e-12)

    def test_rejects_overlong_trajectories(self):
        trajs = [make_traj("a", [(10.0, 1, 0), (10.0, 1, 0), (10.0, 1, 1)])]
        with pytest.raises(ValueError, match="k_max"):
            ipcw_value(trajs, ConstantPolicy(1.0), _StubProp(), _StubCens(), 1000.0, 2)


class TestFitPropensity:
    def test_recovers_generating_logistic_rule(self):
        rng = np.random.default_rng(5)
        n = 5000
        d = len(REG.history_names)
        H = np.zeros((n, d))
        H[:, 0] = rng.uniform(size=n)
        H[:, 6] = rng.uniform(size=n)
        H[:, 7] = rng.uniform(size=n)
        truth = np.zeros(d + 1)
        truth[0] = 0.3       # intercept
        truth[7] = -1.2      # s1 coefficient (history index 6)
        truth[8] = 0.8       # s2
        X = np.column_stack([np.ones(n), H])
        p = 1 / (1 + np.exp(-(X @ truth)))
        y = (rng.uniform(size=n) < p).astype(float)
        trajs = []
        for i in range(n):
            trajs.append(
                Trajectory(
                    f"p{i}",
                    (VisitRecord(f"p{i}", 1, H[i], y[i], 10.0, 1, 1, 0.0),),
                )
            )
        model = fit_propensity(trajs, REG, k_max=1)
        beta = model.coefs[1]
        # asymptotic standard errors from the information matrix at the fit,
        # over the informative columns only (the rest of H is constant zero)
        mu = 1 / (1 + np.exp(-(X @ beta)))
        info = (X * (mu * (1 - mu))[:, None]).T @ X
        cols = np.array([0, 1, 7, 8])
        sub = np.linalg.inv(info[np.ix_(cols, cols)])
        se = dict(zip(cols, np.sqrt(np.diag(sub))))
        for j in (0, 7, 8):
            assert abs(beta[j] - truth[j]) < 3 * se[j]

    def test_independent_treatment_gives_null_slopes(self):
        rng = np.random.default_rng(6)
        n = 3000
        d = len(REG.history_names)
        H = rng.uniform(size=(n, d))
        y = rng.integers(0, 2, size=n).astype(float)
        trajs = [
            Trajectory(f"p{i}", (VisitRecord(f"p{i}", 1, H[i], y[i], 5.0, 1, 1, 0.0),))
            for i in range(n)
        ]
        model = fit_propensity(trajs, REG, k_max=1)
        beta = model.coefs[1]
        assert np.max(np.abs(beta[1:])) < 0.35  # ~3 sigma at this n

    def test_all_treated_triggers_separation_path(self):
        trajs = [
            make_traj(f"p{i}", [(10.0 + i, 1, 1)]) for i in range(30)
        ]  # every action is 1.0
        with pytest.warns(UserWarning):
            model = fit_propensity(trajs, REG, k_max=1)
        p = model.prob_action(trajs[0].visits[0].history, np.array([1.0]), 1)
        assert p[0] <= 0.99


class TestFitCensoring:
    def _censored_world(self, n, lam_c=0.02, seed=7):
        rng = np.random.default_rng(seed)
        trajs = []
        for i in range(n):
            c = rng.exponential(1 / lam_c)
            t = rng.exponential(1 / 0.01)
            x = min(c, t)
            censored = c < t
            trajs.append(
                make_traj(f"p{i}", [(float(x), 0 if censored else 1, 0 if censored else 1)])
            )
        return trajs

    def test_recovers_exponential_censoring_curve(self):
        lam_c = 0.02
        errs = []
        for n in (150, 1200):
            trajs = self._censored_world(n, lam_c)
            cm = fit_censoring(trajs, REG, ForestHyperparams(n_trees=30, seed=1))
            grid = np.linspace(1.0, 120.0, 40)
            h = trajs[0].visits[0].history
            g_hat = np.array(
                [cm.g_at(h[None, :], np.array([1.0]), np.array([t]))[0] for t in grid]
            )
            errs.append(np.max(np.abs(g_hat - np.exp(-lam_c * grid))))
        assert errs[1] < errs[0]

    def test_zero_censoring_degenerates_to_unit(self):
        trajs = [make_traj(f"p{i}", [(10.0 + i, 1, 1)]) for i in range(20)]
        with pytest.warns(UserWarning):
            cm = fit_censoring(trajs, REG)
        assert cm.degenerate
        g = cm.g_at(trajs[0].visits[0].history, np.array([1.0]), np.array([5.0]))
        assert g[0] == 1.0

    def test_curve_monotone(self):
        trajs = self._censored_world(300)
        cm = fit_censoring(trajs, REG, ForestHyperparams(n_trees=10, seed=2))
        h = trajs[0].visits[0].history
        grid = np.linspace(0, 150, 60)
        g = np.array([cm.g_at(h[None, :], np.array([0.0]), np.array([t]))[0] for t in grid])
        assert np.all(np.diff(g) <= 1e-12)


class TestTrueNuisances:
    def test_true_propensity_matches_formula(self):
        cfg = preset_config("10v-mod-500")
        tp = TruePropensity(cfg)
        h = np.zeros(len(REG.history_names))
        h[6], h[7] = 1.0, 1.0
        p1 = tp.prob_action(h, np.array([1.0]), 1)[0]
        assert p1 == pytest.approx(1 / (1 + np.exp(1.0)))
        p0 = tp.prob_action(h, np.array([0.0]), 1)[0]
        assert p0 == pytest.approx(1 - p1)

    def test_true_censoring_exponential_form(self):
        cfg = preset_config("10v-mod-500")
        tc = TrueCensoring(cfg)
        h = np.zeros(len(REG.history_names))
        h[6], h[7] = 0.4, 0.6
        x = np.array([30.0])
        lam = np.exp(
            np.array(cfg.beta_c)
            @ np.array([0.4, 0.6, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0])
        )
        assert tc.g_at(h, np.array([1.0]), x)[0] == pytest.approx(np.exp(-lam * 30.0))


class TestCrossValidate:
    def _cohort(self, n=140, seed=9):
        cfg = preset_config("10v-mod-500", n_patients=n, seed=seed)
        return simulate_cohort(cfg), cfg

    def test_seeded_folds_are_deterministic(self):
        ds, cfg = self._cohort()
        hyper = ForestHyperparams(n_trees=4, seed=3)
        r1 = cross_validate(
            ds.trajectories, REG, cfg.tau, cfg.k_max, hyper, folds=2, seed=42
        )
        r2 = cross_validate(
            ds.trajectories, REG, cfg.tau, cfg.k_max, hyper, folds=2, seed=42
        )
        assert r1.per_fold == r2.per_fold

    def test_observed_action_oracle_reduces_to_weighted_mean(self):
        ds, cfg = self._cohort(n=120, seed=10)
        trajs = ds.trajectories
        lookup = {}
        for tr in trajs:
            for rec in tr.visits:
                lookup[rec.history.tobytes()] = rec.action

        class Oracle:
            stochastic = False

            def decide(self, H, rng=None):
                return np.array([lookup[np.asarray(h).tobytes()] for h in H])

        prop = _StubProp(1.0)
        cens = _StubCens(1.0)
        rep = ipcw_value(trajs, Oracle(), prop, cens, cfg.tau, cfg.k_max)
        uncensored = [tr for tr in trajs if tr.failed]
        want = np.mean([min(tr.total_time, cfg.tau) for tr in uncensored])
        assert rep.n_nonzero_weights == len(uncensored)
        assert rep.value == pytest.approx(want)


class TestIrls:
    def test_perfect_separation_flagged(self):
        x = np.linspace(-2, 2, 40)
        X = np.column_stack([np.ones(40), x])
        y = (x > 0).astype(float)
        beta, ok = _irls_logistic(X, y)
        assert not ok
