import numpy as np
import pytest

from grsf_dtr.curves import (
    OutcomeCurve,
    StepSurvivalCurve,
    modified_km,
    restricted_mean,
    shift_augment,
)
from grsf_dtr.forest import (
    ForestFitError,
    ForestHyperparams,
    ForestModel,
    fit_forest,
    grow_tree,
    logrank_split_score,
)

from audit_util import audit_tree


def indicator_rows(times, events, feats):
    rows = []
    for t, e, f in zip(times, events, feats):
        oc = OutcomeCurve.event(t) if e else OutcomeCurve.censored(t)
        rows.append((np.asarray(f, dtype=float), oc, 1.0))
    return rows


def two_sample_logrank_oracle(times, events, group_left):
    """Textbook two-sample log-rank chi-square from an explicit risk table."""
    times = np.asarray(times, float)
    events = np.asarray(events, int)
    gl = np.asarray(group_left, bool)
    num = 0.0
    var = 0.0
    for t in np.unique(times[events == 1]):
        at_risk = times >= t
        y = at_risk.sum()
        y1 = (at_risk & gl).sum()
        d = ((times == t) & (events == 1)).sum()
        d1 = ((times == t) & (events == 1) & gl).sum()
        num += d1 - d * y1 / y
        if y > 1:
            var += d * (y1 / y) * (1 - y1 / y) * (y - d) / (y - 1)
    return num * num / var if var > 0 else 0.0


class TestLogrankSplitScore:
    def test_identical_children_score_zero(self):
        times = [1.0, 2.0, 3.0, 1.0, 2.0, 3.0]
        feats = [[0.0], [0.0], [0.0], [1.0], [1.0], [1.0]]
        rows = indicator_rows(times, [1] * 6, feats)
        assert logrank_split_score(rows, 0, 0.5) == pytest.approx(0.0, abs=1e-12)

    def test_matches_textbook_oracle_four_subjects(self):
        times = [1.0, 2.0, 5.0, 6.0]
        feats = [[0.0], [0.0], [1.0], [1.0]]
        rows = indicator_rows(times, [1] * 4, feats)
        got = logrank_split_score(rows, 0, 0.5)
        want = two_sample_logrank_oracle(times, [1] * 4, [True, True, False, False])
        assert got == pytest.approx(want, abs=1e-10)

    def test_matches_textbook_oracle_randomized(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            n = int(rng.integers(6, 40))
            times = np.round(rng.uniform(0.5, 20, n), 1)
            events = rng.integers(0, 2, n)
            events[rng.integers(0, n)] = 1
            x = rng.normal(size=n)
            cut = float(np.median(x))
            rows = indicator_rows(times, events, x[:, None])
            if (x <= cut).all() or (~(x <= cut)).all():
                continue
            got = logrank_split_score(rows, 0, cut)
            want = two_sample_logrank_oracle(times, events, x <= cut)
            assert got == pytest.approx(want, abs=1e-10)

    def test_separated_fractional_outcomes_beat_relabelings(self):
        rng = np.random.default_rng(9)
        n = 30
        # Left outcomes stochastically dominate right: late vs early drops.
        rows = []
        for i in range(n):
            if i < n // 2:
                oc = shift_augment(modified_km([(OutcomeCurve.event(t), 1.0) for t in rng.uniform(8, 12, 5)]), 4.0)
                rows.append((np.array([0.0]), oc, 1.0))
            else:
                oc = shift_augment(modified_km([(OutcomeCurve.event(t), 1.0) for t in rng.uniform(0.5, 2, 5)]), 0.5)
                rows.append((np.array([1.0]), oc, 1.0))
        true_score = logrank_split_score(rows, 0, 0.5)
        beaten = 0
        for _ in range(100):
            perm = rng.permutation(n)
            relabeled = [
                (np.array([0.0 if j < n // 2 else 1.0]), rows[p][1], 1.0)
                for j, p in enumerate(perm)
            ]
            if true_score > logrank_split_score(relabeled, 0, 0.5):
                beaten += 1
        assert beaten == 100


def make_hyper(**kw):
    base = dict(n_trees=10, n_min=5, min_events=2.0, alpha=0.1, split_rand=0.2, seed=0)
    base.update(kw)
    return ForestHyperparams(**base)


def noise_rows(rng, n, d=3, censor_frac=0.2):
    X = rng.uniform(0, 1, size=(n, d))
    times = rng.exponential(2.0, size=n) + 0.05
    events = (rng.uniform(size=n) > censor_frac).astype(int)
    outcomes = [
        OutcomeCurve.event(t) if e else OutcomeCurve.censored(t)
        for t, e in zip(times, events)
    ]
    return X, outcomes


class TestGrowTree:
    def test_small_node_becomes_single_terminal(self):
        rng = np.random.default_rng(0)
        X, outcomes = noise_rows(rng, 10, censor_frac=0.0)
        tree = grow_tree(X, outcomes, make_hyper(n_min=6), np.random.default_rng(1))
        assert len(tree.feature) == 1
        assert tree.leaf_id[0] == 0

    def test_structural_audit_on_noise(self):
        rng = np.random.default_rng(2)
        X, outcomes = noise_rows(rng, 200)
        hyper = make_hyper()
        tree = grow_tree(X, outcomes, hyper, np.random.default_rng(3))
        event_mass = np.array([oc.delta for oc in outcomes], dtype=float)
        bad = audit_tree(tree, X, event_mass, hyper.alpha, hyper.n_min, hyper.min_events)
        assert bad == []

    def test_root_split_frequency_floor(self):
        # Definition-1 floor: every feature's root-split frequency is at
        # least split_rand / d minus 3 sigma binomial noise.
        rng = np.random.default_rng(4)
        d = 4
        X, outcomes = noise_rows(rng, 80, d=d, censor_frac=0.0)
        hyper = make_hyper(split_rand=0.5)
        n_rep = 400
        counts = np.zeros(d)
        for i in range(n_rep):
            tree = grow_tree(X, outcomes, hyper, np.random.default_rng(1000 + i))
            if tree.leaf_id[0] < 0:
                counts[tree.feature[0]] += 1
        p_floor = hyper.split_rand / d
        sigma = np.sqrt(p_floor * (1 - p_floor) / n_rep)
        assert np.all(counts / n_rep >= p_floor - 3 * sigma)

    def test_terminal_curves_match_modified_km(self):
        rng = np.random.default_rng(6)
        X, outcomes = noise_rows(rng, 40)
        hyper = make_hyper()
        tree = grow_tree(X, outcomes, hyper, np.random.default_rng(7))
        event_mass = np.array([oc.delta for oc in outcomes], dtype=float)
        from audit_util import walk_tree

        for node, rows, is_leaf in walk_tree(tree, X, event_mass):
            if not is_leaf:
                continue
            km = modified_km([(outcomes[i], 1.0) for i in rows])
            leaf = tree.leaf_curve(int(tree.leaf_id[node]))
            grid = np.unique(np.concatenate([km.times, leaf.times, [0.0]]))
            assert np.max(np.abs(km.at(grid) - leaf.at(grid))) < 1e-12


class TestFitForest:
    def test_single_tree_prediction_equals_terminal_curve(self):
        rng = np.random.default_rng(8)
        X, outcomes = noise_rows(rng, 60)
        model = fit_forest(
            X,
            outcomes,
            make_hyper(n_trees=1, subsample=1.0),
            feature_names=["f0", "f1", "action"],
            action_values=[0.0, 1.0],
        )
        tree = model.trees[0]
        h = X[5, :2]
        pred = model.predict_curve(h, 1.0)
        x_full = model.compose(h, 1.0)
        leaf = tree.leaf_curve(int(tree.route(x_full)[0]))
        grid = np.linspace(0, 10, 200)
        assert np.max(np.abs(pred.at(grid) - leaf.at(grid))) < 1e-15

    def test_determinism_across_thread_counts(self):
        rng = np.random.default_rng(10)
        X, outcomes = noise_rows(rng, 80)
        kw = dict(
            feature_names=["f0", "f1", "action"],
            action_values=[0.0, 1.0],
        )
        X = X[:, :3]
        m1 = fit_forest(X, outcomes, make_hyper(n_trees=8, n_jobs=1, seed=42), **kw)
        m8 = fit_forest(X, outcomes, make_hyper(n_trees=8, n_jobs=8, seed=42), **kw)
        assert m1.to_json() == m8.to_json()

    def test_insufficient_event_mass_raises(self):
        X = np.zeros((5, 2))
        outcomes = [OutcomeCurve.censored(1.0 + i) for i in range(5)]
        with pytest.raises(ForestFitError, match="event mass"):
            fit_forest(
                X,
                outcomes,
                make_hyper(),
                feature_names=["f0", "action"],
                action_values=[0.0, 1.0],
            )

    def test_forest_audit_after_fit(self):
        rng = np.random.default_rng(12)
        X, outcomes = noise_rows(rng, 150)
        hyper = make_hyper(n_trees=6)
        model = fit_forest(
            X,
            outcomes,
            hyper,
            feature_names=["f0", "f1", "action"],
            action_values=[0.0, 1.0],
        )
        # Audit with respect to each tree's subsample is covered in
        # acceptance; here every leaf must at least satisfy its stored count.
        for t in model.trees:
            assert all(n >= hyper.n_min for n in t.leaf_n)
            assert all(em >= hyper.min_events - 1e-9 for em in t.leaf_event_mass)


class TestPrediction:
    def _toy_model(self, seed=0, n=120, n_trees=12):
        rng = np.random.default_rng(seed)
        X = np.column_stack(
            [rng.uniform(0, 1, n), rng.integers(0, 2, n).astype(float)]
        )
        # Action 1 doubles survival times.
        base = rng.exponential(1.0, n) + 0.05
        times = base * np.where(X[:, 1] > 0.5, 2.0, 1.0)
        outcomes = [OutcomeCurve.event(t) for t in times]
        return fit_forest(
            X,
            outcomes,
            make_hyper(n_trees=n_trees, seed=seed, n_min=5),
            feature_names=["h0", "action"],
            action_values=[0.0, 1.0],
        )

    def test_two_curve_average(self):
        model = self._toy_model()
        from grsf_dtr.curves import StepSurvivalCurve, average_curves

        avg = average_curves(
            [StepSurvivalCurve([1.0], [0.0]), StepSurvivalCurve([3.0], [0.0])]
        )
        assert avg.at(0.9) == 1.0
        assert avg.at(1.5) == 0.5
        assert avg.at(3.1) == 0.0

    def test_prediction_is_pointwise_tree_average(self):
        model = self._toy_model()
        h = np.array([0.4])
        pred = model.predict_curve(h, 1.0)
        x = model.compose(h, 1.0)
        grid = np.linspace(0.0, 8.0, 1000)
        per_tree = [
            t.leaf_curve(int(t.route(x)[0])).at(grid) for t in model.trees
        ]
        assert np.max(np.abs(pred.at(grid) - np.mean(per_tree, axis=0))) < 1e-12

    def test_policy_tie_breaks_to_first_action(self):
        model = self._toy_model()
        # Force identical curves by zeroing the action column influence:
        # query a model fitted with action excluded from splits.
        rng = np.random.default_rng(3)
        X = np.column_stack([rng.uniform(0, 1, 60), rng.integers(0, 2, 60)])
        outcomes = [OutcomeCurve.event(t) for t in rng.exponential(1, 60) + 0.1]
        m = fit_forest(
            X,
            outcomes,
            make_hyper(allow_action_split=False),
            feature_names=["h0", "action"],
            action_values=[0.0, 1.0],
        )
        action, _ = m.policy_argmax(np.array([0.5]), 5.0)
        assert action == 0.0

    def test_dominating_action_wins(self):
        # Crafted single tree: the action routes to a pointwise-dominating
        # curve, so the restricted-mean argmax must pick it.
        from grsf_dtr.forest import SurvivalTree

        t = SurvivalTree()
        root = t._add_internal(1, 0.5)  # split on the action feature
        left = t._add_leaf(StepSurvivalCurve([1.0], [0.1]), 10, 10.0)
        right = t._add_leaf(StepSurvivalCurve([1.0, 4.0], [0.8, 0.3]), 10, 10.0)
        t.left[root], t.right[root] = left, right
        t.seal()
        model = ForestModel(
            trees=[t],
            hyper=make_hyper(n_trees=1),
            feature_names=["h0", "action"],
            action_values=[0.0, 1.0],
            seed=0,
        )
        action, value = model.policy_argmax(np.array([0.3]), 6.0)
        assert action == 1.0
        assert value == pytest.approx(restricted_mean(StepSurvivalCurve([1.0, 4.0], [0.8, 0.3]), 6.0))

    def test_argmax_matches_exhaustive_rmst(self):
        model = self._toy_model()
        rng = np.random.default_rng(7)
        for _ in range(100):
            h = rng.uniform(0, 1, size=1)
            tau = rng.uniform(1.0, 8.0)
            action, value = model.policy_argmax(h, tau)
            vals = [restricted_mean(model.predict_curve(h, a), tau) for a in (0.0, 1.0)]
            assert action == (0.0, 1.0)[int(np.argmax(vals))]
            assert value == pytest.approx(max(vals), rel=1e-10)

    def test_batched_rmst_matches_scalar_path(self):
        model = self._toy_model()
        rng = np.random.default_rng(11)
        H = rng.uniform(0, 1, size=(25, 1))
        taus = rng.uniform(1.0, 8.0, size=25)
        vals = model.action_rmst(H, taus)
        for i in range(25):
            for ai, a in enumerate((0.0, 1.0)):
                want = restricted_mean(model.predict_curve(H[i], a), taus[i])
                assert vals[i, ai] == pytest.approx(want, rel=1e-10, abs=1e-10)

    def test_unknown_action_and_dim_mismatch(self):
        model = self._toy_model()
        with pytest.raises(ValueError, match="unknown action"):
            model.predict_curve(np.array([0.3]), 7.0)
        with pytest.raises(ValueError, match="dimension"):
            model.predict_curve(np.array([0.3, 0.4]), 1.0)


class TestSerialization:
    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(21)
        X, outcomes = noise_rows(rng, 70)
        model = fit_forest(
            X,
            outcomes,
            make_hyper(n_trees=5, seed=13),
            feature_names=["f0", "f1", "action"],
            action_values=[0.0, 1.0],
        )
        blob = model.to_json()
        back = ForestModel.from_json(blob)
        assert back.to_json() == blob
        h = np.array([0.2, 0.8])
        grid = np.linspace(0, 10, 300)
        assert np.array_equal(model.predict_curve(h, 0.0).at(grid), back.predict_curve(h, 0.0).at(grid))


class TestKernelEquivalence:
    def test_numba_and_numpy_paths_grow_identical_trees(self):
        import grsf_dtr._kernels as kernels

        if not kernels.HAVE_NUMBA:
            pytest.skip("numba unavailable; only the reference path is active")
        rng = np.random.default_rng(33)
        X, outcomes = noise_rows(rng, 250)
        # widen the outcome mix with augmented curves
        base = modified_km([(OutcomeCurve.event(t), 1.0) for t in rng.exponential(2, 40) + 0.1])
        outcomes = list(outcomes)
        for i in range(0, 250, 3):
            outcomes[i] = shift_augment(base, float(rng.uniform(0.2, 2.0)))
        kw = dict(feature_names=["f0", "f1", "f2", "action"], action_values=[0.0, 1.0])
        X = np.column_stack([X, rng.integers(0, 2, 250)])
        hyper = make_hyper(n_trees=4, seed=99)
        fast = fit_forest(X, outcomes, hyper, **kw)
        kernels.HAVE_NUMBA = False
        try:
            ref = fit_forest(X, outcomes, hyper, **kw)
        finally:
            kernels.HAVE_NUMBA = True
        assert fast.to_json() == ref.to_json()


class TestArgmaxInvariance:
    def test_invariant_under_increasing_transform(self):
        rng = np.random.default_rng(44)
        X, outcomes = noise_rows(rng, 90, censor_frac=0.1)
        model = fit_forest(
            X,
            outcomes,
            make_hyper(n_trees=6),
            feature_names=["f0", "f1", "action"],
            action_values=[0.0, 1.0],
        )
        X = X[:, :3]
        for _ in range(30):
            h = rng.uniform(0, 1, size=2)
            tau = float(rng.uniform(1, 8))
            vals = model.action_rmst(h[None, :], np.array([tau]))[0]
            direct = int(np.argmax(vals))
            transformed = int(np.argmax(np.exp(3.0 * vals) + 5.0))
            assert direct == transformed
            action, _ = model.policy_argmax(h, tau)
            assert action == model.action_values[direct]
