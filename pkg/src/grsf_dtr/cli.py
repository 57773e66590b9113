"""Batch command-line surface: simulate cohorts, fit the DTR, predict,
evaluate policies, and drive the end-to-end simulation-study reproduction.

Commands are config-file driven; every command that draws randomness takes
a mandatory or config-supplied master seed and is bit-reproducible across
runs and worker counts.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .dataio import (
    ValidationFailure,
    load_config,
    read_visits_csv,
    write_latents_csv,
    write_manifest,
    write_visits_csv,
)
from .engine import (
    DtrEstimate,
    EngineError,
    StrataPlan,
    choose_cutpoint,
    fit_dtr,
)
from .evaluation import cross_validate, mc_value
from .forest import ForestFitError, ForestHyperparams
from .simlab import (
    FunctionPolicy,
    ObservedPolicy,
    PRESETS,
    SimConfig,
    preset_config,
    simulate_cohort,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1)[0])


_SIM_FIELDS = set(SimConfig.__dataclass_fields__) - {"seed"}


def _sim_config_from_block(block: dict, seed: int, n_override=None) -> SimConfig:
    """Build a SimConfig from a config block, ignoring non-sim keys (the
    block may double as an evaluate/reproduce block)."""
    kw = {k: v for k, v in block.items() if k in _SIM_FIELDS}
    for key in ("beta_t", "beta_u", "beta_c", "beta_pi", "design"):
        if key in kw:
            kw[key] = tuple(kw[key])
    if n_override:
        kw["n_patients"] = n_override
    if "preset" in block:
        kw.pop("n_patients", None)
        return preset_config(
            block["preset"],
            n_patients=n_override or block.get("n_patients"),
            seed=seed,
            **kw,
        )
    return SimConfig(seed=seed, **kw)


def _hyper_from_block(block: dict) -> ForestHyperparams:
    try:
        return ForestHyperparams(**block)
    except TypeError as exc:
        raise ValidationFailure(f"forest block: {exc}") from exc


def _strata_plan(strata_spec, trajectories, tau) -> tuple[StrataPlan, str]:
    if strata_spec in (None, "single"):
        return StrataPlan(tau=tau), "single"
    if strata_spec == "auto":
        cut = choose_cutpoint(trajectories, tau)
        if cut is None:
            return StrataPlan(tau=tau), "auto->single (share unattainable)"
        return StrataPlan(tau=tau, cutpoints=(cut,)), f"auto (cutpoint {cut:g})"
    if isinstance(strata_spec, dict) and "cutpoints" in strata_spec:
        return (
            StrataPlan(tau=tau, cutpoints=tuple(strata_spec["cutpoints"])),
            "explicit",
        )
    raise ValidationFailure(f"unrecognized strata spec: {strata_spec!r}")


# ---------------------------------------------------------------------------
# simulate


def _simulate_one(payload: dict) -> dict:
    cfg = SimConfig(**payload["sim_kwargs"])
    out = Path(payload["out"])
    r = payload["replicate"]
    ds = simulate_cohort(cfg)
    visits = out / f"visits_r{r:03d}.csv"
    latents = out / f"latents_r{r:03d}.csv"
    write_visits_csv(visits, ds.trajectories, cfg.registry())
    write_latents_csv(latents, ds)
    n_events = int(sum(tr.failed for tr in ds.trajectories))
    return {
        "replicate": r,
        "censoring_rate": ds.censoring_rate,
        "n_events": n_events,
        "files": [str(visits), str(latents)],
    }


def cmd_simulate(cfg: dict, seed: int, jobs: int, out: Path) -> int:
    block = cfg.get("sim")
    if not block:
        raise ValidationFailure("config needs a 'sim' block")
    replicates = int(block.get("replicates", 1))
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(replicates)
    payloads = []
    for r in range(replicates):
        sim_cfg = _sim_config_from_block(block, seed=_seed_int(children[r]))
        payloads.append(
            {"sim_kwargs": asdict(sim_cfg), "out": str(out), "replicate": r}
        )
    results = _run_pool(_simulate_one, payloads, jobs)
    files = [f for res in results for f in res["files"]]
    manifest = {
        "command": "simulate",
        "seed": seed,
        "replicates": replicates,
        "config": block,
        "results": [
            {k: v for k, v in res.items() if k != "files"} for res in results
        ],
    }
    write_manifest(out / "manifest.json", manifest, files)
    for res in results:
        print(
            f"replicate {res['replicate']}: censoring {res['censoring_rate']:.1%}, "
            f"{res['n_events']} events"
        )
    return EXIT_OK


def _run_pool(fn, payloads, jobs):
    if jobs <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, payloads))


# ---------------------------------------------------------------------------
# fit


def cmd_fit(cfg: dict, seed: int, jobs: int, out: Path) -> int:
    block = cfg.get("fit")
    if not block or "data" not in block:
        raise ValidationFailure("config needs a 'fit' block with a 'data' path")
    tau = block.get("tau")
    if tau is None:
        raise ValidationFailure("fit block needs 'tau'")
    hyper = _hyper_from_block({**cfg.get("forest", {}), "seed": seed})
    registry = _registry_from_cfg(cfg)
    trajectories = read_visits_csv(block["data"], registry)
    plan, strata_note = _strata_plan(cfg.get("strata", "single"), trajectories, tau)
    est = fit_dtr(
        trajectories,
        plan,
        registry,
        hyper,
        k_max=block.get("k_max"),
    )
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.json"
    with open(model_path, "w") as fh:
        fh.write(est.to_json())
    log_path = out / "iteration_log.json"
    with open(log_path, "w") as fh:
        json.dump(
            [asdict(e) for e in est.iteration_log], fh, sort_keys=True, indent=1
        )
    write_manifest(
        out / "manifest.json",
        {
            "command": "fit",
            "seed": seed,
            "strata": strata_note,
            "total_iterations": est.total_iterations,
            "m_per_stratum": {str(k): v for k, v in est.m_per_stratum.items()},
        },
        [model_path, log_path],
    )
    print(f"strata: {strata_note}")
    for stratum in sorted(est.m_per_stratum):
        print(f"  stratum {stratum}: M = {est.m_per_stratum[stratum]}")
    print(f"total fitting iterations J = {est.total_iterations}")
    print(f"model written to {model_path}")
    return EXIT_OK


def _registry_from_cfg(cfg: dict):
    from .engine import FeatureRegistry
    from .simlab import HISTORY_NAMES

    block = cfg.get("registry")
    if not block:
        return FeatureRegistry(history_names=HISTORY_NAMES, action_values=(0.0, 1.0))
    return FeatureRegistry(
        history_names=tuple(block["history_names"]),
        action_values=tuple(block.get("action_values", (0.0, 1.0))),
        cumulative_time_feature=block.get("cumulative_time_feature", "b_cum"),
    )


# ---------------------------------------------------------------------------
# predict


def cmd_predict(cfg: dict, seed: int, jobs: int, out: Path) -> int:
    block = cfg.get("predict")
    if not block or "model" not in block or "data" not in block:
        raise ValidationFailure("config needs a 'predict' block with 'model' and 'data'")
    with open(block["model"]) as fh:
        est = DtrEstimate.from_json(fh.read())
    trajectories = read_visits_csv(block["data"], est.registry)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "actions.csv"
    import csv as _csv

    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["patient_id", "k", "action"])
        for tr in trajectories:
            H = np.array([rec.history for rec in tr.visits])
            acts = est.policy_batch(H)
            for rec, a in zip(tr.visits, acts):
                w.writerow([tr.patient_id, rec.k, repr(float(a))])
    print(f"actions written to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _value_compare_one(payload: dict) -> dict:
    """One replicate of the simulation comparison: simulate a training
    cohort, fit the DTR, Monte-Carlo evaluate it against the observed
    regime."""
    sim_cfg = SimConfig(**payload["sim_kwargs"])
    hyper = ForestHyperparams(**payload["hyper"])
    ds = simulate_cohort(sim_cfg)
    plan_spec = payload["strata"]
    plan, _ = _strata_plan(plan_spec, ds.trajectories, sim_cfg.tau)
    est = fit_dtr(ds.trajectories, plan, sim_cfg.registry(), hyper, k_max=sim_cfg.k_max)
    mc_n = payload["mc_n"]
    est_rep = mc_value(
        FunctionPolicy(est.policy_batch), sim_cfg, n=mc_n, seed=payload["eval_seed_est"]
    )
    obs_rep = mc_value(
        ObservedPolicy(sim_cfg.beta_pi), sim_cfg, n=mc_n, seed=payload["eval_seed_obs"]
    )
    return {
        "replicate": payload["replicate"],
        "estimated": est_rep.value,
        "observed": obs_rep.value,
        "censoring_rate": ds.censoring_rate,
        "iterations": est.total_iterations,
    }


def _summary_stats(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {
        "mean": float(v.mean()),
        "median": float(np.median(v)),
        "q1": float(np.quantile(v, 0.25)),
        "q3": float(np.quantile(v, 0.75)),
    }


def cmd_evaluate(cfg: dict, seed: int, jobs: int, out: Path) -> int:
    block = cfg.get("evaluate")
    if not block:
        raise ValidationFailure("config needs an 'evaluate' block")
    mode = block.get("mode", "sim-compare")
    out.mkdir(parents=True, exist_ok=True)
    if mode == "sim-compare":
        return _evaluate_sim_compare(cfg, block, seed, jobs, out)
    if mode == "mc":
        return _evaluate_mc(cfg, block, seed, out)
    if mode == "cv":
        return _evaluate_cv(cfg, block, seed, out)
    raise ValidationFailure(f"unknown evaluate mode {mode!r}")


def _evaluate_sim_compare(cfg, block, seed, jobs, out) -> int:
    replicates = int(block.get("replicates", 20))
    mc_n = int(block.get("mc_n", 10_000))
    hyper = _hyper_from_block(cfg.get("forest", {}))
    children = np.random.SeedSequence(seed).spawn(replicates)
    payloads = []
    for r in range(replicates):
        sub = children[r].spawn(3)
        sim_cfg = _sim_config_from_block(block, seed=_seed_int(sub[0]))
        payloads.append(
            {
                "replicate": r,
                "sim_kwargs": asdict(sim_cfg),
                "hyper": {**asdict(hyper), "seed": _seed_int(sub[0]) ^ 0x5F5F},
                "strata": cfg.get("strata", "single"),
                "mc_n": mc_n,
                "eval_seed_est": _seed_int(sub[1]),
                "eval_seed_obs": _seed_int(sub[2]),
            }
        )
    results = _run_pool(_value_compare_one, payloads, jobs)
    rows_path = out / "values.csv"
    import csv as _csv

    with open(rows_path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["replicate", "method", "value"])
        for res in results:
            w.writerow([res["replicate"], "estimated", repr(res["estimated"])])
            w.writerow([res["replicate"], "observed", repr(res["observed"])])
    est_vals = [r["estimated"] for r in results]
    obs_vals = [r["observed"] for r in results]
    wins = sum(e > o for e, o in zip(est_vals, obs_vals))
    report = {
        "command": "evaluate/sim-compare",
        "seed": seed,
        "replicates": replicates,
        "mc_n": mc_n,
        "estimated": _summary_stats(est_vals),
        "observed": _summary_stats(obs_vals),
        "win_fraction": wins / replicates,
        "mean_censoring": float(np.mean([r["censoring_rate"] for r in results])),
    }
    report_path = out / "report.json"
    with open(report_path, "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    write_manifest(out / "manifest.json", report, [rows_path, report_path])
    print(
        f"estimated mean {report['estimated']['mean']:.2f} vs observed "
        f"{report['observed']['mean']:.2f}; wins {wins}/{replicates}"
    )
    return EXIT_OK


def _evaluate_mc(cfg, block, seed, out) -> int:
    if "model" not in block:
        raise ValidationFailure("evaluate/mc needs a 'model' path")
    with open(block["model"]) as fh:
        est = DtrEstimate.from_json(fh.read())
    sim_cfg = _sim_config_from_block(block, seed=seed)
    rep = mc_value(
        FunctionPolicy(est.policy_batch), sim_cfg, n=int(block.get("mc_n", 10_000)), seed=seed
    )
    path = out / "report.json"
    with open(path, "w") as fh:
        json.dump(rep.to_json_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"mc value {rep.value:.3f} (se {rep.se:.3f})")
    return EXIT_OK


def _evaluate_cv(cfg, block, seed, out) -> int:
    if "data" not in block:
        raise ValidationFailure("evaluate/cv needs a 'data' path")
    tau = block.get("tau")
    k_max = block.get("k_max")
    if tau is None or k_max is None:
        raise ValidationFailure("evaluate/cv needs 'tau' and 'k_max'")
    registry = _registry_from_cfg(cfg)
    trajectories = read_visits_csv(block["data"], registry)
    folds = int(block.get("folds", 10))
    sweep = block.get("trees_sweep")
    hyper_base = cfg.get("forest", {})
    import csv as _csv

    files = []
    if sweep:
        sweep_path = out / "value_vs_trees.csv"
        with open(sweep_path, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["n_trees", "value"])
            for n_trees in sweep:
                hyper = _hyper_from_block({**hyper_base, "n_trees": int(n_trees), "seed": seed})
                rep = cross_validate(
                    trajectories, registry, tau, k_max, hyper,
                    strata=_cv_strata(cfg), folds=folds, seed=seed,
                )
                w.writerow([n_trees, repr(rep.value) if rep.value is not None else ""])
                print(f"n_trees {n_trees}: cv value {rep.value}")
        files.append(sweep_path)
    hyper = _hyper_from_block({**hyper_base, "seed": seed})
    rep = cross_validate(
        trajectories, registry, tau, k_max, hyper,
        strata=_cv_strata(cfg), folds=folds, seed=seed,
    )
    report_path = out / "report.json"
    with open(report_path, "w") as fh:
        json.dump(rep.to_json_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    folds_path = out / "per_fold.csv"
    with open(folds_path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["fold", "value"])
        for i, v in enumerate(rep.per_fold):
            w.writerow([i, repr(v)])
    files += [report_path, folds_path]
    write_manifest(out / "manifest.json", {"command": "evaluate/cv", "seed": seed}, files)
    print(f"cv value {rep.value} over {len(rep.per_fold)} usable folds")
    return EXIT_OK


def _cv_strata(cfg):
    spec = cfg.get("strata", "single")
    if isinstance(spec, dict):
        return tuple(spec["cutpoints"])
    return spec


# ---------------------------------------------------------------------------
# reproduce-sim


def _reproduce_one(payload: dict) -> dict:
    sim_cfg = SimConfig(**payload["sim_kwargs"])
    hyper = ForestHyperparams(**payload["hyper"])
    ds = simulate_cohort(sim_cfg)
    registry = sim_cfg.registry()
    out: dict = {"replicate": payload["replicate"], "censoring_rate": ds.censoring_rate}

    plan1 = StrataPlan(tau=sim_cfg.tau)
    est1 = fit_dtr(ds.trajectories, plan1, registry, hyper, k_max=sim_cfg.k_max)
    out["estimated_1strata"] = mc_value(
        FunctionPolicy(est1.policy_batch), sim_cfg, n=payload["mc_n"],
        seed=payload["eval_seed_est1"],
    ).value

    cut = choose_cutpoint(ds.trajectories, sim_cfg.tau)
    plan2 = StrataPlan(tau=sim_cfg.tau, cutpoints=() if cut is None else (cut,))
    est2 = fit_dtr(ds.trajectories, plan2, registry, hyper, k_max=sim_cfg.k_max)
    out["estimated_2strata"] = mc_value(
        FunctionPolicy(est2.policy_batch), sim_cfg, n=payload["mc_n"],
        seed=payload["eval_seed_est2"],
    ).value
    out["cutpoint"] = cut

    out["observed"] = mc_value(
        ObservedPolicy(sim_cfg.beta_pi), sim_cfg, n=payload["mc_n"],
        seed=payload["eval_seed_obs"],
    ).value
    return out


def cmd_reproduce_sim(
    preset: str, cfg: dict, seed: int, jobs: int, out: Path, replicates: int | None
) -> int:
    if preset not in PRESETS:
        raise ValidationFailure(
            f"unknown preset {preset!r}; choose from {sorted(PRESETS)}"
        )
    block = cfg.get("reproduce", {})
    replicates = replicates or int(block.get("replicates", 20))
    mc_n = int(block.get("mc_n", 10_000))
    hyper = _hyper_from_block(cfg.get("forest", {}))
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(replicates)
    payloads = []
    for r in range(replicates):
        sub = children[r].spawn(4)
        sim_cfg = preset_config(preset, seed=_seed_int(sub[0]))
        payloads.append(
            {
                "replicate": r,
                "sim_kwargs": asdict(sim_cfg),
                "hyper": {**asdict(hyper), "seed": _seed_int(sub[0]) ^ 0xA5A5},
                "mc_n": mc_n,
                "eval_seed_est1": _seed_int(sub[1]),
                "eval_seed_est2": _seed_int(sub[2]),
                "eval_seed_obs": _seed_int(sub[3]),
            }
        )
    results = _run_pool(_reproduce_one, payloads, jobs)

    import csv as _csv

    rows_path = out / "values.csv"
    with open(rows_path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["replicate", "method", "value"])
        for res in results:
            for method in ("estimated_1strata", "estimated_2strata", "observed"):
                w.writerow([res["replicate"], method, repr(res[method])])
    summary_path = out / "summary.csv"
    summary = {}
    with open(summary_path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["method", "mean", "median", "q1", "q3"])
        for method in ("estimated_1strata", "estimated_2strata", "observed"):
            stats = _summary_stats([res[method] for res in results])
            summary[method] = stats
            w.writerow(
                [method, repr(stats["mean"]), repr(stats["median"]), repr(stats["q1"]),
                 repr(stats["q3"])]
            )
    manifest = {
        "command": "reproduce-sim",
        "preset": preset,
        "seed": seed,
        "replicates": replicates,
        "mc_n": mc_n,
        "mean_censoring": float(np.mean([r["censoring_rate"] for r in results])),
        "summary": summary,
    }
    write_manifest(out / "manifest.json", manifest, [rows_path, summary_path])
    for method, stats in summary.items():
        print(f"{method}: mean {stats['mean']:.2f} median {stats['median']:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="grsf-dtr",
        description="Indefinite-horizon DTR estimation with generalized "
        "random survival forests",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "fit", "predict", "evaluate"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--out", default=None)
    rp = sub.add_parser("reproduce-sim")
    rp.add_argument("--preset", required=True)
    rp.add_argument("--config", default=None)
    rp.add_argument("--seed", type=int, default=None)
    rp.add_argument("--jobs", type=int, default=1)
    rp.add_argument("--out", default=None)
    rp.add_argument("--replicates", type=int, default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else {}
        seed = args.seed if args.seed is not None else cfg.get("seed")
        if seed is None:
            raise ValidationFailure(
                "a master seed is required (--seed or 'seed' in the config)"
            )
        out = Path(args.out or cfg.get("out", "runs"))
        jobs = args.jobs or int(cfg.get("jobs", 1))
        if args.command == "simulate":
            return cmd_simulate(cfg, seed, jobs, out)
        if args.command == "fit":
            return cmd_fit(cfg, seed, jobs, out)
        if args.command == "predict":
            return cmd_predict(cfg, seed, jobs, out)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, seed, jobs, out)
        if args.command == "reproduce-sim":
            return cmd_reproduce_sim(args.preset, cfg, seed, jobs, out, args.replicates)
        raise ValidationFailure(f"unknown command {args.command}")
    except (ValidationFailure, EngineError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ForestFitError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
