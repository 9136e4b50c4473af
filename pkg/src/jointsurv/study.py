"""The simulation study: repeated simulate -> fit (joint and two-stage) -> evaluate."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from .diagnostics import Degenerate, gelman_rubin, multi_chain_ess
from .dynpred import DrawSet, predict_survival, predict_survival_plugin
from .mcmc import FitResult, McmcConfig, fit_joint
from .simulate import SimConfig, simulate_cohort
from .two_stage import TwoStageFit, fit_two_stage

log = logging.getLogger(__name__)

RECOVERY_PARAMS = ("beta0", "beta1", "gamma_1", "alpha", "sigma2", "tau2")


@dataclass(frozen=True)
class StudyConfig:
    replications: int = 50
    sim: SimConfig = field(default_factory=lambda: SimConfig(n_patients=300))
    mcmc: McmcConfig = field(default_factory=lambda: McmcConfig(n_iter=2000, burn_in=500))
    landmark: float = 0.0
    auc_horizons: tuple = (1.0, 3.0, 5.0)
    brier_horizon: float = 3.0
    brier_points: int = 21
    # posterior draws used per prediction (evenly spaced over the pooled chains)
    predict_draws: int = 300
    seed: int = 0
    workers: int = 1


def truth_table(sim: SimConfig) -> dict:
    tp = sim.true_params
    out = {"beta0": tp.beta0, "beta1": tp.beta1}
    out.update({f"gamma_{j + 1}": g for j, g in enumerate(tp.gamma)})
    out.update({"alpha": tp.alpha, "sigma2": tp.sigma2, "tau2": tp.tau2})
    return out


def replication_seeds(seed: int, replications: int):
    """(training sim, validation sim, mcmc) integer seeds per replication."""
    out = []
    for ss in np.random.SeedSequence(seed).spawn(replications):
        a, b, c = (int(x) for x in ss.generate_state(3, dtype=np.uint64))
        out.append((a, b, c))
    return out


def _natural_draws(fit: FitResult, name: str) -> np.ndarray:
    return fit.natural(name)


def joint_summaries(fit: FitResult, names) -> dict:
    return {n: metrics.summarize_draws(_natural_draws(fit, n)) for n in names}


def two_stage_summaries(ts: TwoStageFit, names) -> dict:
    out = {}
    for n in names:
        src = ts.longitudinal if n in ("beta0", "beta1", "sigma2", "tau2") else ts.survival
        out[n] = metrics.summarize_draws(_natural_draws(src, n))
    return out


def convergence(fit: FitResult, names) -> dict:
    out = {}
    for n in names:
        col = "log_" + n if n in ("sigma2", "tau2") else n
        per_chain = [c.column(col) for c in fit.chains]
        rhat = gelman_rubin(per_chain)
        ess = multi_chain_ess(per_chain)
        out[n] = {
            "rhat": float("inf") if isinstance(rhat, Degenerate) else rhat,
            "ess": 0.0 if isinstance(ess, Degenerate) else ess,
        }
    return out


def evaluation_horizons(cfg: StudyConfig, end: float) -> np.ndarray:
    grid = metrics.brier_grid(cfg.landmark, end, cfg.brier_points)
    return np.unique(np.concatenate((grid, cfg.auc_horizons, [cfg.brier_horizon])))


def predicted_curves(kind: str, model, cohort, t: float, horizons, n_draws: int) -> np.ndarray:
    """Mean predicted survival for every patient at risk at t; NaN rows otherwise."""
    out = np.full((len(cohort), len(horizons)), np.nan)
    if kind == "joint":
        draws = DrawSet.from_params(model.param_rows(n_draws))
    else:
        stage1 = DrawSet.from_params(model.longitudinal.param_rows(n_draws))
        stage2 = DrawSet.from_params(model.survival.param_rows(n_draws))
    for i, patient in enumerate(cohort):
        if patient.event_time <= t:
            continue
        if kind == "joint":
            pred = predict_survival(draws, patient, t, horizons)
        else:
            pred = predict_survival_plugin(stage1, stage2, patient, t, horizons)
        out[i] = pred.mean_survival
    return out


def evaluate_predictions(curves: np.ndarray, horizons, cohort, cfg: StudyConfig) -> dict:
    t = cfg.landmark
    G = metrics.km_censoring_survival(cohort)
    at_risk = cohort.event_time > t
    curves = np.where(at_risk[:, None], curves, 1.0)
    horizons = np.asarray(horizons)
    col = {float(h): j for j, h in enumerate(horizons)}
    out = {}
    for u in cfg.auc_horizons:
        risk = 1.0 - curves[:, col[float(u)]]
        auc = metrics.time_dependent_auc(risk, cohort, t, u, G)
        out[f"auc_{u:g}"] = float("nan") if isinstance(auc, metrics.Undefined) else auc
    grid = metrics.brier_grid(t, cohort.max_time, cfg.brier_points)
    cols = [col[float(u)] for u in grid]
    out["ibs"] = metrics.integrated_brier(curves[:, cols], cohort, t, grid, G)
    out[f"brier_{cfg.brier_horizon:g}"] = metrics.brier_score(
        curves[:, col[float(cfg.brier_horizon)]], cohort, t, cfg.brier_horizon, G)
    return out


def run_replication(cfg: StudyConfig, index: int) -> dict:
    sim_seed, val_seed, mcmc_seed = replication_seeds(cfg.seed, cfg.replications)[index]
    train, _ = simulate_cohort(replace(cfg.sim, seed=sim_seed))
    valid, _ = simulate_cohort(replace(cfg.sim, seed=val_seed))
    mcfg = replace(cfg.mcmc, seed=mcmc_seed, max_follow_up=cfg.sim.max_follow_up)
    names = list(truth_table(cfg.sim))
    joint = fit_joint(train, mcfg)
    ts = fit_two_stage(train, mcfg)
    horizons = evaluation_horizons(cfg, cfg.sim.max_follow_up)
    result = {
        "index": index,
        "censoring": float(1.0 - train.event.mean()),
        "joint": joint_summaries(joint, names),
        "two_stage": two_stage_summaries(ts, names),
        "convergence": convergence(joint, names),
        "accept_rates": [c.accept_rates for c in joint.chains],
    }
    for kind, model in (("joint", joint), ("two_stage", ts)):
        curves = predicted_curves(kind, model, valid, cfg.landmark, horizons, cfg.predict_draws)
        result[f"{kind}_metrics"] = evaluate_predictions(curves, horizons, valid, cfg)
    log.info("replication %d done", index)
    return result


def _run_one(args):
    return run_replication(*args)


def run_study(cfg: StudyConfig) -> list[dict]:
    jobs = [(cfg, i) for i in range(cfg.replications)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


def recovery_tables(results: list[dict], sim: SimConfig) -> dict:
    truth = truth_table(sim)
    return {kind: metrics.recovery_report([r[kind] for r in results], truth)
            for kind in ("joint", "two_stage")}


def metric_table(results: list[dict]) -> list[dict]:
    keys = list(results[0]["joint_metrics"])
    rows = []
    for k in keys:
        rows.append({
            "metric": k,
            "joint": float(np.nanmean([r["joint_metrics"][k] for r in results])),
            "two_stage": float(np.nanmean([r["two_stage_metrics"][k] for r in results])),
        })
    return rows


def convergence_table(results: list[dict]) -> list[dict]:
    names = list(results[0]["convergence"])
    return [{
        "parameter": n,
        "max_rhat": max(r["convergence"][n]["rhat"] for r in results),
        "min_ess": min(r["convergence"][n]["ess"] for r in results),
    } for n in names]
