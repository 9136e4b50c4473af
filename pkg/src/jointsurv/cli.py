"""Command-line entry point: ``jointsurv <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, metrics
from .diagnostics import summarize
from .dynpred import DrawSet, predict_survival, predict_survival_plugin
from .mcmc import McmcConfig, SamplerError, fit_joint
from .model import PreconditionError, RejectedInputError
from .simulate import CalibrationError, SimConfig, simulate_cohort, with_calibrated_hazard
from .study import (
    StudyConfig,
    convergence_table,
    evaluation_horizons,
    metric_table,
    predicted_curves,
    recovery_tables,
    run_study,
)
from .two_stage import fit_two_stage

log = logging.getLogger("jointsurv")

# key: (parser, default); per-command overrides below
SETTINGS = {
    "seed": (int, 0),
    "out": (str, None),
    "data": (str, None),
    "fit": (str, None),
    "joint": (str, None),
    "two_stage": (str, None),
    "predictions": (str, None),
    "n_patients": (int, 500),
    "max_follow_up": (float, 5.0),
    "target_event_fraction": (float, None),
    "chains": (int, 3),
    "iters": (int, 5000),
    "burnin": (int, 1000),
    "thin": (int, 1),
    "n_intervals": (int, 5),
    "replications": (int, 50),
    "landmarks": ("floats", None),
    "horizons": ("floats", None),
    "ids": ("strs", None),
    "predict_draws": (int, 300),
    "workers": (int, 1),
}

COMMAND_DEFAULTS = {
    "predict": {"landmarks": [1.0, 2.0, 3.0]},
    "evaluate": {"landmarks": [0.0], "horizons": [1.0, 3.0, 5.0]},
    "replicate": {"n_patients": 300, "iters": 2000, "burnin": 500, "landmarks": [0.0],
                  "horizons": [1.0, 3.0, 5.0]},
}

COMMAND_KEYS = {
    "simulate": ["seed", "out", "n_patients", "max_follow_up", "target_event_fraction"],
    "fit": ["seed", "out", "data", "chains", "iters", "burnin", "thin", "n_intervals"],
    "fit-two-stage": ["seed", "out", "data", "chains", "iters", "burnin", "thin", "n_intervals"],
    "predict": ["out", "fit", "data", "landmarks", "horizons", "ids", "predict_draws"],
    "evaluate": ["out", "joint", "two_stage", "predictions", "data", "landmarks", "horizons", "predict_draws"],
    "replicate": ["seed", "out", "n_patients", "max_follow_up", "target_event_fraction", "chains", "iters",
                  "burnin", "thin", "n_intervals", "replications", "landmarks", "horizons", "predict_draws",
                  "workers"],
    "diagnose": ["out", "fit"],
}


class UsageError(Exception):
    pass


def _parse_value(key, text):
    kind = SETTINGS[key][0]
    try:
        if kind == "floats":
            return [float(x) for x in str(text).split(",") if x.strip()]
        if kind == "strs":
            return [x.strip() for x in str(text).split(",") if x.strip()]
        return kind(text)
    except ValueError:
        raise UsageError(f"bad value for {key}: {text!r}") from None


def resolve(command: str, args: argparse.Namespace) -> dict:
    keys = COMMAND_KEYS[command]
    out = {k: SETTINGS[k][1] for k in keys}
    out.update({k: v for k, v in COMMAND_DEFAULTS.get(command, {}).items() if k in keys})
    if args.config:
        for k, v in io.read_config(args.config).items():
            if k not in keys:
                raise UsageError(f"config key {k!r} does not apply to {command}")
            out[k] = _parse_value(k, v)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = _parse_value(k, v)
    if out.get("out") is None:
        raise UsageError("--out is required")
    return out


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _mcmc_config(cfg) -> McmcConfig:
    return McmcConfig(n_chains=cfg["chains"], n_iter=cfg["iters"], burn_in=cfg["burnin"], thin=cfg["thin"],
                      seed=cfg["seed"], n_intervals=cfg["n_intervals"])


def _sim_config(cfg) -> SimConfig:
    sim = SimConfig(n_patients=cfg["n_patients"], max_follow_up=cfg["max_follow_up"], seed=cfg["seed"])
    if cfg.get("target_event_fraction") is not None:
        sim = with_calibrated_hazard(sim, cfg["target_event_fraction"])
    return sim


def _finish(command, cfg):
    io.write_config(Path(cfg["out"]) / "config.txt", {"command": command, **{k: v for k, v in cfg.items() if v is not None}})


def cmd_simulate(cfg):
    cohort, truth = simulate_cohort(_sim_config(cfg))
    io.write_cohort(cohort, cfg["out"])
    io.write_truth(truth, cfg["out"])
    print(f"simulated {len(cohort)} patients, censoring fraction {1 - cohort.event.mean():.3f}")


def cmd_fit(cfg):
    _require(cfg, "data")
    cohort = io.load_cohort_dir(cfg["data"])
    fit = fit_joint(cohort, _mcmc_config(cfg))
    out = Path(cfg["out"])
    io.write_json(out / "model.json", io.write_fit(fit, out))
    io.write_json(out / "diagnostics.json", summarize(fit))
    print(f"wrote {len(fit.chains)} chains to {out}")


def cmd_fit_two_stage(cfg):
    _require(cfg, "data")
    cohort = io.load_cohort_dir(cfg["data"])
    ts = fit_two_stage(cohort, _mcmc_config(cfg))
    out = Path(cfg["out"])
    meta = {
        "tag": "two_stage",
        "stage1": io.write_fit(ts.longitudinal, out, prefix="stage1_chain"),
        "stage2": io.write_fit(ts.survival, out, prefix="stage2_chain"),
    }
    io.write_rows(out / "b_hat.csv", ["id", "b_hat"], zip(cohort.ids, map(float, ts.b_hat)))
    io.write_json(out / "model.json", meta)
    io.write_json(out / "diagnostics.json", {"tag": "two_stage", "stage1": summarize(ts.longitudinal),
                                              "stage2": summarize(ts.survival)})
    print(f"wrote two-stage fit to {out}")


def _load_model(fit_dir):
    fit_dir = Path(fit_dir)
    meta_path = fit_dir / "model.json"
    if not meta_path.exists():
        raise UsageError(f"{fit_dir} has no model.json; run fit or fit-two-stage first")
    meta = json.loads(meta_path.read_text())
    if meta["tag"] == "two_stage":
        from .two_stage import TwoStageFit
        s1 = io.read_fit(fit_dir, meta["stage1"])
        s2 = io.read_fit(fit_dir, meta["stage2"])
        return "two_stage", TwoStageFit(s1, s2, None)
    return "joint", io.read_fit(fit_dir, meta)


def _default_horizons(t, end, n=21):
    return np.linspace(t, end, n)


def cmd_predict(cfg):
    _require(cfg, "fit", "data")
    kind, model = _load_model(cfg["fit"])
    cohort = io.load_cohort_dir(cfg["data"])
    wanted = set(cfg["ids"]) if cfg.get("ids") else None
    if kind == "joint":
        draws = DrawSet.from_params(model.param_rows(cfg["predict_draws"]))
    else:
        stage1 = DrawSet.from_params(model.longitudinal.param_rows(cfg["predict_draws"]))
        stage2 = DrawSet.from_params(model.survival.param_rows(cfg["predict_draws"]))
    out = Path(cfg["out"])
    written = 0
    for t in cfg["landmarks"]:
        horizons = cfg["horizons"] or _default_horizons(t, max(cohort.max_time, t))
        horizons = [h for h in horizons if h >= t]
        for patient in cohort:
            if wanted is not None and patient.id not in wanted:
                continue
            if patient.event_time <= t:
                continue
            if kind == "joint":
                pred = predict_survival(draws, patient, t, horizons)
            else:
                pred = predict_survival_plugin(stage1, stage2, patient, t, horizons)
            io.write_prediction(out / f"pred_{patient.id}_t{t:g}.csv", pred)
            written += 1
    print(f"wrote {written} prediction files to {out}")


def _evaluate_curves(name, curves, horizons, cohort, t, rows, report_at):
    G = metrics.km_censoring_survival(cohort)
    at_risk = cohort.event_time > t
    col = {float(h): j for j, h in enumerate(horizons)}
    for u in report_at:
        if u <= t or float(u) not in col:
            continue
        s = np.where(at_risk, curves[:, col[float(u)]], 1.0)
        auc = metrics.time_dependent_auc(1.0 - s, cohort, t, u, G)
        rows.append({"model": name, "landmark": float(t), "metric": f"auc_{u:g}",
                     "value": float("nan") if isinstance(auc, metrics.Undefined) else auc})
        rows.append({"model": name, "landmark": float(t), "metric": f"brier_{u:g}",
                     "value": metrics.brier_score(s, cohort, t, u, G)})
    grid = metrics.brier_grid(t, cohort.max_time)
    if all(float(u) in col for u in grid):
        c = np.where(at_risk[:, None], curves[:, [col[float(u)] for u in grid]], 1.0)
        rows.append({"model": name, "landmark": float(t), "metric": "ibs",
                     "value": metrics.integrated_brier(c, cohort, t, grid, G)})


def cmd_evaluate(cfg):
    _require(cfg, "data")
    if not (cfg.get("joint") or cfg.get("two_stage") or cfg.get("predictions")):
        raise UsageError("give at least one of --joint, --two-stage, --predictions")
    cohort = io.load_cohort_dir(cfg["data"])
    rows = []
    for t in cfg["landmarks"]:
        if cfg.get("predictions"):
            preds = io.read_predictions(cfg["predictions"])
            horizons = np.array(sorted({h for p in preds.values() for h in p}))
            curves = np.ones((len(cohort), horizons.size))
            for i, pid in enumerate(cohort.ids):
                if pid in preds:
                    curves[i] = [preds[pid].get(float(h), np.nan) for h in horizons]
            if np.isnan(curves).any():
                raise UsageError("predictions file does not cover every patient at every horizon")
            _evaluate_curves("predictions", curves, horizons, cohort, t, rows, cfg["horizons"])
        scfg = StudyConfig(landmark=t, auc_horizons=tuple(cfg["horizons"]), brier_horizon=cfg["horizons"][0],
                           predict_draws=cfg["predict_draws"])
        horizons = np.unique(np.concatenate((evaluation_horizons(scfg, cohort.max_time), cfg["horizons"])))
        for key, name in (("joint", "joint"), ("two_stage", "two_stage")):
            if cfg.get(key):
                kind, model = _load_model(cfg[key])
                curves = predicted_curves(kind, model, cohort, t, horizons, cfg["predict_draws"])
                _evaluate_curves(name, curves, horizons, cohort, t, rows, cfg["horizons"])
    out = Path(cfg["out"])
    io.write_dicts(out / "metrics.csv", rows)
    io.write_json(out / "metrics.json", rows)
    for r in rows:
        print(f"{r['model']:>12} t={r['landmark']:g} {r['metric']:>10} {r['value']:.4f}")


def cmd_replicate(cfg):
    sim = _sim_config(cfg)
    mc = _mcmc_config(cfg)
    scfg = StudyConfig(replications=cfg["replications"], sim=sim, mcmc=mc, landmark=cfg["landmarks"][0],
                       auc_horizons=tuple(cfg["horizons"]), brier_horizon=cfg["horizons"][len(cfg["horizons"]) // 2],
                       predict_draws=cfg["predict_draws"], seed=cfg["seed"], workers=cfg["workers"])
    results = run_study(scfg)
    out = Path(cfg["out"])
    tables = recovery_tables(results, sim)
    recovery = [{"model": k, **row} for k, rows in tables.items() for row in rows]
    accuracy = metric_table(results)
    conv = convergence_table(results)
    io.write_dicts(out / "recovery.csv", recovery)
    io.write_dicts(out / "accuracy.csv", accuracy)
    io.write_dicts(out / "convergence.csv", conv)
    io.write_json(out / "summary.json", {"recovery": recovery, "accuracy": accuracy, "convergence": conv,
                                         "censoring": float(np.mean([r["censoring"] for r in results]))})
    io.write_json(out / "replications.json", [_plain(r) for r in results])
    for row in recovery:
        print(f"{row['model']:>9} {row['parameter']:>8} true={row['true_value']:.3f} "
              f"mean={row['posterior_mean']:.3f} bias={row['bias']:+.3f} coverage={row['coverage']:.2f}")
    for row in accuracy:
        print(f"{row['metric']:>8} joint={row['joint']:.3f} two_stage={row['two_stage']:.3f}")


def _plain(result: dict) -> dict:
    def conv(v):
        if isinstance(v, metrics.ParamSummary):
            return {"mean": v.mean, "lower95": v.lower, "upper95": v.upper}
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, list):
            return [conv(x) for x in v]
        return v
    return conv(result)


def cmd_diagnose(cfg):
    _require(cfg, "fit")
    kind, model = _load_model(cfg["fit"])
    if kind == "joint":
        report = summarize(model)
    else:
        report = {"tag": "two_stage", "stage1": summarize(model.longitudinal), "stage2": summarize(model.survival)}
    io.write_json(Path(cfg["out"]) / "diagnostics.json", report)
    sections = [report] if kind == "joint" else [report["stage1"], report["stage2"]]
    for sec in sections:
        for name, d in sec["parameters"].items():
            print(f"{name:>14} rhat={_fmt(d['rhat'])} ess={_fmt(d['ess'])}")


def _fmt(v):
    return f"{v:.3f}" if isinstance(v, float) else str(v)


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "fit-two-stage": cmd_fit_two_stage,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "replicate": cmd_replicate,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointsurv", description="Bayesian joint longitudinal-survival models")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file; flags override it")
        for key in COMMAND_KEYS[name]:
            p.add_argument("--" + key.replace("_", "-"), dest=key)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve(args.command, args)
        COMMANDS[args.command](cfg)
        _finish(args.command, cfg)
    except (UsageError, RejectedInputError, PreconditionError, SamplerError, CalibrationError,
            FileNotFoundError) as exc:
        print(f"jointsurv {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
