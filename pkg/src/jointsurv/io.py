"""CSV/JSON serialization for cohorts, draws, predictions and reports."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .mcmc import ChainDraws, FitResult
from .model import Cohort, PatientRecord, RejectedInputError

LONGITUDINAL_FILE = "longitudinal.csv"
SURVIVAL_FILE = "survival.csv"
TRUTH_FILE = "truth.csv"


class CohortParseError(RejectedInputError):
    def __init__(self, path, row, message):
        self.path = str(path)
        self.row = row
        super().__init__(f"{self.path}, row {row}: {message}")


def _num(x) -> str:
    """Shortest repr that round-trips exactly."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_dicts(path, rows: list[dict]):
    if not rows:
        write_rows(path, [], [])
        return
    header = list(rows[0])
    write_rows(path, header, ([r[k] for k in header] for r in rows))


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_cohort(cohort: Cohort, out_dir):
    out_dir = Path(out_dir)
    write_rows(out_dir / LONGITUDINAL_FILE, ["id", "time", "value"],
               ((p.id, float(t), float(v)) for p in cohort for t, v in zip(p.obs_times, p.obs_values)))
    zcols = [f"z{j + 1}" for j in range(cohort.n_covariates)]
    write_rows(out_dir / SURVIVAL_FILE, ["id", "event_time", "event"] + zcols,
               ([p.id, p.event_time, int(p.event_indicator)] + [float(z) for z in p.covariates] for p in cohort))


def write_truth(truth, out_dir):
    write_rows(Path(out_dir) / TRUTH_FILE, ["id", "b_true", "t_star"],
               zip(truth.ids, map(float, truth.b), map(float, truth.t_star)))


def _float(path, row, name, text):
    try:
        x = float(text)
    except (TypeError, ValueError):
        raise CohortParseError(path, row, f"{name} {text!r} is not a number") from None
    if not math.isfinite(x):
        raise CohortParseError(path, row, f"{name} is not finite")
    return x


def _read(path):
    path = Path(path)
    if not path.exists():
        raise CohortParseError(path, 0, "file not found")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        # data rows are numbered from 2; row 1 is the header
        return reader.fieldnames or [], [(i + 2, r) for i, r in enumerate(reader)]


def load_cohort(longitudinal_csv, survival_csv) -> Cohort:
    """Join long-format measurements with one survival row per patient.

    Patients in the survival file without measurement rows are kept with an
    empty history; measurement rows for unknown ids are errors.
    """
    s_fields, s_rows = _read(survival_csv)
    for col in ("id", "event_time", "event"):
        if col not in s_fields:
            raise CohortParseError(survival_csv, 1, f"missing column {col!r}")
    zcols = sorted((c for c in s_fields if c.startswith("z") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    surv = {}
    order = []
    for row, r in s_rows:
        pid = r["id"]
        if not pid:
            raise CohortParseError(survival_csv, row, "empty id")
        if pid in surv:
            raise CohortParseError(survival_csv, row, f"duplicate id {pid!r}")
        t = _float(survival_csv, row, "event_time", r["event_time"])
        if not t > 0:
            raise CohortParseError(survival_csv, row, "event_time must be positive")
        if r["event"] not in ("0", "1"):
            raise CohortParseError(survival_csv, row, f"event must be 0 or 1, got {r['event']!r}")
        z = [_float(survival_csv, row, c, r[c]) for c in zcols]
        surv[pid] = (t, r["event"] == "1", z)
        order.append(pid)

    l_fields, l_rows = _read(longitudinal_csv)
    for col in ("id", "time", "value"):
        if col not in l_fields:
            raise CohortParseError(longitudinal_csv, 1, f"missing column {col!r}")
    obs = {pid: ([], []) for pid in order}
    for row, r in l_rows:
        pid = r["id"]
        if pid not in surv:
            raise CohortParseError(longitudinal_csv, row, f"id {pid!r} has no survival row")
        t = _float(longitudinal_csv, row, "time", r["time"])
        v = _float(longitudinal_csv, row, "value", r["value"])
        times, values = obs[pid]
        if t < 0:
            raise CohortParseError(longitudinal_csv, row, "negative measurement time")
        if times and t <= times[-1]:
            raise CohortParseError(longitudinal_csv, row, f"time {t} not after previous time {times[-1]} for id {pid!r}")
        if t > surv[pid][0]:
            raise CohortParseError(longitudinal_csv, row, f"measurement at {t} after event_time {surv[pid][0]} for id {pid!r}")
        times.append(t)
        values.append(v)
    return Cohort([PatientRecord(pid, obs[pid][0], obs[pid][1], *surv[pid]) for pid in order])


def load_cohort_dir(data_dir) -> Cohort:
    data_dir = Path(data_dir)
    return load_cohort(data_dir / LONGITUDINAL_FILE, data_dir / SURVIVAL_FILE)


# -- draws ----------------------------------------------------------------------

def write_fit(fit: FitResult, out_dir, prefix: str = "chain"):
    out_dir = Path(out_dir)
    for k, ch in enumerate(fit.chains, start=1):
        write_rows(out_dir / f"{prefix}_{k}.csv", ch.names, (list(map(float, r)) for r in ch.param_draws))
        if ch.b_draws is not None:
            write_rows(out_dir / f"b_{prefix}_{k}.csv", fit.ids, (list(map(float, r)) for r in ch.b_draws))
    return {
        "prefix": prefix,
        "tag": fit.tag,
        "n_chains": len(fit.chains),
        "cuts": [float(c) for c in fit.cuts],
        "n_covariates": fit.chains[0].p,
        "names": list(fit.names),
        "ids": list(fit.ids),
        "accept_rates": [c.accept_rates for c in fit.chains],
    }


def _read_matrix(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(x) for x in r] for r in reader]
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def read_fit(fit_dir, meta: dict) -> FitResult:
    fit_dir = Path(fit_dir)
    chains = []
    for k in range(1, meta["n_chains"] + 1):
        names, draws = _read_matrix(fit_dir / f"{meta['prefix']}_{k}.csv")
        bpath = fit_dir / f"b_{meta['prefix']}_{k}.csv"
        b = _read_matrix(bpath)[1] if bpath.exists() else None
        chains.append(ChainDraws(names, draws, b, meta["accept_rates"][k - 1], True,
                                 np.asarray(meta["cuts"], dtype=float), meta["n_covariates"]))
    return FitResult(chains, np.asarray(meta["cuts"], dtype=float), list(meta["ids"]), meta["tag"])


def write_prediction(path, pred):
    write_rows(path, ["horizon", "mean", "lower95", "upper95"],
               zip(map(float, pred.horizons), map(float, pred.mean_survival),
                   map(float, pred.lower95), map(float, pred.upper95)))


def read_predictions(path):
    """Long-format predictions: columns id, horizon, survival."""
    out = {}
    with open(path, newline="") as fh:
        for row, r in enumerate(csv.DictReader(fh), start=2):
            try:
                out.setdefault(r["id"], {})[float(r["horizon"])] = float(r["survival"])
            except (KeyError, ValueError):
                raise CohortParseError(path, row, "expected columns id, horizon, survival") from None
    return out


# -- flat key=value config ---------------------------------------------------------

def read_config(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RejectedInputError(f"{path}, line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config(path, resolved: dict):
    lines = [f"{k} = {_config_value(v)}" for k, v in sorted(resolved.items())]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def _config_value(v):
    if isinstance(v, (list, tuple)):
        return ",".join(_config_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)
