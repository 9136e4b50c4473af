"""Synthetic cohorts from the joint model's data-generating process."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (
    Cohort,
    HazardSpec,
    JointParams,
    PatientRecord,
    RejectedInputError,
)

#: Constant baseline level giving a 0.675 event fraction over 5 years under the
#: default truth (output of ``calibrate_baseline_hazard(0.675, SimConfig())``).
DEFAULT_BASELINE_LEVEL = 0.26083067334688514

CALIBRATION_SEED = 20_241_017
CALIBRATION_PATIENTS = 10_000


class CalibrationError(RuntimeError):
    pass


def default_truth(level: float = DEFAULT_BASELINE_LEVEL) -> JointParams:
    return JointParams(
        beta0=2.0, beta1=0.5, gamma=np.array([0.75]), alpha=1.0,
        sigma2=0.25, tau2=0.50, hazard=HazardSpec([], [level]),
    )


def _default_grid():
    return tuple(0.5 * k for k in range(11))


@dataclass(frozen=True)
class SimConfig:
    n_patients: int = 500
    max_follow_up: float = 5.0
    true_params: JointParams = field(default_factory=default_truth)
    visit_grid: tuple = field(default_factory=_default_grid)
    visit_jitter: float = 0.15
    # "normal" or "bernoulli:<p>", one entry per covariate
    covariate_spec: tuple = ("normal",)
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise RejectedInputError("n_patients must be >= 1")
        grid = np.asarray(self.visit_grid, dtype=float)
        if grid.size and (np.any(np.diff(grid) <= 0) or grid[0] < 0):
            raise RejectedInputError("visit_grid must be nonnegative and increasing")
        if grid.size > 1 and not self.visit_jitter < 0.5 * np.diff(grid).min():
            raise RejectedInputError("visit_jitter must be below half the minimum grid spacing")
        if self.visit_jitter < 0:
            raise RejectedInputError("visit_jitter must be nonnegative")
        if len(self.covariate_spec) != self.true_params.gamma.size:
            raise RejectedInputError("covariate_spec length must match gamma")
        for tag in self.covariate_spec:
            _parse_covariate(tag)


def _parse_covariate(tag: str):
    if tag == "normal":
        return ("normal", None)
    if tag.startswith("bernoulli:"):
        p = float(tag.split(":", 1)[1])
        if not 0 <= p <= 1:
            raise RejectedInputError(f"bad bernoulli probability in {tag!r}")
        return ("bernoulli", p)
    raise RejectedInputError(f"unknown covariate distribution {tag!r}")


def _draw_covariates(rng: np.random.Generator, spec, size=None) -> np.ndarray:
    cols = []
    for tag in spec:
        kind, p = _parse_covariate(tag)
        if kind == "normal":
            cols.append(rng.standard_normal(size))
        else:
            cols.append(np.asarray(rng.random(size) < p, dtype=float))
    if size is None:
        return np.array(cols, dtype=float)
    return np.column_stack(cols) if cols else np.zeros((size, 0))


def invert_survival(hazard: HazardSpec, eta, u01):
    """Smallest t with exp(eta) * H0(t) = -log(u01). Vectorized over eta/u01."""
    u01 = np.asarray(u01, dtype=float)
    if np.any((u01 <= 0) | (u01 >= 1)):
        raise RejectedInputError("u01 must lie in (0, 1)")
    target = -np.log(u01) * np.exp(-np.asarray(eta, dtype=float))
    lo, hi = hazard.lower, hazard.upper
    # cumulative hazard at each interval's left boundary
    width = np.where(np.isfinite(hi), hi - lo, 0.0)
    start = np.concatenate(([0.0], np.cumsum(hazard.levels[:-1] * width[:-1])))
    k = np.searchsorted(start, target, side="right") - 1
    out = lo[k] + (target - start[k]) / hazard.levels[k]
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class Truth:
    ids: list
    b: np.ndarray
    t_star: np.ndarray


def _simulate_patient(rng: np.random.Generator, pid: str, config: SimConfig):
    par = config.true_params
    z = _draw_covariates(rng, config.covariate_spec)
    b = math.sqrt(par.tau2) * rng.standard_normal()
    eta = float(z @ par.gamma) + par.alpha * b
    # 1 - U keeps the argument inside (0, 1]
    u = 1.0 - rng.random()
    t_star = invert_survival(par.hazard, eta, u) if u < 1.0 else 0.0
    t_obs = min(t_star, config.max_follow_up)
    event = t_star <= config.max_follow_up
    grid = np.asarray(config.visit_grid, dtype=float)
    jitter = rng.uniform(-config.visit_jitter, config.visit_jitter, size=grid.size)
    times = np.maximum(grid + jitter, 0.0)
    noise = math.sqrt(par.sigma2) * rng.standard_normal(grid.size)
    keep = times <= t_obs
    values = par.beta0 + par.beta1 * times + b + noise
    if t_obs <= 0:
        # a zero draw is measure-zero; nudge so the record stays valid
        t_obs = np.nextafter(0.0, 1.0)
        keep[:] = False
    patient = PatientRecord(pid, times[keep], values[keep], t_obs, event, z)
    return patient, b, t_star


def patient_streams(seed: int, n: int):
    """Per-patient generators; patient i's stream depends only on (seed, i)."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def simulate_cohort(config: SimConfig) -> tuple[Cohort, Truth]:
    width = len(str(config.n_patients))
    patients, bs, ts = [], [], []
    for i, rng in enumerate(patient_streams(config.seed, config.n_patients)):
        p, b, t = _simulate_patient(rng, f"P{i + 1:0{width}d}", config)
        patients.append(p)
        bs.append(b)
        ts.append(t)
    return Cohort(patients), Truth([p.id for p in patients], np.array(bs), np.array(ts))


def _event_fraction(level, exp_draws, eta, max_follow_up):
    return float(np.mean(exp_draws / (level * np.exp(eta)) <= max_follow_up))


def calibrate_baseline_hazard(target_event_fraction: float, config: SimConfig,
                              n_mc: int = CALIBRATION_PATIENTS,
                              seed: int = CALIBRATION_SEED, tol: float = 0.01) -> HazardSpec:
    """Constant baseline level whose Monte-Carlo event fraction hits the target.

    Bisection on the log level with common random numbers, so the objective is
    monotone in the level.
    """
    if not 0 < target_event_fraction < 1:
        raise RejectedInputError("target event fraction must lie in (0, 1)")
    par = config.true_params
    rng = np.random.default_rng(seed)
    z = _draw_covariates(rng, config.covariate_spec, size=n_mc)
    b = math.sqrt(par.tau2) * rng.standard_normal(n_mc)
    exp_draws = rng.standard_exponential(n_mc)
    eta = z @ par.gamma + par.alpha * b
    lo, hi = math.log(1e-8), math.log(1e4)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _event_fraction(math.exp(mid), exp_draws, eta, config.max_follow_up) < target_event_fraction:
            lo = mid
        else:
            hi = mid
    level = math.exp(0.5 * (lo + hi))
    got = _event_fraction(level, exp_draws, eta, config.max_follow_up)
    if abs(got - target_event_fraction) > tol:
        raise CalibrationError(
            f"bisection ended at event fraction {got:.4f}, target {target_event_fraction:.4f}"
        )
    return HazardSpec([], [level])


def with_calibrated_hazard(config: SimConfig, target_event_fraction: float) -> SimConfig:
    hazard = calibrate_baseline_hazard(target_event_fraction, config)
    return replace(config, true_params=replace(config.true_params, hazard=hazard))
