"""Domain types and log-density arithmetic for the shared random-intercept joint model.

Longitudinal submodel::

    Y_i(t) = beta0 + beta1 * t + b_i + eps,   eps ~ N(0, sigma2),   b_i ~ N(0, tau2)

Survival submodel::

    h_i(t) = h0(t) * exp(gamma' Z_i + alpha * b_i)

with h0 piecewise constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

#: log of zero probability. Propagates through sums and forces MH rejection.
LOG_ZERO = -math.inf


class RejectedInputError(ValueError):
    """Input data violate a structural requirement (non-finite, unordered, ...)."""


class PreconditionError(ValueError):
    """An operation was called outside its domain."""


@dataclass(frozen=True)
class HazardSpec:
    """Piecewise-constant baseline hazard.

    ``cuts`` are the interior boundaries; the first interval starts at 0 and
    the last one is open-ended, so ``len(levels) == len(cuts) + 1``.
    """

    cuts: np.ndarray
    levels: np.ndarray

    def __post_init__(self):
        cuts = np.asarray(self.cuts, dtype=float).reshape(-1)
        levels = np.asarray(self.levels, dtype=float).reshape(-1)
        if levels.size != cuts.size + 1:
            raise RejectedInputError(
                f"need {cuts.size + 1} hazard levels for {cuts.size} cuts, got {levels.size}"
            )
        if cuts.size and (np.any(cuts <= 0) or np.any(np.diff(cuts) <= 0)):
            raise RejectedInputError("hazard cuts must be positive and strictly increasing")
        if not np.all(np.isfinite(cuts)):
            raise RejectedInputError("hazard cuts must be finite")
        object.__setattr__(self, "cuts", cuts)
        object.__setattr__(self, "levels", levels)

    @property
    def n_intervals(self) -> int:
        return self.levels.size

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate(([0.0], self.cuts))

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate((self.cuts, [np.inf]))

    def with_levels(self, levels) -> "HazardSpec":
        return HazardSpec(self.cuts, levels)

    def interval_index(self, t):
        """Interval holding ``t``; a time exactly on a cut belongs to the left interval."""
        return np.searchsorted(self.cuts, t, side="left")

    def exposure(self, t) -> np.ndarray:
        """Time spent in each interval over ``[0, t]``; shape ``t.shape + (K,)``."""
        t = np.asarray(t, dtype=float)
        lo, hi = self.lower, self.upper
        return np.clip(t[..., None] - lo, 0.0, hi - lo)

    def baseline(self, t):
        """h0(t) under the left-interval tie rule."""
        return self.levels[self.interval_index(t)]


def cumulative_baseline_hazard(hazard: HazardSpec, t):
    """Exact H0(t) for a piecewise-constant hazard. Vectorized over ``t``."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise PreconditionError("cumulative hazard is defined for t >= 0")
    out = hazard.exposure(t_arr) @ hazard.levels
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class PatientRecord:
    id: str
    obs_times: np.ndarray
    obs_values: np.ndarray
    event_time: float
    event_indicator: bool
    covariates: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        times = np.asarray(self.obs_times, dtype=float).reshape(-1)
        values = np.asarray(self.obs_values, dtype=float).reshape(-1)
        z = np.asarray(self.covariates, dtype=float).reshape(-1)
        if times.size != values.size:
            raise RejectedInputError(f"patient {self.id}: {times.size} times but {values.size} values")
        for name, arr in (("obs_times", times), ("obs_values", values), ("covariates", z)):
            if not np.all(np.isfinite(arr)):
                raise RejectedInputError(f"patient {self.id}: non-finite {name}")
        if not (math.isfinite(self.event_time) and self.event_time > 0):
            raise RejectedInputError(f"patient {self.id}: event_time must be positive and finite")
        if times.size:
            if times[0] < 0:
                raise RejectedInputError(f"patient {self.id}: negative observation time")
            if np.any(np.diff(times) <= 0):
                raise RejectedInputError(f"patient {self.id}: observation times not strictly increasing")
            if times[-1] > self.event_time:
                raise RejectedInputError(f"patient {self.id}: observation after event_time")
        object.__setattr__(self, "obs_times", times)
        object.__setattr__(self, "obs_values", values)
        object.__setattr__(self, "covariates", z)
        object.__setattr__(self, "event_time", float(self.event_time))
        object.__setattr__(self, "event_indicator", bool(self.event_indicator))

    @property
    def n_obs(self) -> int:
        return self.obs_times.size

    def truncated(self, t: float) -> "PatientRecord":
        """History available at landmark ``t``: measurements at times <= t.

        The survival fields are carried over unchanged; callers decide how to
        use them (prediction only needs to know the patient is at risk at t).
        """
        keep = self.obs_times <= t
        return PatientRecord(
            self.id, self.obs_times[keep], self.obs_values[keep],
            self.event_time, self.event_indicator, self.covariates,
        )


@dataclass(frozen=True)
class JointParams:
    beta0: float
    beta1: float
    gamma: np.ndarray
    alpha: float
    sigma2: float
    tau2: float
    hazard: HazardSpec

    def __post_init__(self):
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float).reshape(-1))

    def linear_predictor(self, z, b):
        """gamma' z + alpha * b."""
        return np.asarray(z, dtype=float) @ self.gamma + self.alpha * np.asarray(b, dtype=float)


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters: N(coef_mean, coef_var) on coefficients, IG(var_shape,
    var_scale) on both variances, Gamma(hazard_shape, hazard_rate) on each
    hazard level."""

    coef_mean: float = 0.0
    coef_var: float = 100.0
    var_shape: float = 2.0
    var_scale: float = 1.0
    hazard_shape: float = 0.1
    hazard_rate: float = 0.1

    def __post_init__(self):
        for name in ("coef_var", "var_shape", "var_scale", "hazard_shape", "hazard_rate"):
            if not getattr(self, name) > 0:
                raise RejectedInputError(f"prior {name} must be positive")


def longitudinal_mean(params: JointParams, b, t):
    return params.beta0 + params.beta1 * t + b


def longitudinal_loglik(params: JointParams, patient: PatientRecord, b: float) -> float:
    if not math.isfinite(b):
        raise RejectedInputError("random effect must be finite")
    if patient.n_obs == 0:
        return 0.0
    resid = patient.obs_values - longitudinal_mean(params, b, patient.obs_times)
    s2 = params.sigma2
    return float(-0.5 * patient.n_obs * (LOG_2PI + math.log(s2)) - 0.5 * np.dot(resid, resid) / s2)


def survival_loglik(params: JointParams, patient: PatientRecord, b: float) -> float:
    """delta * log h(T) - H(T) for one patient at a given random effect."""
    eta = float(params.linear_predictor(patient.covariates, b))
    cumhaz = cumulative_baseline_hazard(params.hazard, patient.event_time)
    out = -math.exp(eta) * cumhaz
    if patient.event_indicator:
        out += math.log(params.hazard.baseline(patient.event_time)) + eta
    return out


def _normal_logpdf(x, mean, var):
    x = np.asarray(x, dtype=float)
    return -0.5 * (LOG_2PI + math.log(var)) - 0.5 * (x - mean) ** 2 / var


def inv_gamma_logpdf(x: float, shape: float, scale: float) -> float:
    """Shape-scale inverse gamma: density proportional to x^(-shape-1) exp(-scale/x)."""
    if not x > 0:
        return LOG_ZERO
    return shape * math.log(scale) - math.lgamma(shape) - (shape + 1) * math.log(x) - scale / x


def gamma_logpdf(x, shape: float, rate: float):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = shape * math.log(rate) - math.lgamma(shape) + (shape - 1) * np.log(x) - rate * x
    return np.where(x > 0, out, LOG_ZERO)


def log_prior(params: JointParams, prior: PriorSpec) -> float:
    if not (params.sigma2 > 0 and params.tau2 > 0 and np.all(params.hazard.levels > 0)):
        return LOG_ZERO
    coefs = np.concatenate(([params.beta0, params.beta1, params.alpha], params.gamma))
    total = float(np.sum(_normal_logpdf(coefs, prior.coef_mean, prior.coef_var)))
    total += inv_gamma_logpdf(params.sigma2, prior.var_shape, prior.var_scale)
    total += inv_gamma_logpdf(params.tau2, prior.var_shape, prior.var_scale)
    total += float(np.sum(gamma_logpdf(params.hazard.levels, prior.hazard_shape, prior.hazard_rate)))
    return total


def conditional_survival_given_b(params: JointParams, b, z, t: float, u):
    """P(T > u | T > t, b) = exp(-exp(eta) * (H0(u) - H0(t)))."""
    u_arr = np.asarray(u, dtype=float)
    if t < 0 or np.any(u_arr < t):
        raise PreconditionError("need 0 <= t <= u")
    eta = params.linear_predictor(z, b)
    hz = params.hazard
    # per-interval exposure difference is exactly zero at u == t
    dH = (hz.exposure(u_arr) - hz.exposure(np.full_like(u_arr, t))) @ hz.levels
    out = np.exp(-np.exp(eta) * dH)
    return float(out) if np.ndim(out) == 0 else out


def default_cuts(event_times: Sequence[float], max_follow_up: float, n_intervals: int = 5) -> np.ndarray:
    """Interior cut points at empirical quantiles of observed event times.

    Falls back to equal-width intervals over ``[0, max_follow_up]`` when there
    are fewer events than intervals or the quantiles are not distinct.
    """
    ev = np.sort(np.asarray(event_times, dtype=float))
    probs = np.arange(1, n_intervals) / n_intervals
    if ev.size >= n_intervals:
        cuts = np.quantile(ev, probs)
        if np.all(np.diff(cuts) > 0) and cuts[0] > 0:
            return cuts
    return max_follow_up * probs


def ig_mean(shape: float, scale: float) -> float:
    """Mean of IG(shape, scale), or its mode when the mean does not exist."""
    return scale / (shape - 1) if shape > 1 else scale / (shape + 1)


class Cohort:
    """An ordered collection of patients with flattened arrays for vectorized work."""

    def __init__(self, patients: Sequence[PatientRecord]):
        self.patients = list(patients)
        ids = [p.id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise RejectedInputError("duplicate patient ids")
        dims = {p.covariates.size for p in self.patients}
        if len(dims) > 1:
            raise RejectedInputError(f"inconsistent covariate dimensions {sorted(dims)}")
        self.n_covariates = dims.pop() if dims else 0
        n = len(self.patients)
        self.ids = ids
        self.n_obs = np.array([p.n_obs for p in self.patients], dtype=int)
        self.obs_patient = np.repeat(np.arange(n), self.n_obs)
        if n:
            self.obs_times = np.concatenate([p.obs_times for p in self.patients] + [np.zeros(0)])
            self.obs_values = np.concatenate([p.obs_values for p in self.patients] + [np.zeros(0)])
        else:
            self.obs_times = np.zeros(0)
            self.obs_values = np.zeros(0)
        self.event_time = np.array([p.event_time for p in self.patients], dtype=float)
        self.event = np.array([p.event_indicator for p in self.patients], dtype=bool)
        self.Z = np.array([p.covariates for p in self.patients], dtype=float).reshape(n, self.n_covariates)

    def __len__(self):
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def __getitem__(self, i):
        return self.patients[i]

    @property
    def max_time(self) -> float:
        return float(self.event_time.max()) if len(self) else 0.0
