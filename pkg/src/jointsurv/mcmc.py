"""Metropolis-within-Gibbs sampler for the joint model.

One sweep updates, in order: (beta0, beta1) -> sigma2 -> tau2 -> every b_i ->
(gamma, alpha) -> hazard levels. beta, the variances and the hazard levels
have conjugate full conditionals; b and (gamma, alpha) use random-walk
Metropolis with proposal scales adapted during burn-in only.

Right after the b step a translation move (beta0 + c, b - c) runs along the
ridge that the longitudinal likelihood leaves flat. Without it beta0 and the
mean of b only move together through many small alternating steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import (
    Cohort,
    HazardSpec,
    JointParams,
    PriorSpec,
    RejectedInputError,
    default_cuts,
    ig_mean,
)

BLOCKS = ("beta", "sigma2", "tau2", "b", "gamma_alpha", "lambda", "shift")
# random-walk steps on (gamma, alpha) per sweep; each costs one O(n) likelihood
GA_STEPS = 3


class SamplerError(RuntimeError):
    """The chain reached a state with a non-finite log density."""

    def __init__(self, block: str, iteration: int, detail: str = ""):
        self.block = block
        self.iteration = iteration
        super().__init__(f"non-finite state after '{block}' update at iteration {iteration}{': ' + detail if detail else ''}")


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 3
    n_iter: int = 5000
    burn_in: int = 1000
    thin: int = 1
    seed: int = 0
    adapt_window: int = 50
    target_accept: float = 0.35
    n_intervals: int = 5
    # explicit interior cut points; None picks quantiles of observed event times
    hazard_cuts: tuple | None = None
    max_follow_up: float | None = None
    prior: PriorSpec = field(default_factory=PriorSpec)
    keep_b: bool = True

    def __post_init__(self):
        if self.n_chains < 1 or self.n_iter < 1 or self.thin < 1 or self.adapt_window < 1:
            raise RejectedInputError("n_chains, n_iter, thin and adapt_window must be positive")
        if not 0 <= self.burn_in < self.n_iter:
            raise RejectedInputError("need 0 <= burn_in < n_iter")
        if not 0 < self.target_accept < 1:
            raise RejectedInputError("target_accept must lie in (0, 1)")

    @property
    def n_keep(self) -> int:
        return len(range(self.burn_in, self.n_iter, self.thin))


class ModelData:
    """Cohort arrays pre-arranged for the sampler's updates."""

    def __init__(self, cohort: Cohort, cuts):
        self.cohort = cohort
        self.n = len(cohort)
        self.p = cohort.n_covariates
        self.cuts = np.asarray(cuts, dtype=float)
        shape = HazardSpec(self.cuts, np.ones(self.cuts.size + 1))
        self.K = shape.n_intervals
        self.pid = cohort.obs_patient
        self.t = cohort.obs_times
        self.y = cohort.obs_values
        self.n_obs = cohort.n_obs.astype(float)
        self.n_total = self.t.size
        self.T = cohort.event_time
        self.delta = cohort.event.astype(float)
        self.Z = cohort.Z
        self.exposure = shape.exposure(self.T).reshape(self.n, self.K)
        idx = shape.interval_index(self.T)
        self.events = np.bincount(idx[cohort.event], minlength=self.K).astype(float)
        self.delta_z = self.delta @ self.Z if self.n else np.zeros(self.p)
        self.XtX = np.array([[self.n_total, self.t.sum()], [self.t.sum(), self.t @ self.t]])

    def obs_sum(self, values):
        return np.bincount(self.pid, weights=values, minlength=self.n)


@dataclass
class State:
    beta: np.ndarray
    sigma2: float
    tau2: float
    b: np.ndarray
    gamma: np.ndarray
    alpha: float
    lam: np.ndarray

    def copy(self) -> "State":
        return State(self.beta.copy(), self.sigma2, self.tau2, self.b.copy(),
                     self.gamma.copy(), self.alpha, self.lam.copy())

    def to_params(self, cuts) -> JointParams:
        return JointParams(self.beta[0], self.beta[1], self.gamma.copy(), self.alpha,
                           self.sigma2, self.tau2, HazardSpec(cuts, self.lam.copy()))


def column_names(p: int, K: int) -> list[str]:
    return (["beta0", "beta1"] + [f"gamma_{j + 1}" for j in range(p)] + ["alpha", "log_sigma2", "log_tau2"]
            + [f"log_lambda_{k + 1}" for k in range(K)])


def pack(state: State) -> np.ndarray:
    return np.concatenate((state.beta, state.gamma, [state.alpha, math.log(state.sigma2), math.log(state.tau2)],
                           np.log(state.lam)))


def unpack_params(row, p: int, cuts) -> JointParams:
    """Inverse of :func:`pack` for the parameter columns."""
    row = np.asarray(row, dtype=float)
    return JointParams(row[0], row[1], row[2:2 + p].copy(), row[2 + p], math.exp(row[3 + p]),
                       math.exp(row[4 + p]), HazardSpec(cuts, np.exp(row[5 + p:])))


def initial_state(data: ModelData, prior: PriorSpec) -> State:
    if data.n_total >= 2 and np.ptp(data.t) > 0:
        beta = np.linalg.solve(data.XtX, [data.y.sum(), data.t @ data.y])
    elif data.n_total:
        beta = np.array([data.y.mean(), 0.0])
    else:
        beta = np.zeros(2)
    resid = data.y - beta[0] - beta[1] * data.t
    b = data.obs_sum(resid) / np.maximum(data.n_obs, 1.0)
    var0 = ig_mean(prior.var_shape, prior.var_scale)
    lam = (data.events + prior.hazard_shape) / (data.exposure.sum(axis=0) + prior.hazard_rate)
    return State(beta, var0, var0, b, np.zeros(data.p), 0.0, lam)


# -- conjugate updates ---------------------------------------------------------

def gibbs_update_beta(state: State, data: ModelData, prior: PriorSpec, rng: np.random.Generator) -> np.ndarray:
    r = data.y - state.b[data.pid]
    prec = data.XtX / state.sigma2 + np.eye(2) / prior.coef_var
    rhs = np.array([r.sum(), data.t @ r]) / state.sigma2 + prior.coef_mean / prior.coef_var
    chol = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, rhs)
    # chol^-T z has covariance prec^-1
    return mean + np.linalg.solve(chol.T, rng.standard_normal(2))


def _draw_inv_gamma(rng, shape, scale):
    return scale / rng.gamma(shape)


def gibbs_update_sigma2(state: State, data: ModelData, prior: PriorSpec, rng: np.random.Generator) -> float:
    resid = data.y - state.beta[0] - state.beta[1] * data.t - state.b[data.pid]
    return _draw_inv_gamma(rng, prior.var_shape + 0.5 * data.n_total, prior.var_scale + 0.5 * resid @ resid)


def gibbs_update_tau2(state: State, prior: PriorSpec, rng: np.random.Generator) -> float:
    b = state.b
    return _draw_inv_gamma(rng, prior.var_shape + 0.5 * b.size, prior.var_scale + 0.5 * b @ b)


def gibbs_update_lambda(state: State, data: ModelData, prior: PriorSpec, rng: np.random.Generator) -> np.ndarray:
    risk = np.exp(data.Z @ state.gamma + state.alpha * state.b)
    at_risk = risk @ data.exposure
    return rng.gamma(prior.hazard_shape + data.events) / (prior.hazard_rate + at_risk)


def conjugate_b(state: State, data: ModelData):
    """Mean and precision of b_i given the longitudinal data alone."""
    partial = data.obs_sum(data.y - state.beta[0] - state.beta[1] * data.t)
    prec = data.n_obs / state.sigma2 + 1.0 / state.tau2
    return partial / state.sigma2 / prec, prec


def draw_b_conjugate(state: State, data: ModelData, rng: np.random.Generator) -> np.ndarray:
    mean, prec = conjugate_b(state, data)
    return mean + rng.standard_normal(data.n) / np.sqrt(prec)


# -- Metropolis updates ---------------------------------------------------------

def _orbit_proposal(beta0, b, state: State, data: ModelData, prior: PriorSpec, eta_z, cumhaz):
    """Mean and precision of a Gaussian proposal for the offset c along the
    orbit (beta0 + c, b - c): one Newton step from c = 0 on the log target,
    which is Gaussian apart from the survival term."""
    prec_g = data.n / state.tau2 + 1.0 / prior.coef_var
    grad = b.sum() / state.tau2 - (beta0 - prior.coef_mean) / prior.coef_var
    if state.alpha != 0.0:
        with np.errstate(over="ignore"):
            risk = np.exp(eta_z + state.alpha * b) @ cumhaz
        grad += state.alpha * (risk - data.delta.sum())
        prec = prec_g + state.alpha ** 2 * risk
    else:
        prec = prec_g
    return grad / prec, prec


def shift_intercepts(state: State, data: ModelData, prior: PriorSpec, rng: np.random.Generator,
                     exact: bool = False):
    """Move (beta0, b) to (beta0 + c, b - c).

    The longitudinal likelihood is unchanged by the move. The offset c is
    proposed from a local Gaussian approximation of its conditional and
    accepted by Metropolis-Hastings. With ``exact`` (alpha = 0) that
    approximation is the exact conditional and the draw is always kept.
    Returns (beta, b, accepted).
    """
    eta_z = data.Z @ state.gamma
    cumhaz = data.exposure @ state.lam
    beta0 = state.beta[0]
    mean, prec = _orbit_proposal(beta0, state.b, state, data, prior, eta_z, cumhaz)
    c = mean + rng.standard_normal() / math.sqrt(prec)
    log_u = math.log(rng.random())
    beta = state.beta.copy()
    beta[0] += c
    b_new = state.b - c
    if not exact:
        back_mean, back_prec = _orbit_proposal(beta[0], b_new, state, data, prior, eta_z, cumhaz)
        a = state.alpha
        with np.errstate(over="ignore"):
            d_surv = -a * c * data.delta.sum() - (np.exp(eta_z + a * b_new) - np.exp(eta_z + a * state.b)) @ cumhaz
        d_gauss = (-((beta[0] - prior.coef_mean) ** 2 - (beta0 - prior.coef_mean) ** 2) / (2.0 * prior.coef_var)
                   - (b_new @ b_new - state.b @ state.b) / (2.0 * state.tau2))
        log_q_fwd = 0.5 * math.log(prec) - 0.5 * prec * (c - mean) ** 2
        log_q_back = 0.5 * math.log(back_prec) - 0.5 * back_prec * (-c - back_mean) ** 2
        if not log_u < d_gauss + d_surv + log_q_back - log_q_fwd:
            return state.beta, state.b, False
    return beta, b_new, True


def b_log_target(b, partial, state: State, data: ModelData, eta_z, cumhaz):
    """Unnormalized log p(b_i | rest) for every patient at once.

    ``partial`` is sum_j (y_ij - beta0 - beta1 t_ij); ``eta_z`` is gamma'Z_i;
    ``cumhaz`` is H0(T_i).
    """
    lp = -0.5 * b * b / state.tau2 - 0.5 * (data.n_obs * b * b - 2.0 * b * partial) / state.sigma2
    with np.errstate(over="ignore"):
        surv = data.delta * state.alpha * b - np.exp(eta_z + state.alpha * b) * cumhaz
    return lp + surv


def mh_update_b(state: State, data: ModelData, scale: np.ndarray, rng: np.random.Generator):
    """One random-walk step for every b_i.

    Returns the new b, the acceptance mask and the log target at the new b.
    """
    partial = data.obs_sum(data.y - state.beta[0] - state.beta[1] * data.t)
    eta_z = data.Z @ state.gamma
    cumhaz = data.exposure @ state.lam
    proposal = state.b + scale * rng.standard_normal(data.n)
    log_u = np.log(rng.random(data.n))
    cur = b_log_target(state.b, partial, state, data, eta_z, cumhaz)
    new = b_log_target(proposal, partial, state, data, eta_z, cumhaz)
    accept = log_u < new - cur
    return np.where(accept, proposal, state.b), accept, np.where(accept, new, cur)


def survival_log_target(gamma, alpha, state: State, data: ModelData, prior: PriorSpec) -> float:
    """Survival log-likelihood in (gamma, alpha) plus their Gaussian priors."""
    eta = data.Z @ gamma + alpha * state.b
    with np.errstate(over="ignore"):
        loglik = data.delta @ eta - np.exp(eta) @ (data.exposure @ state.lam)
    coefs = np.append(gamma, alpha)
    return float(loglik - 0.5 * np.sum((coefs - prior.coef_mean) ** 2) / prior.coef_var)


def mh_update_gamma_alpha(state: State, data: ModelData, prior: PriorSpec, scale: np.ndarray,
                          rng: np.random.Generator, fix_alpha: bool = False):
    """Joint random-walk step on (gamma, alpha); returns (gamma, alpha, accepted).

    ``scale`` is either one standard deviation per coordinate (gamma...,
    alpha) or a lower-triangular factor of the proposal covariance. With
    ``fix_alpha`` the alpha coordinate is held in place.
    """
    z = rng.standard_normal(scale.shape[0])
    step = scale @ z if scale.ndim == 2 else scale * z
    if fix_alpha:
        step[-1] = 0.0
    gamma_new = state.gamma + step[:-1]
    alpha_new = state.alpha + step[-1]
    log_u = math.log(rng.random())
    cur = survival_log_target(state.gamma, state.alpha, state, data, prior)
    new = survival_log_target(gamma_new, alpha_new, state, data, prior)
    if log_u < new - cur:
        return gamma_new, alpha_new, True
    return state.gamma, state.alpha, False


def _proposal_factor(history: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Cholesky factor of the sample covariance of ``history``, or ``fallback``
    when the sample is degenerate (for example a coordinate never moved)."""
    cov = np.atleast_2d(np.cov(history, rowvar=False))
    try:
        return np.linalg.cholesky(cov + 1e-10 * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        return fallback


def as_seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


# -- chains --------------------------------------------------------------------

@dataclass
class ChainDraws:
    names: list
    param_draws: np.ndarray
    b_draws: np.ndarray | None
    accept_rates: dict
    frozen: bool
    cuts: np.ndarray
    p: int

    def column(self, name: str) -> np.ndarray:
        return self.param_draws[:, self.names.index(name)]

    def params(self, i: int) -> JointParams:
        full = _expand_row(self.names, self.param_draws[i], self.p, len(self.cuts) + 1)
        return unpack_params(full, self.p, self.cuts)


def _expand_row(names, row, p, K):
    """Fill a possibly restricted draw row out to the full parameter layout.

    Missing coefficients become 0 and missing variances/levels become 1, which
    only matters for restricted (two-stage) draws that never use them.
    """
    full_names = column_names(p, K)
    if list(names) == full_names:
        return row
    out = np.zeros(len(full_names))
    for name, value in zip(names, row):
        out[full_names.index(name)] = value
    return out


class Sampler:
    """A single chain over some subset of the joint model's blocks.

    mode:
      ``"joint"``         every block
      ``"longitudinal"``  beta, sigma2, tau2 and exact conjugate b draws
      ``"survival"``      (gamma, alpha) and lambda with b held at ``fixed_b``
    """

    def __init__(self, data: ModelData, config: McmcConfig, mode: str = "joint",
                 fix_alpha: float | None = None, fixed_b=None):
        if mode not in ("joint", "longitudinal", "survival"):
            raise ValueError(f"unknown sampler mode {mode!r}")
        self.data = data
        self.config = config
        self.prior = config.prior
        self.mode = mode
        self.fix_alpha = fix_alpha
        self.fixed_b = None if fixed_b is None else np.asarray(fixed_b, dtype=float)
        if mode == "survival" and (self.fixed_b is None or self.fixed_b.size != data.n):
            raise RejectedInputError("survival-only sampling needs one fixed b per patient")

    @property
    def names(self) -> list:
        full = column_names(self.data.p, self.data.K)
        if self.mode == "longitudinal":
            return ["beta0", "beta1", "log_sigma2", "log_tau2"]
        if self.mode == "survival":
            return [n for n in full if n.startswith(("gamma", "alpha", "log_lambda"))]
        return full

    def _columns(self):
        full = column_names(self.data.p, self.data.K)
        return np.array([full.index(n) for n in self.names])

    def _b_conjugate(self) -> bool:
        return self.mode == "longitudinal" or (self.fix_alpha is not None and self.fix_alpha == 0.0)

    def run(self, chain_seed) -> ChainDraws:
        data, cfg, prior = self.data, self.config, self.prior
        streams = [np.random.Generator(np.random.PCG64(s))
                   for s in as_seed_sequence(chain_seed).spawn(len(BLOCKS))]
        rng = dict(zip(BLOCKS, streams))
        st = initial_state(data, prior)
        if self.fix_alpha is not None:
            st.alpha = float(self.fix_alpha)
        if self.mode == "survival":
            st.b = self.fixed_b.copy()
        do_long = self.mode in ("joint", "longitudinal")
        do_surv = self.mode in ("joint", "survival")
        b_conj = self._b_conjugate()

        # proposal scales: start from curvature estimates at the initial state
        b_scale = 2.4 / np.sqrt(data.n_obs / st.sigma2 + 1.0 / st.tau2)
        risk = np.exp(data.Z @ st.gamma + st.alpha * st.b) * (data.exposure @ st.lam)
        info = np.append(risk @ data.Z ** 2, risk @ st.b ** 2) + 1.0 / prior.coef_var
        ga_chol = np.diag(1.0 / np.sqrt(info))
        ga_log_scale = math.log(2.4 / math.sqrt(info.size))

        cols = self._columns()
        n_keep = cfg.n_keep
        draws = np.empty((n_keep, cols.size))
        b_draws = np.empty((n_keep, data.n)) if cfg.keep_b and self.mode != "survival" else None
        acc_b = np.zeros(data.n)
        acc_ga = 0
        win_b = np.zeros(data.n)
        win_ga = 0
        n_windows = 0
        ga_hist = []
        kept = 0
        frozen = cfg.burn_in == 0

        for it in range(cfg.n_iter):
            if do_long:
                st.beta = gibbs_update_beta(st, data, prior, rng["beta"])
                self._check(st.beta, "beta", it)
                st.sigma2 = gibbs_update_sigma2(st, data, prior, rng["sigma2"])
                self._check(st.sigma2, "sigma2", it)
                st.tau2 = gibbs_update_tau2(st, prior, rng["tau2"])
                self._check(st.tau2, "tau2", it)
                if b_conj:
                    st.b = draw_b_conjugate(st, data, rng["b"])
                    accepted = np.ones(data.n, dtype=bool)
                else:
                    st.b, accepted, logp = mh_update_b(st, data, b_scale, rng["b"])
                    self._check(logp, "b", it)
                self._check(st.b, "b", it)
                if data.n:
                    st.beta, st.b, _ = shift_intercepts(
                        st, data, prior, rng["shift"], exact=b_conj or st.alpha == 0.0)
                if it >= cfg.burn_in:
                    acc_b += accepted
                else:
                    win_b += accepted
            if do_surv:
                scale = np.exp(ga_log_scale) * ga_chol
                ok = 0
                for _ in range(GA_STEPS):
                    st.gamma, st.alpha, acc = mh_update_gamma_alpha(
                        st, data, prior, scale, rng["gamma_alpha"], fix_alpha=self.fix_alpha is not None)
                    ok += acc
                ok /= GA_STEPS
                self._check(survival_log_target(st.gamma, st.alpha, st, data, prior), "gamma_alpha", it)
                if it >= cfg.burn_in:
                    acc_ga += ok
                else:
                    win_ga += ok
                    ga_hist.append(np.append(st.gamma, st.alpha))
                st.lam = gibbs_update_lambda(st, data, prior, rng["lambda"])
                self._check(np.log(st.lam), "lambda", it)

            if it < cfg.burn_in and (it + 1) % cfg.adapt_window == 0:
                n_windows += 1
                gain = 1.0 / math.sqrt(n_windows)
                w = cfg.adapt_window
                if do_long and not b_conj:
                    b_scale = b_scale * np.exp(gain * (win_b / w - cfg.target_accept))
                if do_surv:
                    ga_log_scale += gain * (win_ga / w - cfg.target_accept)
                    if len(ga_hist) >= 2 * w:
                        # proposal shape from the recent half of burn-in
                        ga_chol = _proposal_factor(np.array(ga_hist[len(ga_hist) // 2:]), ga_chol)
                win_b[:] = 0
                win_ga = 0
            if it + 1 == cfg.burn_in:
                frozen = True

            if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
                draws[kept] = pack(st)[cols]
                if b_draws is not None:
                    b_draws[kept] = st.b
                kept += 1

        n_post = cfg.n_iter - cfg.burn_in
        rates = {}
        if do_long:
            rates["b"] = float(np.mean(acc_b) / n_post) if data.n else 1.0
        if do_surv:
            rates["gamma_alpha"] = acc_ga / n_post
        self.final_state = st
        self.b_scale = b_scale
        return ChainDraws(self.names, draws, b_draws, rates, frozen, data.cuts.copy(), data.p)

    @staticmethod
    def _check(value, block, it):
        if not np.all(np.isfinite(value)):
            raise SamplerError(block, it)


def resolve_cuts(cohort: Cohort, config: McmcConfig) -> np.ndarray:
    if config.hazard_cuts is not None:
        return np.asarray(config.hazard_cuts, dtype=float)
    follow_up = config.max_follow_up if config.max_follow_up is not None else cohort.max_time
    return default_cuts(cohort.event_time[cohort.event], follow_up, config.n_intervals)


def chain_seeds(seed: int, n_chains: int):
    return np.random.SeedSequence(seed).spawn(n_chains)


@dataclass
class FitResult:
    chains: list
    cuts: np.ndarray
    ids: list
    tag: str = "joint"

    @property
    def names(self) -> list:
        return self.chains[0].names

    def stacked(self) -> np.ndarray:
        return np.concatenate([c.param_draws for c in self.chains])

    def column(self, name: str) -> np.ndarray:
        return np.concatenate([c.column(name) for c in self.chains])

    def natural(self, name: str) -> np.ndarray:
        """Draws on the natural scale (variances and levels exponentiated)."""
        if name in ("sigma2", "tau2") or name.startswith("lambda_"):
            return np.exp(self.column("log_" + name))
        return self.column(name)

    def b_draws(self) -> np.ndarray:
        return np.concatenate([c.b_draws for c in self.chains])

    def param_rows(self, max_draws: int | None = None) -> list:
        """Parameter sets for (an evenly spaced subset of) the pooled draws."""
        rows = self.stacked()
        if max_draws is not None and rows.shape[0] > max_draws:
            rows = rows[np.linspace(0, rows.shape[0] - 1, max_draws).round().astype(int)]
        c = self.chains[0]
        K = len(self.cuts) + 1
        return [unpack_params(_expand_row(c.names, r, c.p, K), c.p, self.cuts) for r in rows]


def run_chain(data: Cohort | ModelData, config: McmcConfig, chain_seed, **sampler_kw) -> ChainDraws:
    if isinstance(data, Cohort):
        data = ModelData(data, resolve_cuts(data, config))
    return Sampler(data, config, **sampler_kw).run(chain_seed)


def fit_joint(cohort: Cohort, config: McmcConfig, tag: str = "joint", **sampler_kw) -> FitResult:
    data = ModelData(cohort, resolve_cuts(cohort, config))
    chains = [Sampler(data, config, **sampler_kw).run(s) for s in chain_seeds(config.seed, config.n_chains)]
    return FitResult(chains, data.cuts, list(cohort.ids), tag)
