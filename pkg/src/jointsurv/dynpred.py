"""Dynamic individualized survival prediction.

For a patient event-free at landmark t with biomarker history Y(s <= t), the
random intercept is integrated out against

    p(b | history, T > t)  ∝  N(b; 0, tau2) · Π_j N(y_j; beta0 + beta1 s_j + b, sigma2)
                              · exp(-exp(gamma'z + alpha b) H0(t))

using Gauss-Hermite nodes centred on the Laplace approximation of that
density. The result is averaged over posterior draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .model import JointParams, PatientRecord, PreconditionError

N_NODES = 64
MAX_NEWTON = 100
FALLBACK_WIDTH = 8.0

_GH_X, _GH_W = np.polynomial.hermite.hermgauss(N_NODES)
_GH_LOGW = np.log(_GH_W) + _GH_X ** 2


@dataclass
class DrawSet:
    """Posterior draws as parallel arrays (leading axis = draw)."""

    beta0: np.ndarray
    beta1: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray
    levels: np.ndarray
    cuts: np.ndarray

    @classmethod
    def from_params(cls, params: list[JointParams]) -> "DrawSet":
        if not params:
            raise PreconditionError("need at least one posterior draw")
        cuts = params[0].hazard.cuts
        return cls(
            np.array([p.beta0 for p in params], dtype=float),
            np.array([p.beta1 for p in params], dtype=float),
            np.array([p.gamma for p in params], dtype=float).reshape(len(params), -1),
            np.array([p.alpha for p in params], dtype=float),
            np.array([p.sigma2 for p in params], dtype=float),
            np.array([p.tau2 for p in params], dtype=float),
            np.array([p.hazard.levels for p in params], dtype=float),
            cuts,
        )

    def __len__(self):
        return self.beta0.size

    def cumhaz(self, t) -> np.ndarray:
        """H0 at times ``t`` for every draw; shape (D, len(t))."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        lo = np.concatenate(([0.0], self.cuts))
        hi = np.concatenate((self.cuts, [np.inf]))
        expo = np.clip(t[:, None] - lo, 0.0, hi - lo)  # (U, K)
        return self.levels @ expo.T


@dataclass
class QuadratureRule:
    """Weighted nodes representing a 1-D density; weights sum to one."""

    nodes: np.ndarray
    weights: np.ndarray
    mode: np.ndarray
    scale: np.ndarray
    fallback: np.ndarray

    def moment(self, k: int = 1) -> np.ndarray:
        return np.sum(self.weights * self.nodes ** k, axis=-1)

    def mean(self):
        return self.moment(1)

    def var(self):
        return self.moment(2) - self.mean() ** 2


def _history_sums(draws: DrawSet, history: PatientRecord):
    """n and sum of residuals y_j - beta0 - beta1 s_j, per draw."""
    s = history.obs_times
    y = history.obs_values
    partial = y.sum() - history.n_obs * draws.beta0 - draws.beta1 * s.sum()
    return float(history.n_obs), partial


def _log_density(b, tau2, sigma2, n, partial, eta_z, alpha, cumhaz_t):
    with np.errstate(over="ignore"):
        return (-0.5 * b * b / tau2 - 0.5 * (n * b * b - 2.0 * b * partial) / sigma2
                - np.exp(eta_z + alpha * b) * cumhaz_t)


def b_quadrature(tau2, sigma2, n, partial, eta_z, alpha, cumhaz_t) -> QuadratureRule:
    """Vectorized core of :func:`conditional_b_given_history` (inputs broadcast)."""
    tau2, sigma2, partial, eta_z, alpha, cumhaz_t = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (tau2, sigma2, partial, eta_z, alpha, cumhaz_t)))
    prec0 = n / sigma2 + 1.0 / tau2
    b = partial / sigma2 / prec0
    f = _log_density(b, tau2, sigma2, n, partial, eta_z, alpha, cumhaz_t)
    converged = np.zeros(b.shape, dtype=bool)
    for _ in range(MAX_NEWTON):
        risk = np.exp(eta_z + alpha * b) * cumhaz_t
        grad = -b / tau2 - (n * b - partial) / sigma2 - alpha * risk
        hess = -prec0 - alpha * alpha * risk
        step = np.where(converged, 0.0, -grad / hess)
        # f is concave, so the Newton direction ascends; halve until it does
        for _ in range(60):
            cand = b + step
            f_new = _log_density(cand, tau2, sigma2, n, partial, eta_z, alpha, cumhaz_t)
            bad = ~(f_new >= f - 1e-12 * np.abs(f))
            if not bad.any():
                break
            step = np.where(bad, 0.5 * step, step)
        b, f = cand, np.where(np.isfinite(f_new), f_new, f)
        converged |= np.abs(step) <= 1e-12 * (1.0 + np.abs(b))
        if converged.all():
            break
    risk = np.exp(eta_z + alpha * b) * cumhaz_t
    scale = 1.0 / np.sqrt(prec0 + alpha * alpha * risk)
    nodes = b[..., None] + np.sqrt(2.0) * scale[..., None] * _GH_X
    logw = _GH_LOGW + _log_density(nodes, *(a[..., None] for a in (tau2, sigma2)), n,
                                   partial[..., None], eta_z[..., None], alpha[..., None],
                                   cumhaz_t[..., None])
    fallback = ~converged
    if fallback.any():
        grid = np.linspace(-FALLBACK_WIDTH, FALLBACK_WIDTH, N_NODES)
        wide = np.sqrt(tau2[..., None]) * grid
        wide_logw = _log_density(wide, tau2[..., None], sigma2[..., None], n, partial[..., None],
                                 eta_z[..., None], alpha[..., None], cumhaz_t[..., None])
        nodes = np.where(fallback[..., None], wide, nodes)
        logw = np.where(fallback[..., None], wide_logw, logw)
    weights = np.exp(logw - logsumexp(logw, axis=-1, keepdims=True))
    return QuadratureRule(nodes, weights, b, scale, fallback)


def _check_landmark(history: PatientRecord, t: float):
    if t < 0:
        raise PreconditionError("landmark must be nonnegative")
    if history.event_time < t or (history.event_indicator and history.event_time <= t):
        raise PreconditionError(f"patient {history.id} is not at risk at landmark {t}")
    if history.n_obs and history.obs_times[-1] > t:
        raise PreconditionError("history contains measurements after the landmark")


def conditional_b_given_history(params: JointParams, history: PatientRecord, t: float) -> QuadratureRule:
    """Quadrature representation of p(b | Y(s <= t), T > t) under one parameter set."""
    _check_landmark(history, t)
    draws = DrawSet.from_params([params])
    rule = _rule_for(draws, history, t)
    return QuadratureRule(rule.nodes[0], rule.weights[0], rule.mode[0], rule.scale[0], rule.fallback[0])


def _rule_for(draws: DrawSet, history: PatientRecord, t: float) -> QuadratureRule:
    n, partial = _history_sums(draws, history)
    eta_z = draws.gamma @ history.covariates
    cumhaz_t = draws.cumhaz(t)[:, 0]
    return b_quadrature(draws.tau2, draws.sigma2, n, partial, eta_z, draws.alpha, cumhaz_t)


@dataclass
class SurvivalPrediction:
    landmark: float
    horizons: np.ndarray
    mean_survival: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray
    fallback: bool = False


def _check_horizons(horizons, t):
    h = np.atleast_1d(np.asarray(horizons, dtype=float))
    if np.any(h < t) or np.any(np.diff(h) <= 0):
        raise PreconditionError("horizons must be increasing and not before the landmark")
    return h


def survival_curves(draws: DrawSet, history: PatientRecord, t: float, horizons) -> tuple[np.ndarray, bool]:
    """Per-draw conditional survival curves, shape (D, len(horizons))."""
    _check_landmark(history, t)
    h = _check_horizons(horizons, t)
    rule = _rule_for(draws, history, t)
    eta_z = draws.gamma @ history.covariates
    d_cumhaz = draws.cumhaz(h) - draws.cumhaz(t)  # (D, U)
    risk = np.exp(eta_z[:, None] + draws.alpha[:, None] * rule.nodes)  # (D, M)
    # (D, M, U) -> (D, U)
    surv = np.exp(-risk[:, :, None] * d_cumhaz[:, None, :])
    curves = np.einsum("dm,dmu->du", rule.weights, surv)
    # roundoff can nudge a curve upward by an ulp
    curves = np.minimum.accumulate(np.minimum(curves, 1.0), axis=1)
    return curves, bool(rule.fallback.any())


def _summarize(curves, t, h, fallback=False) -> SurvivalPrediction:
    mean = np.minimum.accumulate(curves.mean(axis=0))
    lower, upper = np.quantile(curves, [0.025, 0.975], axis=0)
    at_t = h == t
    mean[at_t] = lower[at_t] = upper[at_t] = 1.0
    return SurvivalPrediction(float(t), h, mean, lower, upper, fallback)


def predict_survival(draws, history: PatientRecord, t: float, horizons) -> SurvivalPrediction:
    """Posterior-predictive P(T > u | T > t, Y(s <= t), z) over a horizon grid.

    ``draws`` is a :class:`DrawSet` or a sequence of :class:`JointParams`.
    """
    if not isinstance(draws, DrawSet):
        draws = DrawSet.from_params(list(draws))
    history = history.truncated(t)
    curves, fallback = survival_curves(draws, history, t, horizons)
    return _summarize(curves, t, _check_horizons(horizons, t), fallback)


def plugin_b(stage1: DrawSet, history: PatientRecord) -> float:
    """Stage-1 estimate of b from the history alone: posterior mean of the
    conjugate normal conditional, averaged over stage-1 draws."""
    n, partial = _history_sums(stage1, history)
    prec = n / stage1.sigma2 + 1.0 / stage1.tau2
    return float(np.mean(partial / stage1.sigma2 / prec))


def predict_survival_plugin(stage1: DrawSet, stage2: DrawSet, history: PatientRecord, t: float,
                            horizons) -> SurvivalPrediction:
    """Two-stage prediction: b fixed at its stage-1 estimate, no b uncertainty and
    no conditioning of b on survival to t."""
    history = history.truncated(t)
    _check_landmark(history, t)
    h = _check_horizons(horizons, t)
    b = plugin_b(stage1, history)
    eta = stage2.gamma @ history.covariates + stage2.alpha * b
    d_cumhaz = stage2.cumhaz(h) - stage2.cumhaz(t)
    curves = np.exp(-np.exp(eta)[:, None] * d_cumhaz)
    return _summarize(curves, t, h)
