"""Predictive-accuracy metrics with inverse probability of censoring weights,
and simulation-study aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from .model import PreconditionError


@dataclass(frozen=True)
class Undefined:
    """Metric value when the estimand has no cases or no controls."""

    reason: str

    def __bool__(self):
        return False


class CensoringKM:
    """Kaplan-Meier estimate G(t) = P(C > t) of the censoring distribution.

    Censorings are the "events"; an observed event at the same time as a
    censoring stays in the censoring risk set (events are taken to precede
    censorings at ties).
    """

    def __init__(self, times, events):
        times = np.asarray(times, dtype=float)
        events = np.asarray(events, dtype=bool)
        if times.size == 0:
            raise PreconditionError("censoring survival needs a nonempty cohort")
        censored = ~events
        self.jump_times = np.unique(times[censored])
        at_risk = np.array([(times >= s).sum() for s in self.jump_times], dtype=float)
        n_cens = np.array([(censored & (times == s)).sum() for s in self.jump_times], dtype=float)
        self.values = np.cumprod(1.0 - n_cens / at_risk)
        self.last_time = float(times.max())

    def __call__(self, t):
        """Right-continuous G(t)."""
        idx = np.searchsorted(self.jump_times, t, side="right")
        return np.concatenate(([1.0], self.values))[idx]

    def left(self, t):
        """Left limit G(t-) = P(C >= t)."""
        idx = np.searchsorted(self.jump_times, t, side="left")
        return np.concatenate(([1.0], self.values))[idx]


def km_censoring_survival(cohort) -> CensoringKM:
    return CensoringKM(cohort.event_time, cohort.event)


def _ipcw_groups(times, events, t, u, G):
    """Cases (event in (t, u]) and controls (known event-free through u) among
    subjects at risk at t, with IPCW weights conditional on C > t.

    An event at T_i is observed when C >= T_i, so it is weighted by
    G(t)/G(T_i-); event-free status at u is observed when C >= u, weighted by
    G(t)/G(u-). Weights that would divide by zero are dropped.
    """
    if not u > t:
        raise PreconditionError("horizon must exceed the landmark")
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    at_risk = times > t
    case = at_risk & events & (times <= u)
    control = at_risk & ((times > u) | ((times == u) & ~events))
    g_t = G(t)
    g_case = G.left(times)
    g_u = G.left(u)
    w_case = np.zeros(times.size)
    ok = case & (g_case > 0)
    w_case[ok] = g_t / g_case[ok]
    w_control = np.zeros(times.size)
    if g_u > 0:
        w_control[control] = g_t / g_u
    return at_risk, case & ok, control & (g_u > 0), w_case, w_control


def time_dependent_auc(risk_scores, cohort, t: float, u: float, G: CensoringKM | None = None):
    """Cumulative/dynamic AUC with IPCW; ties in risk count one half."""
    G = G or km_censoring_survival(cohort)
    r = np.asarray(risk_scores, dtype=float)
    _, case, control, w_case, _ = _ipcw_groups(cohort.event_time, cohort.event, t, u, G)
    if not case.any() or not control.any():
        return Undefined("no cases" if not case.any() else "no controls")
    ctrl = np.sort(r[control])
    rc = r[case]
    below = np.searchsorted(ctrl, rc, side="left")
    ties = np.searchsorted(ctrl, rc, side="right") - below
    concord = (below + 0.5 * ties) / ctrl.size
    w = w_case[case]
    return float(np.sum(w * concord) / np.sum(w))


def brier_score(predicted_survival, cohort, t: float, u: float, G: CensoringKM | None = None) -> float:
    """IPCW Brier score at horizon u for predictions made at landmark t."""
    G = G or km_censoring_survival(cohort)
    s = np.asarray(predicted_survival, dtype=float)
    if np.any((s < 0) | (s > 1)):
        raise PreconditionError("predicted survival must lie in [0, 1]")
    at_risk, case, control, w_case, w_control = _ipcw_groups(cohort.event_time, cohort.event, t, u, G)
    n = at_risk.sum()
    if n == 0:
        raise PreconditionError("nobody at risk at the landmark")
    loss = np.where(case, w_case * s ** 2, 0.0) + np.where(control, w_control * (1.0 - s) ** 2, 0.0)
    return float(loss[at_risk].sum() / n)


def integrated_brier(predicted_curves, cohort, t: float, grid, G: CensoringKM | None = None) -> float:
    """Trapezoidal average of the Brier score over ``grid``.

    ``predicted_curves`` has one row per patient and one column per grid point.
    """
    G = G or km_censoring_survival(cohort)
    grid = np.asarray(grid, dtype=float)
    curves = np.asarray(predicted_curves, dtype=float)
    scores = np.array([brier_score(curves[:, j], cohort, t, u, G) for j, u in enumerate(grid)])
    if grid.size == 1:
        return float(scores[0])
    return float(trapezoid(scores, grid) / (grid[-1] - grid[0]))


def brier_grid(t: float, end: float, n_points: int = 21) -> np.ndarray:
    """``n_points`` equally spaced horizons over (t, end]."""
    return np.linspace(t, end, n_points + 1)[1:]


# -- simulation-study aggregation ------------------------------------------------

@dataclass
class ParamSummary:
    mean: float
    lower: float
    upper: float


def summarize_draws(draws) -> ParamSummary:
    draws = np.asarray(draws, dtype=float)
    lo, hi = np.quantile(draws, [0.025, 0.975])
    return ParamSummary(float(draws.mean()), float(lo), float(hi))


def recovery_report(replications, truth: dict) -> list[dict]:
    """Recovery rows: mean posterior mean, mean bias, 95% CI coverage.

    ``replications`` is a sequence of ``{name: ParamSummary}``; ``truth`` maps
    the same names to true values.
    """
    if len(replications) < 2:
        raise PreconditionError("recovery report needs at least 2 replications")
    rows = []
    for name, true in truth.items():
        summaries = [rep[name] for rep in replications]
        means = np.array([s.mean for s in summaries])
        covered = np.array([s.lower <= true <= s.upper for s in summaries])
        width = np.array([s.upper - s.lower for s in summaries])
        rows.append({
            "parameter": name,
            "true_value": float(true),
            "posterior_mean": float(means.mean()),
            "bias": float(means.mean() - true),
            "relative_bias": float((means.mean() - true) / true) if true != 0 else float("nan"),
            "coverage": float(covered.mean()),
            "mean_ci_width": float(width.mean()),
        })
    return rows
