"""Two-stage comparator: longitudinal fit first, then a survival fit with the
estimated random intercepts plugged in as a known covariate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mcmc import FitResult, McmcConfig, ModelData, Sampler, chain_seeds, resolve_cuts
from .model import Cohort, RejectedInputError


@dataclass
class TwoStageFit:
    longitudinal: FitResult
    survival: FitResult
    b_hat: np.ndarray


def fit_longitudinal_only(cohort: Cohort, config: McmcConfig) -> tuple[FitResult, np.ndarray]:
    """Stage 1: the mixed model alone. Returns the fit and posterior-mean b per patient."""
    data = ModelData(cohort, resolve_cuts(cohort, config))
    seeds = chain_seeds(config.seed, config.n_chains)
    chains = [Sampler(data, config, mode="longitudinal").run(s) for s in seeds]
    fit = FitResult(chains, data.cuts, list(cohort.ids), tag="two_stage_longitudinal")
    b_hat = fit.b_draws().mean(axis=0) if len(cohort) else np.zeros(0)
    return fit, b_hat


def fit_survival_plugin(cohort: Cohort, b_hat, config: McmcConfig) -> FitResult:
    """Stage 2: piecewise-exponential PH fit with ``b_hat`` as a fixed covariate."""
    b_hat = np.asarray(b_hat, dtype=float)
    if b_hat.size != len(cohort):
        raise RejectedInputError(f"b_hat has {b_hat.size} entries for {len(cohort)} patients")
    data = ModelData(cohort, resolve_cuts(cohort, config))
    # stage 2 runs on its own seed branch so it never reuses stage-1 streams
    seeds = chain_seeds(config.seed, 2 * config.n_chains)[config.n_chains:]
    chains = [Sampler(data, config, mode="survival", fixed_b=b_hat).run(s) for s in seeds]
    return FitResult(chains, data.cuts, list(cohort.ids), tag="two_stage_survival")


def fit_two_stage(cohort: Cohort, config: McmcConfig) -> TwoStageFit:
    stage1, b_hat = fit_longitudinal_only(cohort, config)
    stage2 = fit_survival_plugin(cohort, b_hat, config)
    return TwoStageFit(stage1, stage2, b_hat)
