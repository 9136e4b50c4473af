"""Bayesian joint modelling of a longitudinal biomarker and time to event."""

from .model import (
    Cohort,
    HazardSpec,
    JointParams,
    PatientRecord,
    PriorSpec,
    conditional_survival_given_b,
    cumulative_baseline_hazard,
    log_prior,
    longitudinal_loglik,
    longitudinal_mean,
    survival_loglik,
)

__version__ = "0.1.0"
