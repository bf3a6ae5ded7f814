"""Finite-population randomization inference for 2x2 split-plot designs."""

from .design import (
    Assignment,
    CompletelyRandomizedSpec,
    SplitPlotSpec,
    cr_coefficients,
    randomize_cr,
    randomize_sp,
    sp_coefficients,
    theoretical_assignment_moments,
)
from .estimator import (
    EffectEstimate,
    EstimationError,
    ObservedData,
    balanced_sp_variances,
    closed_form_special_cases,
    confidence_interval,
    estimate,
    estimate_variance_cr,
    estimate_variance_sp,
    estimator_bias,
    observe,
    point_estimates,
    sampling_variance_cr,
    sampling_variance_sp,
)
from .harness import CoverageConfig, CoverageReport, run_coverage
from .oracle import enumerate_assignments, exact_moments, identity_checks, residual_covariance, residuals
from .pom import (
    BlockLayout,
    PotentialOutcomeMatrix,
    build_projections,
    classify_additivity,
    factorial_effects,
    summarize_covariances,
)
from .simgen import PomRecipe, build_pom, generate_y1

__all__ = [name for name in dir() if not name.startswith("_")]
