"""Knowledge-guided Wasserstein distributionally robust estimators.

Linear regression and binary classification shrunk toward the span of prior
coefficient vectors learned on source data, with the tools needed to select
hyperparameters and run the simulation studies.
"""

from .estimators import (
    FitResult,
    Loss,
    RankDeficiencyGuard,
    SolverConfig,
    Status,
    StepRule,
    fit_classifier_strong,
    fit_linear_strong,
    fit_linear_weak,
    fit_mahalanobis,
    fit_span_constrained,
    kkt_residual,
    make_problem,
    prox_pnorm,
)
from .losses import Dataset, Task, hinge_loss, logistic_loss, mse_n, sqrt_mse
from .penalties import (
    PenaltyKind,
    PenaltySpec,
    PriorSpan,
    PsiMatrix,
    mahalanobis_span_distance,
    penalty_contour,
    psi_norm,
    span_distance,
    span_distance_p2_closed,
)

__version__ = "0.1.0"
