"""Gaussian-flow importance sampling and particle filtering."""

from .errors import (
    ConfigError,
    CovarianceError,
    DegenerateWeightsError,
    DomainError,
    GaussFlowError,
    SqrtDomainError,
    StepRejected,
    SylvesterSingularError,
)
from .filter import ProposalKind, kalman_filter, propose, run_filter
from .flow_sampler import (
    StepControlConfig,
    WeightedSet,
    adapt_step,
    flow_sample,
    resample,
    resample_move,
)
from .gflow_approx import NonlinearGaussianTarget, agf_step, local_error, step_jacobian, weight_step
from .gflow_linear import FlowConfig, GaussianMoments, LinearGaussianModel, exact_step, sequence_moments

__version__ = "0.1.0"
