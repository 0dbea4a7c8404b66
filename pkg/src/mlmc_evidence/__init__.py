"""Unbiased multilevel Monte Carlo estimation of the log evidence and its
gradients, with a two-objective training loop for latent-variable models."""

from .errors import (
    ContractViolation,
    DivergenceError,
    ResourceGuardExceeded,
    UnsupportedOperation,
)
from .estimator import (
    EstimatorConfig,
    EvidenceEstimate,
    LevelDistribution,
    LevelEstimate,
    estimate_log_evidence,
    level_estimate,
    level_mass,
    sample_level,
)
from .gradients import GradientEstimate, estimate_gradients
from .logspace import StreamingMoments, combine_halves, log_mean_exp, softmax_weights
from .models import (
    BernoulliGaussianModel,
    Dataset,
    GaussianConjugateModel,
    LatentVariableModel,
    LogWeightSample,
    load_dataset,
    save_dataset,
)
from .trainer import RunRecord, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BernoulliGaussianModel",
    "ContractViolation",
    "Dataset",
    "DivergenceError",
    "EstimatorConfig",
    "EvidenceEstimate",
    "GaussianConjugateModel",
    "GradientEstimate",
    "LatentVariableModel",
    "LevelDistribution",
    "LevelEstimate",
    "LogWeightSample",
    "ResourceGuardExceeded",
    "RunRecord",
    "StreamingMoments",
    "TrainConfig",
    "UnsupportedOperation",
    "combine_halves",
    "estimate_gradients",
    "estimate_log_evidence",
    "level_estimate",
    "level_mass",
    "load_dataset",
    "log_mean_exp",
    "sample_level",
    "save_dataset",
    "softmax_weights",
    "train",
]
