"""Multi-task Gaussian processes and Bayesian optimization with a biased simulator."""
from .kernels import SpatialHyperparams, TaskCovariance, build_task_covariance, icm_covariance, rbf_covariance
from .mtgp import Dataset, FittedModel, Observation, fit, inter_task_correlation, posterior

__all__ = [
    "Dataset",
    "FittedModel",
    "Observation",
    "SpatialHyperparams",
    "TaskCovariance",
    "build_task_covariance",
    "fit",
    "icm_covariance",
    "inter_task_correlation",
    "posterior",
    "rbf_covariance",
]
