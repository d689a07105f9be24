"""Robust distributed state estimation with a Student's t / Cauchy mixture correntropy criterion."""

from .kernels import (
    GaussianKernel,
    GaussianMixtureKernel,
    KernelParams,
    MkmcKernel,
    NoKernel,
    mkmc_value,
    weight_matrix,
    weight_value,
)
from .robust_filter import GaussianBelief, NonlinearModel, RobustEKF, UpdateConfig, robust_update

__version__ = "0.1.0"

__all__ = [
    "GaussianBelief", "GaussianKernel", "GaussianMixtureKernel", "KernelParams", "MkmcKernel",
    "NoKernel", "NonlinearModel", "RobustEKF", "UpdateConfig", "mkmc_value", "robust_update",
    "weight_matrix", "weight_value",
]
