"""Correntropy kernels and the per-component weights used by every filter.

All kernels operate on *whitened* error components, so bandwidths are in
whitened (dimensionless) units. Functions accept scalars or numpy arrays and
broadcast elementwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

ArrayLike = Union[float, np.ndarray]


class KernelParameterError(ValueError):
    """Raised for non-positive bandwidths or out-of-range mixture weights."""


def _require_positive(name: str, value: float) -> None:
    if not (math.isfinite(value) and value > 0):
        raise KernelParameterError(f"{name} must be positive and finite, got {value!r}")


def _require_unit_interval(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0):
        raise KernelParameterError(f"{name} must lie in [0, 1], got {value!r}")


@dataclass(frozen=True)
class KernelParams:
    """Free coefficients of the Student's t / Cauchy mixture kernel.

    Attributes:
        theta: weight of the Student's t component, in [0, 1].
        alpha: Student's t bandwidth.
        omega: Cauchy scale (a squared bandwidth).
        lam: Student's t degrees of freedom.
        a1: Student's t center.
        a2: Cauchy center.
    """

    theta: float = 0.5
    alpha: float = 2.2
    omega: float = 1.5
    lam: float = 3.0
    a1: float = -0.025
    a2: float = 0.0032

    def __post_init__(self) -> None:
        _require_unit_interval("theta", self.theta)
        _require_positive("alpha", self.alpha)
        _require_positive("omega", self.omega)
        _require_positive("lam", self.lam)
        if not (math.isfinite(self.a1) and math.isfinite(self.a2)):
            raise KernelParameterError("kernel centers must be finite")


def student_t_kernel(e: ArrayLike, a1: float, alpha: float, lam: float) -> ArrayLike:
    """Student's t kernel ``(1 + (e - a1)^2 / (lam alpha^2))^(-(lam + 2) / 2)``."""
    _require_positive("alpha", alpha)
    _require_positive("lam", lam)
    d = np.asarray(e, dtype=float) - a1
    out = (1.0 + d * d / (lam * alpha * alpha)) ** (-(lam + 2.0) / 2.0)
    return out if np.ndim(out) else float(out)


def cauchy_kernel(e: ArrayLike, a2: float, omega: float) -> ArrayLike:
    """Cauchy kernel ``1 / (1 + (e - a2)^2 / omega)``."""
    _require_positive("omega", omega)
    d = np.asarray(e, dtype=float) - a2
    out = 1.0 / (1.0 + d * d / omega)
    return out if np.ndim(out) else float(out)


def mkmc_value(e: ArrayLike, p: KernelParams) -> ArrayLike:
    """Mixture ``theta * S(e - a1) + (1 - theta) * C(e - a2)``.

    The pure-component cases return the component kernel itself, so that the
    reductions at ``theta`` in {0, 1} are exact rather than ``1.0 * x + 0.0 * y``.
    """
    if p.theta == 1.0:
        return student_t_kernel(e, p.a1, p.alpha, p.lam)
    if p.theta == 0.0:
        return cauchy_kernel(e, p.a2, p.omega)
    s = student_t_kernel(e, p.a1, p.alpha, p.lam)
    c = cauchy_kernel(e, p.a2, p.omega)
    return p.theta * s + (1.0 - p.theta) * c


def mkmc_quadratic_approx(e: ArrayLike, p: KernelParams) -> ArrayLike:
    """Second-order expansion ``1 - c e^2`` of the zero-centered mixture.

    ``c = theta (lam + 2) / (2 lam alpha^2) + (1 - theta) / omega``, the exact
    curvature of the two kernels at their centers.
    """
    coef = p.theta * (p.lam + 2.0) / (2.0 * p.lam * p.alpha**2) + (1.0 - p.theta) / p.omega
    e = np.asarray(e, dtype=float)
    out = 1.0 - coef * e * e
    return out if np.ndim(out) else float(out)


def gaussian_kernel(e: ArrayLike, sigma: float) -> ArrayLike:
    _require_positive("sigma", sigma)
    e = np.asarray(e, dtype=float)
    out = np.exp(-(e * e) / (2.0 * sigma * sigma))
    return out if np.ndim(out) else float(out)


# ---------------------------------------------------------------------------
# Baseline kernels: one weight function per filter family


@dataclass(frozen=True)
class NoKernel:
    """Unit weights everywhere: the plain (distributed) EKF."""

    name = "none"

    def weights(self, e: np.ndarray) -> np.ndarray:
        return np.ones_like(np.asarray(e, dtype=float))


@dataclass(frozen=True)
class GaussianKernel:
    """Single Gaussian kernel (maximum correntropy criterion)."""

    sigma: float = 1.8
    name = "gaussian"

    def __post_init__(self) -> None:
        _require_positive("sigma", self.sigma)

    def weights(self, e: np.ndarray) -> np.ndarray:
        return np.asarray(gaussian_kernel(e, self.sigma), dtype=float)


@dataclass(frozen=True)
class GaussianMixtureKernel:
    """Convex combination of two zero-mean Gaussian kernels (mixture correntropy)."""

    theta: float = 0.5
    sigma1: float = 1.6
    sigma2: float = 1.2
    name = "gaussian_mixture"

    def __post_init__(self) -> None:
        _require_unit_interval("theta", self.theta)
        _require_positive("sigma1", self.sigma1)
        _require_positive("sigma2", self.sigma2)

    def weights(self, e: np.ndarray) -> np.ndarray:
        g1 = gaussian_kernel(e, self.sigma1)
        g2 = gaussian_kernel(e, self.sigma2)
        return np.asarray(self.theta * g1 + (1.0 - self.theta) * g2, dtype=float)


@dataclass(frozen=True)
class MkmcKernel:
    """Student's t / Cauchy mixture with non-zero centers."""

    params: KernelParams = KernelParams()
    name = "mkmc"

    def weights(self, e: np.ndarray) -> np.ndarray:
        return np.asarray(mkmc_value(np.asarray(e, dtype=float), self.params), dtype=float)


BaselineKernel = Union[NoKernel, GaussianKernel, GaussianMixtureKernel, MkmcKernel]


def weight_value(e: ArrayLike, k: BaselineKernel) -> ArrayLike:
    """Weight assigned to an error component (or array of components) by kernel ``k``."""
    out = k.weights(np.asarray(e, dtype=float))
    return out if np.ndim(out) else float(out)


def weight_matrix(
    errors: np.ndarray, k: BaselineKernel, n: int, floor: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Split per-component weights into the state block and the measurement block.

    Args:
        errors: whitened residual vector of length ``n + m``.
        k: kernel producing the weights.
        n: state dimension; the first ``n`` entries belong to the prior block.
        floor: lower clamp applied to every weight (keeps inverses finite).

    Returns:
        ``(D_u, D_v)`` as dense diagonal matrices.
    """
    errors = np.asarray(errors, dtype=float).ravel()
    if n < 0 or n > errors.size or errors.size == 0:
        raise ValueError(f"cannot split {errors.size} errors with state dimension {n}")
    w = k.weights(errors)
    if floor > 0:
        w = np.maximum(w, floor)
    return np.diag(w[:n]), np.diag(w[n:])
