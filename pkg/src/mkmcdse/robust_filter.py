"""Local robust EKF: prediction, whitened regression, fixed-point weighted update.

The update solves the weighted least-squares problem built from the stacked
prior/measurement model after Cholesky whitening. Per-component weights come
from a pluggable kernel (see :mod:`mkmcdse.kernels`); unit weights reproduce
the textbook EKF update.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg as sla
from scipy.stats import chi2

from .kernels import BaselineKernel, NoKernel

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-8
JITTER_START = 1e-10
JITTER_STOP = 1e-6


class NumericalError(RuntimeError):
    """A factorization failed even after jitter; the caller should keep its prior."""


class ModelError(RuntimeError):
    """The transition or measurement model produced an unusable value."""


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def copy(self) -> "GaussianBelief":
        return GaussianBelief(self.mean.copy(), self.cov.copy())


@dataclass
class NonlinearModel:
    """Discrete-time model ``u_k = f(u_{k-1}) + q``, ``v_k = h(u_k) + r``.

    ``jac_f`` and ``jac_h`` return the Jacobians of ``f`` and ``h``. ``f`` may be
    stateful (the Holt forecaster is); :func:`predict` calls it exactly once.
    """

    f: Callable[[np.ndarray], np.ndarray]
    jac_f: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    jac_h: Callable[[np.ndarray], np.ndarray]
    Q: np.ndarray
    R: np.ndarray

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.R.shape[0]

    def noise_factor(self) -> np.ndarray:
        """Lower Cholesky factor of ``R``, computed once (``R`` is treated as fixed)."""
        cached = self.__dict__.get("_chol_R")
        if cached is None or cached[0] is not self.R:
            cached = (self.R, safe_cholesky(self.R))
            self.__dict__["_chol_R"] = cached
        return cached[1]


def linear_model(F: np.ndarray, H: np.ndarray, Q: np.ndarray, R: np.ndarray) -> NonlinearModel:
    F = np.asarray(F, dtype=float)
    H = np.asarray(H, dtype=float)
    return NonlinearModel(
        f=lambda u: F @ u,
        jac_f=lambda u: F,
        h=lambda u: H @ u,
        jac_h=lambda u: H,
        Q=np.asarray(Q, dtype=float),
        R=np.asarray(R, dtype=float),
    )


@dataclass
class RegressionProblem:
    """Whitened batch regression ``z = W u + e`` for one measurement update."""

    z: np.ndarray
    W: np.ndarray
    chol_P: np.ndarray
    chol_R: np.ndarray
    prior_mean: np.ndarray
    H: np.ndarray
    innovation: np.ndarray  # v - h(prior_mean)
    R: np.ndarray

    @property
    def n(self) -> int:
        return self.prior_mean.size

    @property
    def m(self) -> int:
        return self.z.size - self.n


@dataclass(frozen=True)
class UpdateConfig:
    """Fixed-point and gating settings.

    ``gate`` switches the innovation gate on. ``gate_mu=None`` means the 99.9 %
    chi-square quantile with ``m`` degrees of freedom. ``literal_gate`` drops
    the weighted noise term from the innovation covariance.
    """

    kernel: BaselineKernel = NoKernel()
    epsilon: float = 1e-6
    max_iters: int = 50
    gate: bool = False
    gate_mu: Optional[float] = None
    gate_quantile: float = 0.999
    literal_gate: bool = False
    weight_floor: float = WEIGHT_FLOOR

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.gate_mu is not None and not self.gate_mu > 0:
            raise ValueError("gate_mu must be positive")

    def threshold(self, m: int) -> float:
        if self.gate_mu is not None:
            return float(self.gate_mu)
        return float(chi2.ppf(self.gate_quantile, max(m, 1)))


@dataclass
class UpdateOutcome:
    belief: GaussianBelief
    iterations: int
    gated: bool
    final_weights: np.ndarray
    gate_stat: float = float("nan")
    floored: int = 0
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# numerics


def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def safe_cholesky(A: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; retries with escalating diagonal jitter.

    Jitter starts at 1e-10 * trace(A)/n and grows tenfold up to 1e-6 * trace(A)/n.
    """
    A = np.asarray(A, dtype=float)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    n = A.shape[0]
    scale = np.trace(A) / n if n else 0.0
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    eps = JITTER_START
    eye = np.eye(n)
    while eps <= JITTER_STOP * (1 + 1e-9):
        try:
            L = np.linalg.cholesky(A + eps * scale * eye)
            log.debug("cholesky needed jitter %.1e", eps)
            return L
        except np.linalg.LinAlgError:
            eps *= 10.0
    raise NumericalError("matrix is not positive definite even after jitter")


def kalman_gain(P: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    """``K = P H^T (H P H^T + R)^-1`` evaluated with a symmetric solve."""
    PHt = P @ H.T
    S = symmetrize(H @ PHt + R)
    try:
        return sla.solve(S, PHt.T, assume_a="pos").T
    except (np.linalg.LinAlgError, sla.LinAlgError) as exc:
        raise NumericalError("innovation covariance is singular") from exc


def joseph_update(P: np.ndarray, K: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    A = np.eye(P.shape[0]) - K @ H
    return symmetrize(A @ P @ A.T + K @ R @ K.T)


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ModelError(f"{what} produced non-finite values")
    return x


# ---------------------------------------------------------------------------
# filter steps


def predict(prior: GaussianBelief, model: NonlinearModel) -> GaussianBelief:
    G = _check_finite(model.jac_f(prior.mean), "transition Jacobian")
    mean = _check_finite(model.f(prior.mean), "transition")
    cov = symmetrize(G @ prior.cov @ G.T + model.Q)
    return GaussianBelief(mean, cov)


def build_regression(prior: GaussianBelief, v: np.ndarray, model: NonlinearModel) -> RegressionProblem:
    u = prior.mean
    H = _check_finite(model.jac_h(u), "measurement Jacobian")
    hu = _check_finite(model.h(u), "measurement function")
    v = np.asarray(v, dtype=float)
    Cp = safe_cholesky(prior.cov)
    Cr = model.noise_factor()
    n = u.size
    y = v - hu + H @ u
    z = np.concatenate(
        [sla.solve_triangular(Cp, u, lower=True), sla.solve_triangular(Cr, y, lower=True)]
    )
    W = np.vstack(
        [sla.solve_triangular(Cp, np.eye(n), lower=True), sla.solve_triangular(Cr, H, lower=True)]
    )
    return RegressionProblem(
        z=z, W=W, chol_P=Cp, chol_R=Cr, prior_mean=u.copy(), H=H, innovation=v - hu, R=model.R
    )


def _weights(prob: RegressionProblem, u: np.ndarray, cfg: UpdateConfig) -> tuple[np.ndarray, int]:
    e = prob.z - prob.W @ u
    w = cfg.kernel.weights(e)
    floored = int(np.count_nonzero(w < cfg.weight_floor))
    return np.maximum(w, cfg.weight_floor), floored


def _weighted_solve(prob: RegressionProblem, w: np.ndarray) -> np.ndarray:
    """``(W^T D W)^-1 W^T D z`` for diagonal ``D = diag(w)``."""
    WtD = prob.W.T * w
    A = WtD @ prob.W
    try:
        return sla.cho_solve(sla.cho_factor(A, lower=True), WtD @ prob.z)
    except (np.linalg.LinAlgError, sla.LinAlgError) as exc:
        raise NumericalError("weighted normal matrix is singular") from exc


def weighted_covariances(prob: RegressionProblem, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Kernel-weighted prior and noise covariances ``C_P D_u^-1 C_P^T`` and ``C_R D_v^-1 C_R^T``."""
    n = prob.n
    Cp, Cr = prob.chol_P, prob.chol_R
    P_t = symmetrize((Cp / w[:n]) @ Cp.T)
    R_t = symmetrize((Cr / w[n:]) @ Cr.T)
    return P_t, R_t


def fixed_point_update(prob: RegressionProblem, cfg: UpdateConfig) -> UpdateOutcome:
    """Iterate the weighted least-squares map from the prior mean until it settles.

    Each pass re-weights the whitened residuals at the previous iterate and
    re-solves the weighted normal equations; this is the same map as the
    gain-form recursion ``u = u_prior + K (v - h(u_prior))`` with the
    weighted covariances. Stops when the relative change of the mean is at most
    ``cfg.epsilon`` or after ``cfg.max_iters`` passes. The covariance uses the
    Joseph form with the weighted prior covariance and the nominal ``R``.
    """
    u_prev = prob.prior_mean
    fixed_weights = isinstance(cfg.kernel, NoKernel)
    total_floored = 0
    it = 0
    w = None
    u = u_prev
    for it in range(1, cfg.max_iters + 1):
        w, floored = _weights(prob, u_prev, cfg)
        total_floored += floored
        u = _weighted_solve(prob, w)
        if not np.all(np.isfinite(u)):
            raise NumericalError("fixed-point iterate is not finite")
        if fixed_weights:
            break
        denom = np.linalg.norm(u_prev)
        change = np.linalg.norm(u - u_prev)
        u_prev = u
        if change <= cfg.epsilon * (denom if denom > 0 else 1.0):
            break
    P_t, R_t = weighted_covariances(prob, w)
    K = kalman_gain(P_t, prob.H, R_t)
    P = joseph_update(P_t, K, prob.H, prob.R)
    if total_floored:
        log.debug("%d weight(s) clamped at floor", total_floored)
    return UpdateOutcome(
        belief=GaussianBelief(u, P),
        iterations=it,
        gated=False,
        final_weights=w,
        floored=total_floored,
    )


def gate_statistic(prob: RegressionProblem, cfg: UpdateConfig) -> float:
    """Normalized innovation ``Pi^T G^-1 Pi`` at the prior mean.

    ``G = H P~ H^T + R~`` with covariances weighted by the kernel at the prior
    residuals, or ``H P~ H^T`` alone when ``cfg.literal_gate`` is set. Returns
    ``inf`` when ``G`` is singular.
    """
    w, _ = _weights(prob, prob.prior_mean, cfg)
    P_t, R_t = weighted_covariances(prob, w)
    G = prob.H @ P_t @ prob.H.T
    if not cfg.literal_gate:
        G = G + R_t
    G = symmetrize(G)
    Pi = prob.innovation
    try:
        stat = float(Pi @ sla.solve(G, Pi, assume_a="sym"))
    except (np.linalg.LinAlgError, sla.LinAlgError, ValueError):
        return float("inf")
    if not np.isfinite(stat):
        return float("inf")
    return stat


def threshold_gate(
    prior: GaussianBelief,
    v: np.ndarray,
    model: NonlinearModel,
    mu: float,
    cfg: UpdateConfig = UpdateConfig(),
) -> tuple[bool, float]:
    """Return ``(passed, stat)``; the boundary ``stat == mu`` passes."""
    try:
        prob = build_regression(prior, v, model)
    except NumericalError:
        return False, float("inf")
    stat = gate_statistic(prob, cfg)
    return bool(abs(stat) <= mu), stat


def robust_update(
    prior: GaussianBelief, v: np.ndarray, model: NonlinearModel, cfg: UpdateConfig
) -> tuple[UpdateOutcome, RegressionProblem]:
    """Build the regression, apply the gate if enabled, then run the fixed point.

    A rejected measurement returns the prior unchanged (same arrays) with
    ``gated=True``.
    """
    prob = build_regression(prior, v, model)
    if cfg.gate:
        stat = gate_statistic(prob, cfg)
        if not abs(stat) <= cfg.threshold(prob.m):
            w, _ = _weights(prob, prob.prior_mean, cfg)
            return (
                UpdateOutcome(belief=prior, iterations=0, gated=True, final_weights=w, gate_stat=stat),
                prob,
            )
    else:
        stat = float("nan")
    out = fixed_point_update(prob, cfg)
    out.gate_stat = stat
    return out, prob


def fixed_point_map(prob: RegressionProblem, cfg: UpdateConfig, u: np.ndarray) -> np.ndarray:
    """One application of the weighted least-squares map ``g(u)``."""
    w, _ = _weights(prob, u, cfg)
    return _weighted_solve(prob, w)


def contraction_diagnostic(
    prob: RegressionProblem,
    cfg: UpdateConfig,
    u: Optional[np.ndarray] = None,
    step: float = 1e-5,
) -> float:
    """Induced 1-norm of a central finite-difference Jacobian of ``g`` at ``u``.

    Values below one indicate the fixed-point map is locally contracting.
    """
    u = prob.prior_mean if u is None else np.asarray(u, dtype=float)
    n = u.size
    J = np.empty((n, n))
    for j in range(n):
        d = np.zeros(n)
        d[j] = step
        J[:, j] = (fixed_point_map(prob, cfg, u + d) - fixed_point_map(prob, cfg, u - d)) / (2 * step)
    return float(np.abs(J).sum(axis=0).max())


class RobustEKF:
    """Single-node filter: predict, then the robust update, keeping the prior on failure."""

    def __init__(self, model: NonlinearModel, belief: GaussianBelief, cfg: UpdateConfig):
        self.model = model
        self.belief = belief.copy()
        self.cfg = cfg
        self.failures = 0

    def step(self, v: np.ndarray) -> UpdateOutcome:
        prior = predict(self.belief, self.model)
        try:
            out, _ = robust_update(prior, v, self.model, self.cfg)
        except (NumericalError, ModelError) as exc:
            log.warning("update skipped: %s", exc)
            self.failures += 1
            out = UpdateOutcome(prior, 0, False, np.ones(prior.mean.size + self.model.m))
            out.diagnostics["failed"] = str(exc)
        self.belief = out.belief
        return out
