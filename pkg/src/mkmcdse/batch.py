"""Stacked-node version of the robust update.

A network step solves one small regression per node. Doing them one at a time
is dominated by interpreter overhead, so this module stacks the nodes along a
leading axis and runs the same fixed-point map on all of them at once. Each
node keeps its own stopping rule: a converged node is frozen while the others
continue, so the per-node iterates equal those of
:func:`mkmcdse.robust_filter.fixed_point_update`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .kernels import BaselineKernel, NoKernel
from .robust_filter import (
    GaussianBelief,
    NonlinearModel,
    NumericalError,
    UpdateConfig,
    _check_finite,
    safe_cholesky,
)


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def batch_cholesky(A: np.ndarray) -> np.ndarray:
    """Lower factors of a stack; matrices that fail fall back to jittered factorization."""
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return np.stack([safe_cholesky(a) for a in A])


def _solve(A: np.ndarray, B: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.solve(A, B)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is singular") from exc


@dataclass
class BatchProblem:
    """Whitened regressions of ``k`` nodes: ``z[i] = W[i] u + e``."""

    z: np.ndarray  # (k, N)
    W: np.ndarray  # (k, N, n)
    chol_P: np.ndarray  # (k, n, n)
    chol_R: np.ndarray  # (k, m, m)
    prior_mean: np.ndarray  # (k, n)
    H: np.ndarray  # (k, m, n)
    innovation: np.ndarray  # (k, m)
    R: np.ndarray  # (k, m, m)

    @property
    def n(self) -> int:
        return self.prior_mean.shape[1]

    @property
    def m(self) -> int:
        return self.H.shape[1]

    def __len__(self) -> int:
        return self.z.shape[0]

    def take(self, idx) -> "BatchProblem":
        return BatchProblem(*(a[idx] for a in (self.z, self.W, self.chol_P, self.chol_R, self.prior_mean,
                                                self.H, self.innovation, self.R)))


def batch_regression(
    priors: Sequence[GaussianBelief], vs: Sequence[np.ndarray], models: Sequence[NonlinearModel]
) -> BatchProblem:
    """Stack the whitened regressions; every node must have the same ``n`` and ``m``."""
    U = np.stack([p.mean for p in priors])
    P = np.stack([p.cov for p in priors])
    H = np.stack([_check_finite(md.jac_h(u), "measurement Jacobian") for md, u in zip(models, U)])
    hu = np.stack([_check_finite(md.h(u), "measurement function") for md, u in zip(models, U)])
    R = np.stack([md.R for md in models])
    V = np.stack([np.asarray(v, dtype=float) for v in vs])
    k, n = U.shape
    Cp = batch_cholesky(P)
    Cr = np.stack([md.noise_factor() for md in models])
    y = V - hu + np.einsum("kmn,kn->km", H, U)
    Wu = _solve(Cp, np.broadcast_to(np.eye(n), (k, n, n)), "prior factor")
    rhs = np.concatenate([H, y[:, :, None]], axis=2)
    d = np.diagonal(Cr, axis1=1, axis2=2)
    if np.count_nonzero(Cr) == np.count_nonzero(d):
        sol = rhs / d[:, :, None]  # diagonal noise: whitening is a row scaling
    else:
        sol = _solve(Cr, rhs, "noise factor")
    W = np.concatenate([Wu, sol[:, :, :n]], axis=1)
    z = np.concatenate([np.einsum("kij,kj->ki", Wu, U), sol[:, :, n]], axis=1)
    return BatchProblem(z, W, Cp, Cr, U, H, V - hu, R)


def batch_weights(E: np.ndarray, kernels: Sequence[BaselineKernel], floor: float) -> np.ndarray:
    """Kernel weights of each row of ``E`` with that row's kernel, clamped at ``floor``."""
    k0 = kernels[0]
    if all(k == k0 for k in kernels[1:]):
        w = k0.weights(E)
    else:
        w = np.stack([kk.weights(e) for kk, e in zip(kernels, E)])
    return np.maximum(w, floor)


def _weighted_solve(W: np.ndarray, z: np.ndarray, w: np.ndarray) -> np.ndarray:
    WtD = np.swapaxes(W, 1, 2) * w[:, None, :]
    A = WtD @ W
    rhs = np.einsum("kni,ki->kn", WtD, z)
    return _solve(A, rhs[:, :, None], "weighted normal matrix")[:, :, 0]


@dataclass
class BatchOutcome:
    mean: np.ndarray  # (k, n)
    weights: np.ndarray  # (k, N)
    iterations: np.ndarray  # (k,)


def batch_fixed_point(bp: BatchProblem, cfg: UpdateConfig, kernels: Sequence[BaselineKernel]) -> BatchOutcome:
    """Run the weighted least-squares map on every node until each one settles."""
    k = len(bp)
    u = bp.prior_mean.copy()
    w = np.ones_like(bp.z)
    iters = np.zeros(k, dtype=int)
    fixed = all(isinstance(kk, NoKernel) for kk in kernels)
    # working copies restricted to the nodes still iterating
    active = np.arange(k)
    W, z, up, sub_k = bp.W, bp.z, u.copy(), list(kernels)
    for it in range(1, cfg.max_iters + 1):
        e = z - (W @ up[:, :, None])[:, :, 0]
        wa = batch_weights(e, sub_k, cfg.weight_floor)
        ua = _weighted_solve(W, z, wa)
        if not np.all(np.isfinite(ua)):
            raise NumericalError("fixed-point iterate is not finite")
        w[active] = wa
        u[active] = ua
        iters[active] = it
        if fixed:
            break
        denom = np.sqrt(np.einsum("kn,kn->k", up, up))
        d = ua - up
        change = np.sqrt(np.einsum("kn,kn->k", d, d))
        done = change <= cfg.epsilon * np.where(denom > 0, denom, 1.0)
        if done.all():
            break
        if done.any():
            keep = ~done
            active = active[keep]
            W, z, ua = W[keep], z[keep], ua[keep]
            sub_k = [kk for kk, f in zip(sub_k, keep) if f]
        up = ua
    return BatchOutcome(u, w, iters)


def batch_weighted_covariances(bp: BatchProblem, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = bp.n
    Cp, Cr = bp.chol_P, bp.chol_R
    P_t = _sym((Cp / w[:, None, :n]) @ np.swapaxes(Cp, 1, 2))
    R_t = _sym((Cr / w[:, None, n:]) @ np.swapaxes(Cr, 1, 2))
    return P_t, R_t


def batch_posterior_cov(bp: BatchProblem, w: np.ndarray) -> np.ndarray:
    """Joseph-form covariance with the weighted prior, weighted gain and nominal ``R``."""
    P_t, R_t = batch_weighted_covariances(bp, w)
    H = bp.H
    PHt = P_t @ np.swapaxes(H, 1, 2)
    S = _sym(H @ PHt + R_t)
    K = np.swapaxes(_solve(S, np.swapaxes(PHt, 1, 2), "innovation covariance"), 1, 2)
    A = np.eye(bp.n) - K @ H
    return _sym(A @ P_t @ np.swapaxes(A, 1, 2) + K @ bp.R @ np.swapaxes(K, 1, 2))


def batch_gate_statistic(bp: BatchProblem, cfg: UpdateConfig, kernels: Sequence[BaselineKernel]) -> np.ndarray:
    """Per-node innovation statistic with kernel-weighted covariances at the prior."""
    e = bp.z - np.einsum("kNn,kn->kN", bp.W, bp.prior_mean)
    w = batch_weights(e, kernels, cfg.weight_floor)
    P_t, R_t = batch_weighted_covariances(bp, w)
    G = bp.H @ P_t @ np.swapaxes(bp.H, 1, 2)
    if not cfg.literal_gate:
        G = G + R_t
    G = _sym(G)
    out = np.empty(len(bp))
    try:
        sol = np.linalg.solve(G, bp.innovation[:, :, None])[:, :, 0]
        out[:] = np.einsum("km,km->k", bp.innovation, sol)
    except np.linalg.LinAlgError:
        for i in range(len(bp)):
            try:
                out[i] = bp.innovation[i] @ np.linalg.solve(G[i], bp.innovation[i])
            except np.linalg.LinAlgError:
                out[i] = np.inf
    out[~np.isfinite(out)] = np.inf
    return out


def batch_information(bp: BatchProblem, w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Measurement information ``(Omega, Xi)`` and weighted prior information per node."""
    n = bp.n
    Wu, Wv = bp.W[:, :n], bp.W[:, n:]
    WtDv = np.swapaxes(Wv, 1, 2) * w[:, None, n:]
    Omega = _sym(WtDv @ Wv)
    Xi = np.einsum("kni,ki->kn", WtDv, bp.z[:, n:])
    prior_info = _sym((np.swapaxes(Wu, 1, 2) * w[:, None, :n]) @ Wu)
    return Omega, Xi, prior_info


def batch_fuse(
    means: np.ndarray, prior_info: np.ndarray, Omega: np.ndarray, Xi: np.ndarray, b: int
) -> tuple[np.ndarray, np.ndarray]:
    """``P = (P~^-1 + b Omega)^-1`` and ``u = P (P~^-1 u_prior + b Xi)`` for a stack of nodes."""
    info = _sym(prior_info + b * Omega)
    L = batch_cholesky(info)
    n = means.shape[1]
    Linv = _solve(L, np.broadcast_to(np.eye(n), L.shape), "fused information factor")
    cov = _sym(np.swapaxes(Linv, 1, 2) @ Linv)
    rhs = np.einsum("kij,kj->ki", prior_info, means) + b * Xi
    mean = np.einsum("kij,kj->ki", cov, rhs)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise NumericalError("distributed update produced non-finite values")
    return mean, cov


def prior_information(covs: np.ndarray) -> np.ndarray:
    L = batch_cholesky(covs)
    n = covs.shape[1]
    Linv = _solve(L, np.broadcast_to(np.eye(n), L.shape), "prior factor")
    return _sym(np.swapaxes(Linv, 1, 2) @ Linv)
