"""Data-driven selection of the mixture-kernel coefficients.

Centers come from a two-cluster K-means on recent whitened residuals, the
bandwidth pair from a grid search on the density-matching objective
``-1/2 t^T Theta t + t^T Gamma``, and the mixture weight from the
regularized closed form ``(Theta + gamma I)^-1 Gamma``.
"""

from __future__ import annotations

import bisect
import itertools
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .kernels import KernelParams

log = logging.getLogger(__name__)

DEFAULT_ALPHA_GRID = (0.5, 1.0, 1.5, 2.2, 3.0, 5.0)
DEFAULT_OMEGA_GRID = (0.5, 1.0, 1.5, 2.5, 5.0)


class ErrorWindow:
    """Bounded FIFO of scalar residual samples; non-finite values are dropped."""

    def __init__(self, capacity: int = 200, samples: Iterable[float] = ()):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf: deque[float] = deque(maxlen=capacity)
        self.extend(samples)

    def extend(self, samples: Iterable[float]) -> int:
        arr = np.asarray(list(samples) if not isinstance(samples, np.ndarray) else samples, dtype=float).ravel()
        ok = arr[np.isfinite(arr)]
        if ok.size < arr.size:
            log.debug("rejected %d non-finite residual(s)", arr.size - ok.size)
        self._buf.extend(ok.tolist())
        return int(ok.size)

    @property
    def samples(self) -> np.ndarray:
        return np.fromiter(self._buf, dtype=float, count=len(self._buf))

    def __len__(self) -> int:
        return len(self._buf)


@dataclass(frozen=True)
class TuningConfig:
    gamma: float = 1e-3
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    omega_grid: tuple[float, ...] = DEFAULT_OMEGA_GRID
    quad_points: int = 2049
    quad_halfwidth: float = 8.0  # in units of the widest bandwidth
    kmeans_restarts: int = 5
    kmeans_max_iters: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.alpha_grid or not self.omega_grid:
            raise ValueError("bandwidth grid must be non-empty")
        if min(self.alpha_grid) <= 0 or min(self.omega_grid) <= 0:
            raise ValueError("bandwidth grid entries must be positive")
        if self.quad_points < 2:
            raise ValueError("quad_points must be >= 2")


@dataclass(frozen=True)
class GramPair:
    Theta: np.ndarray  # 2x2
    Gamma: np.ndarray  # 2


# ---------------------------------------------------------------------------
# centers


def _as_samples(win) -> np.ndarray:
    x = win.samples if isinstance(win, ErrorWindow) else np.asarray(win, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("no residual samples")
    return x


def kmeans_1d(
    x: np.ndarray, restarts: int = 5, max_iters: int = 100, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k=2 on scalar data, k-means++ seeding, best of ``restarts``.

    Returns ``(centers, labels)``; ``centers`` is sorted ascending.
    """
    x = np.asarray(x, dtype=float).ravel()
    if np.all(x == x[0]):
        return np.array([x[0], x[0]]), np.zeros(x.size, dtype=int)
    rng = np.random.default_rng(seed)
    R = max(int(restarts), 1)
    c = np.empty((R, 2))
    for r in range(R):
        c0 = x[rng.integers(x.size)]
        d2 = (x - c0) ** 2
        tot = d2.sum()
        c1 = x[rng.choice(x.size, p=d2 / tot)] if tot > 0 else c0
        c[r] = (c0, c1)
    # in 1-D each cluster is a contiguous run of the sorted data, so an
    # assignment is a split index found by bisection at the midpoint
    xs = np.sort(x).tolist()
    csum = [0.0, *itertools.accumulate(xs)]
    N, total = len(xs), csum[-1]
    for r in range(R):
        c0, c1 = float(c[r, 0]), float(c[r, 1])
        for _ in range(max_iters):
            mid = 0.5 * (c0 + c1)
            if c1 > c0:
                k = bisect.bisect_right(xs, mid)
                n1, s1 = N - k, total - csum[k]
            elif c1 < c0:
                k = bisect.bisect_left(xs, mid)
                n1, s1 = k, csum[k]
            else:
                n1, s1 = 0, 0.0
            n0, s0 = N - n1, total - s1
            new0 = s0 / n0 if n0 > 0 else c0
            new1 = s1 / n1 if n1 > 0 else c1
            if new0 == c0 and new1 == c1:
                break
            c0, c1 = new0, new1
        c[r] = (c0, c1)
    right = np.abs(x[None, :] - c[:, 1:2]) < np.abs(x[None, :] - c[:, 0:1])
    sse = np.where(right, (x[None, :] - c[:, 1:2]) ** 2, (x[None, :] - c[:, 0:1]) ** 2).sum(axis=1)
    best = int(np.argmin(sse))
    centers = c[best]
    labels = right[best].astype(int)
    if centers[0] > centers[1]:
        centers = centers[::-1]
        labels = 1 - labels
    return centers.copy(), labels


def estimate_centers(win, restarts: int = 5, max_iters: int = 100, seed: int = 0) -> tuple[float, float]:
    """Kernel centers ``(a1, a2)`` from a two-cluster K-means of the residuals.

    The cluster with the heavier tail (larger fourth central moment) is paired
    with the Cauchy kernel (``a2``); on a tie the lower center goes to ``a1``.
    """
    x = _as_samples(win)
    centers, labels = kmeans_1d(x, restarts, max_iters, seed)
    if centers[0] == centers[1]:
        return float(centers[0]), float(centers[1])
    m4 = []
    for k in (0, 1):
        xs = x[labels == k]
        m4.append(float(np.mean((xs - xs.mean()) ** 4)) if xs.size else 0.0)
    if m4[0] > m4[1]:
        return float(centers[1]), float(centers[0])
    return float(centers[0]), float(centers[1])


# ---------------------------------------------------------------------------
# Gram matrices


def _student(d: np.ndarray, alpha, lam: float) -> np.ndarray:
    return (1.0 + d * d / (lam * np.asarray(alpha) ** 2)) ** (-(lam + 2.0) / 2.0)


def _cauchy(d: np.ndarray, omega) -> np.ndarray:
    return 1.0 / (1.0 + d * d / np.asarray(omega))


def quad_domain(
    centers: tuple[float, float], alpha: float, omega: float, halfwidth: float = 8.0
) -> tuple[float, float]:
    """Integration interval ``[min(a) - c*s, max(a) + c*s]`` with ``s = max(alpha, sqrt(omega))``."""
    factor = halfwidth
    if factor < 5.0:
        log.info("quadrature half-width %.3g bandwidths is too narrow; widened to 5", factor)
        factor = 5.0
    s = max(alpha, np.sqrt(omega))
    return min(centers) - factor * s, max(centers) + factor * s


def build_gram(
    win,
    centers: tuple[float, float],
    bw: tuple[float, float],
    lam: float,
    cfg: TuningConfig = TuningConfig(),
    domain: Optional[tuple[float, float]] = None,
) -> GramPair:
    """Kernel Gram matrix (trapezoid quadrature) and sample means of both kernels."""
    x = _as_samples(win)
    a1, a2 = centers
    alpha, omega = bw
    if alpha <= 0 or omega <= 0:
        raise ValueError("bandwidths must be positive")
    lo, hi = domain if domain is not None else quad_domain(centers, alpha, omega, cfg.quad_halfwidth)
    lo = min(lo, min(centers) - 5 * max(alpha, np.sqrt(omega)))
    hi = max(hi, max(centers) + 5 * max(alpha, np.sqrt(omega)))
    t = np.linspace(lo, hi, cfg.quad_points)
    f1 = _student(t - a1, alpha, lam)
    f2 = _cauchy(t - a2, omega)
    t11 = trapezoid(f1 * f1, t)
    t12 = trapezoid(f1 * f2, t)
    t22 = trapezoid(f2 * f2, t)
    Theta = np.array([[t11, t12], [t12, t22]])
    Gamma = np.array([np.mean(_student(x - a1, alpha, lam)), np.mean(_cauchy(x - a2, omega))])
    return GramPair(Theta, Gamma)


def theta_star(g: GramPair, gamma: float) -> np.ndarray:
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return np.linalg.solve(g.Theta + gamma * np.eye(2), g.Gamma)


def solve_theta(g: GramPair, gamma: float) -> float:
    """Scalar mixture weight: the closed-form optimum normalized to sum one, clamped to [0, 1]."""
    t = theta_star(g, gamma)
    s = t[0] + t[1]
    if not s > 0:
        log.info("degenerate mixture solution %s; falling back to 0.5", t)
        return 0.5
    return float(np.clip(t[0] / s, 0.0, 1.0))


def objective(g: GramPair, t: np.ndarray) -> float:
    return float(-0.5 * t @ g.Theta @ t + t @ g.Gamma)


@dataclass
class BandwidthSearch:
    alpha: float
    omega: float
    objective: np.ndarray  # shape (len(alpha_grid), len(omega_grid))
    Theta: np.ndarray  # (A, O, 2, 2)
    Gamma: np.ndarray  # (A, O, 2)
    index: tuple[int, int] = (0, 0)  # grid cell of the selected pair

    def gram(self) -> GramPair:
        return GramPair(self.Theta[self.index], self.Gamma[self.index])

    @property
    def best(self) -> float:
        return float(self.objective.max())


@lru_cache(maxsize=256)
def _quadrature_gram(
    gap: float, lam: float, alphas: tuple, omegas: tuple, points: int, halfwidth: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gram entries for every grid cell with centers ``(0, gap)``, ``gap >= 0``.

    Both kernels are even and translation invariant, so the integrals depend
    only on the distance between the centers. Keying the cache on that
    distance keeps results independent of call history.
    """
    a = np.asarray(alphas, dtype=float)
    o = np.asarray(omegas, dtype=float)
    lo, hi = quad_domain((0.0, gap), float(a.max()), float(o.max()), halfwidth)
    t = np.linspace(lo, hi, points)
    S = _student(t[None, :], a[:, None], lam)  # (A, Q)
    C = _cauchy(t[None, :] - gap, o[:, None])  # (O, Q)
    wq = np.full(t.size, t[1] - t[0])
    wq[0] = wq[-1] = 0.5 * (t[1] - t[0])
    out = ((S * S) @ wq, (C * C) @ wq, (S * wq) @ C.T)
    for arr in out:
        arr.setflags(write=False)
    return out


def select_bandwidths(win, centers: tuple[float, float], lam: float, cfg: TuningConfig = TuningConfig()) -> BandwidthSearch:
    """Grid search over ``alpha_grid x omega_grid``; ties go to the smaller ``alpha + omega``.

    All candidates share one quadrature domain sized for the widest bandwidth.
    """
    x = _as_samples(win)
    a1, a2 = centers
    alphas = np.asarray(cfg.alpha_grid, dtype=float)
    omegas = np.asarray(cfg.omega_grid, dtype=float)
    t11, t22, t12 = _quadrature_gram(
        abs(float(a2) - float(a1)), float(lam), tuple(cfg.alpha_grid), tuple(cfg.omega_grid),
        cfg.quad_points, cfg.quad_halfwidth,
    )
    A, O = alphas.size, omegas.size
    Theta = np.empty((A, O, 2, 2))
    Theta[..., 0, 0] = t11[:, None]
    Theta[..., 1, 1] = t22[None, :]
    Theta[..., 0, 1] = Theta[..., 1, 0] = t12
    g1 = _student(x[None, :] - a1, alphas[:, None], lam).mean(axis=1)  # (A,)
    g2 = _cauchy(x[None, :] - a2, omegas[:, None]).mean(axis=1)  # (O,)
    Gamma = np.empty((A, O, 2))
    Gamma[..., 0] = g1[:, None]
    Gamma[..., 1] = g2[None, :]
    # closed-form 2x2 solve for every grid cell
    M = Theta + cfg.gamma * np.eye(2)
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    th0 = (M[..., 1, 1] * Gamma[..., 0] - M[..., 0, 1] * Gamma[..., 1]) / det
    th1 = (M[..., 0, 0] * Gamma[..., 1] - M[..., 1, 0] * Gamma[..., 0]) / det
    th = np.stack([th0, th1], axis=-1)
    obj = -0.5 * np.einsum("aoi,aoij,aoj->ao", th, Theta, th) + np.einsum("aoi,aoi->ao", th, Gamma)
    best = obj.max()
    tied = np.argwhere(obj >= best - 1e-15 * max(1.0, abs(best)))
    ia, io = min(tied, key=lambda ij: (alphas[ij[0]] + omegas[ij[1]], ij[0], ij[1]))
    return BandwidthSearch(float(alphas[ia]), float(omegas[io]), obj, Theta, Gamma, (int(ia), int(io)))


def calibrate_theta(samples, params: KernelParams, cfg: TuningConfig = TuningConfig()) -> float:
    """Mixture weight for fixed centers and bandwidths, fitted to ``samples``.

    Used offline to pick the weight of a fixed-coefficient filter from draws
    of the nominal whitened noise; the other coefficients are left untouched.
    """
    g = build_gram(samples, (params.a1, params.a2), (params.alpha, params.omega), params.lam, cfg)
    return solve_theta(g, cfg.gamma)


def center_candidates(
    x: np.ndarray, cfg: TuningConfig, extra: Sequence[tuple[float, float]] = ()
) -> list[tuple[float, float]]:
    """K-means centers (both kernel assignments) followed by any ``extra`` pairs, deduplicated."""
    a1, a2 = estimate_centers(x, cfg.kmeans_restarts, cfg.kmeans_max_iters, cfg.seed)
    out: list[tuple[float, float]] = []
    for c in [(a1, a2), (a2, a1), *extra]:
        c = (float(c[0]), float(c[1]))
        if c not in out:
            out.append(c)
    return out


def adapt(
    win,
    lam: float,
    cfg: TuningConfig = TuningConfig(),
    previous: Optional[KernelParams] = None,
    anchors: Sequence[tuple[float, float]] = (),
) -> KernelParams:
    """Full coefficient selection: centers, then bandwidths, then mixture weight.

    Candidate centers are the K-means pair plus ``previous``'s centers and any
    ``anchors``; the pair whose best bandwidths reach the highest fit objective
    wins (first candidate on ties). Falls back to ``previous`` (or the
    defaults) if any stage fails.
    """
    previous = previous if previous is not None else KernelParams(lam=lam)
    try:
        x = _as_samples(win)
        cands = center_candidates(x, cfg, [(previous.a1, previous.a2), *anchors])
        best = None
        for c in cands:
            search = select_bandwidths(x, c, lam, cfg)
            if best is None or search.best > best[1].best:
                best = (c, search)
        (a1, a2), search = best
        theta = solve_theta(search.gram(), cfg.gamma)
        return KernelParams(theta=theta, alpha=search.alpha, omega=search.omega, lam=lam, a1=a1, a2=a2)
    except (ValueError, np.linalg.LinAlgError) as exc:
        log.info("adaptation failed (%s); keeping previous coefficients", exc)
        return previous


@dataclass
class KernelTuner:
    """Per-node adaptation state: residual window plus the current coefficients."""

    defaults: KernelParams = KernelParams()
    cfg: TuningConfig = TuningConfig()
    capacity: int = 200
    min_samples: int = 20
    window: ErrorWindow = field(init=False)
    params: KernelParams = field(init=False)
    trace: list = field(default_factory=list)

    def __post_init__(self) -> None:
        self.window = ErrorWindow(self.capacity)
        self.params = self.defaults

    def current(self) -> KernelParams:
        return self.params

    def refresh(self, residuals: Sequence[float]) -> KernelParams:
        """Add residuals; re-run the selection once the window is warm."""
        self.window.extend(residuals)
        if len(self.window) >= self.min_samples:
            self.params = adapt(
                self.window, self.defaults.lam, self.cfg, self.params, [(self.defaults.a1, self.defaults.a2)]
            )
        self.trace.append(self.params)
        return self.params

    def with_seed(self, seed: int) -> "KernelTuner":
        return KernelTuner(self.defaults, replace(self.cfg, seed=seed), self.capacity, self.min_samples)
