"""Error statistics over Monte Carlo runs."""

from __future__ import annotations

import numpy as np


def _check(truth: np.ndarray, est: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(est, dtype=float)
    if truth.shape != est.shape or truth.ndim != 3:
        raise ValueError(f"expected equal (runs, steps, dims) arrays, got {truth.shape} and {est.shape}")
    return truth, est


def rmse(truth: np.ndarray, est: np.ndarray, group: slice = slice(None)) -> np.ndarray:
    """``sqrt(mean_runs ||u - u_hat||^2)`` over the group components, per step.

    Inputs have shape ``(runs, steps, dims)``.
    """
    truth, est = _check(truth, est)
    d = (truth - est)[..., group]
    return np.sqrt(np.mean(np.sum(d * d, axis=-1), axis=0))


def mae(truth: np.ndarray, est: np.ndarray, group: slice = slice(None)) -> np.ndarray:
    """Mean absolute error over runs and group components, per step."""
    truth, est = _check(truth, est)
    return np.mean(np.abs(truth - est)[..., group], axis=(0, 2))


def armse(series: np.ndarray) -> float:
    """Average of an RMSE series over all steps."""
    series = np.asarray(series, dtype=float)
    if series.size == 0:
        raise ValueError("empty series")
    return float(series.mean())
