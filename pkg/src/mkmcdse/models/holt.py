"""Holt's two-parameter exponential smoothing as a state transition."""

from __future__ import annotations

import numpy as np


def holt_transition(
    level: np.ndarray, trend: np.ndarray, x: np.ndarray, alpha_h: float, beta_h: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One Holt recursion per component.

    Returns ``(prediction, level, trend, G)`` where ``G = alpha_h (1 + beta_h) I``
    is the Jacobian of the prediction with respect to the new estimate ``x``.
    """
    new_level = alpha_h * x + (1.0 - alpha_h) * (level + trend)
    new_trend = beta_h * (new_level - level) + (1.0 - beta_h) * trend
    G = alpha_h * (1.0 + beta_h) * np.eye(x.size)
    return new_level + new_trend, new_level, new_trend, G


class HoltForecaster:
    """Stateful Holt smoother usable as the ``f`` of a filter model."""

    def __init__(self, x0: np.ndarray, alpha_h: float = 0.8, beta_h: float = 0.5):
        if not (0 < alpha_h < 1 and 0 < beta_h < 1):
            raise ValueError("Holt parameters must lie in (0, 1)")
        self.alpha_h = alpha_h
        self.beta_h = beta_h
        self.level = np.array(x0, dtype=float)
        self.trend = np.zeros_like(self.level)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        pred, self.level, self.trend, _ = holt_transition(
            self.level, self.trend, np.asarray(x, dtype=float), self.alpha_h, self.beta_h
        )
        return pred

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return self.alpha_h * (1.0 + self.beta_h) * np.eye(np.size(x))
