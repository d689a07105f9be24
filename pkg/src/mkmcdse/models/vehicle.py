"""Constant-velocity land vehicle: four states, two combined position/velocity readings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..robust_filter import GaussianBelief, NonlinearModel, linear_model
from .noise import NoiseModel

DT = 0.3
MEASUREMENT_MATRIX = np.array([[-1.0, 0.0, -1.0, 0.0], [0.0, -1.0, 0.0, -1.0]])
INITIAL_TRUTH = np.array([0.0, 10.0, np.tan(np.pi / 3), 10.0])
INITIAL_ESTIMATE = np.ones(4)
INITIAL_COV = np.diag([900.0, 900.0, 4.0, 4.0])


def transition_matrix(dt: float = DT) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


@dataclass(frozen=True)
class VehicleModel:
    dt: float = DT
    Q: np.ndarray = field(default_factory=lambda: 1e-2 * np.eye(4))
    R: np.ndarray = field(default_factory=lambda: np.eye(2))

    @property
    def F(self) -> np.ndarray:
        return transition_matrix(self.dt)

    @property
    def Hm(self) -> np.ndarray:
        return MEASUREMENT_MATRIX

    def filter_model(self) -> NonlinearModel:
        return linear_model(self.F, self.Hm, self.Q, self.R)

    def initial_belief(self) -> GaussianBelief:
        return GaussianBelief(INITIAL_ESTIMATE.copy(), INITIAL_COV.copy())


def vehicle_step(u: np.ndarray, rng: np.random.Generator, Q: np.ndarray, dt: float = DT) -> np.ndarray:
    """``F u + q`` with ``q ~ N(0, Q)``; a zero ``Q`` gives the deterministic step."""
    u = np.asarray(u, dtype=float)
    nxt = transition_matrix(dt) @ u
    if np.any(Q):
        nxt = nxt + rng.multivariate_normal(np.zeros(4), Q)
    return nxt


def vehicle_measure(u: np.ndarray, rng: np.random.Generator, noise: NoiseModel) -> np.ndarray:
    """Measurement of the current state: ``Hm u + r`` with i.i.d. channel noise."""
    return MEASUREMENT_MATRIX @ np.asarray(u, dtype=float) + noise.sample(rng, 2)
