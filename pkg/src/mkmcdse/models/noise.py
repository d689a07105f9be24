"""Measurement-noise generators used by the benchmark scenarios."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np


@dataclass(frozen=True)
class GaussianNoise:
    mean: float = 0.0
    var: float = 1.0

    def __post_init__(self) -> None:
        if not self.var > 0:
            raise ValueError("variance must be positive")

    def sample(self, rng: np.random.Generator, size=None):
        return self.mean + np.sqrt(self.var) * rng.standard_normal(size)

    @property
    def variance(self) -> float:
        return self.var

    @property
    def second_moment(self) -> float:
        return self.var + self.mean**2


@dataclass(frozen=True)
class MixedGaussianNoise:
    """Finite Gaussian mixture; ``components`` holds ``(weight, mean, variance)`` triples."""

    components: tuple[tuple[float, float, float], ...] = ((0.4, 0.0, 0.1), (0.6, 0.0, 25.0))

    def __post_init__(self) -> None:
        w = np.array([c[0] for c in self.components], dtype=float)
        if w.size == 0 or np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-12):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if any(not c[2] > 0 for c in self.components):
            raise ValueError("component variances must be positive")

    @classmethod
    def two_component(cls, w1: float, var1: float, w2: float, var2: float, mean: float = 0.0):
        return cls(((w1, mean, var1), (w2, mean, var2)))

    def sample(self, rng: np.random.Generator, size=None):
        w = np.array([c[0] for c in self.components])
        mu = np.array([c[1] for c in self.components])
        sd = np.sqrt([c[2] for c in self.components])
        idx = rng.choice(w.size, size=size, p=w)
        return mu[idx] + sd[idx] * rng.standard_normal(size)

    @property
    def variance(self) -> float:
        w = np.array([c[0] for c in self.components])
        mu = np.array([c[1] for c in self.components])
        var = np.array([c[2] for c in self.components])
        m = w @ mu
        return float(w @ (var + mu**2) - m**2)

    @property
    def second_moment(self) -> float:
        return float(sum(w * (v + m * m) for w, m, v in self.components))


@dataclass(frozen=True)
class RayleighNoise:
    """Rayleigh noise with pdf ``(t / s^2) exp(-t^2 / (2 s^2))``; ``s = 3`` gives ``(t/9) exp(-t^2/18)``."""

    sigma: float = 3.0

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def sample(self, rng: np.random.Generator, size=None):
        return rng.rayleigh(self.sigma, size)

    @property
    def mean(self) -> float:
        return self.sigma * np.sqrt(np.pi / 2)

    @property
    def variance(self) -> float:
        return (4 - np.pi) / 2 * self.sigma**2

    @property
    def second_moment(self) -> float:
        return 2.0 * self.sigma**2


NoiseModel = Union[GaussianNoise, MixedGaussianNoise, RayleighNoise]


def mixed_gaussian_default(mean: float = 0.0) -> MixedGaussianNoise:
    """``0.4 N(mean, 0.1) + 0.6 N(mean, 25)``; ``mean=0.5`` is the alternative reading."""
    return MixedGaussianNoise.two_component(0.4, 0.1, 0.6, 25.0, mean=mean)


def sample_noise(model: NoiseModel, rng: np.random.Generator, size=None):
    return model.sample(rng, size)


def noise_from_config(spec: dict) -> NoiseModel:
    kind = spec.get("kind", "gaussian")
    if kind == "gaussian":
        return GaussianNoise(float(spec.get("mean", 0.0)), float(spec.get("var", 1.0)))
    if kind == "mixed_gaussian":
        if "components" in spec:
            comps: Sequence = spec["components"]
            return MixedGaussianNoise(tuple((float(w), float(m), float(v)) for w, m, v in comps))
        return mixed_gaussian_default(float(spec.get("mean", 0.0)))
    if kind == "rayleigh":
        return RayleighNoise(float(spec.get("sigma", 3.0)))
    raise ValueError(f"unknown noise kind {kind!r}")
