"""Benchmark plants, noise generators and scenario events."""

from .events import LoadDrop, PacketLoss, apply_event
from .holt import HoltForecaster, holt_transition
from .noise import GaussianNoise, MixedGaussianNoise, RayleighNoise, mixed_gaussian_default, sample_noise
from .power import GridConfigError, PowerGrid, PowerModel, load_grid, power_jacobian, power_measurement
from .vehicle import VehicleModel, vehicle_measure, vehicle_step

__all__ = [
    "GaussianNoise", "GridConfigError", "HoltForecaster", "LoadDrop", "MixedGaussianNoise",
    "PacketLoss", "PowerGrid", "PowerModel", "RayleighNoise", "VehicleModel", "apply_event",
    "holt_transition", "load_grid", "mixed_gaussian_default", "power_jacobian", "power_measurement",
    "sample_noise", "vehicle_measure", "vehicle_step",
]
