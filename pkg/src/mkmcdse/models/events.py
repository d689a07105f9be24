"""Scripted scenario events: sudden load change and packet-loss windows."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ..consensus import LinkFaultModel


@dataclass(frozen=True)
class LoadDrop:
    """Scale the true voltage magnitude of ``bus`` (1-based) by ``1 - fraction`` at ``step``."""

    bus: int
    fraction: float
    step: int

    def __post_init__(self) -> None:
        if not 0 < self.fraction < 1:
            raise ValueError("fraction must lie in (0, 1)")


@dataclass(frozen=True)
class PacketLoss:
    rate: float
    start: int
    stop: Optional[int] = None
    mode: str = "link"

    def __post_init__(self) -> None:
        if not 0 < self.rate < 1:
            raise ValueError("rate must lie in (0, 1)")

    def fault_model(self) -> LinkFaultModel:
        return LinkFaultModel(self.rate, self.start, self.stop, self.mode)


ScenarioEvent = Union[LoadDrop, PacketLoss]


def apply_event(event: ScenarioEvent, truth: np.ndarray, step: int) -> np.ndarray:
    """Return the (possibly modified) truth state for ``step``.

    Only :class:`LoadDrop` touches the truth; the magnitude of bus ``i`` is
    state component ``i - 1``.
    """
    if isinstance(event, LoadDrop) and step == event.step:
        truth = truth.copy()
        truth[event.bus - 1] *= 1.0 - event.fraction
    return truth


def event_from_config(spec: dict, horizon: int) -> ScenarioEvent:
    kind = spec.get("kind")
    if kind == "load_drop":
        ev = LoadDrop(int(spec["bus"]), float(spec["fraction"]), int(spec["step"]))
        if not 0 <= ev.step < horizon:
            raise ValueError(f"load drop step {ev.step} outside horizon {horizon}")
        return ev
    if kind == "packet_loss":
        ev = PacketLoss(float(spec["rate"]), int(spec["start"]), spec.get("stop"), spec.get("mode", "link"))
        if not 0 <= ev.start < horizon:
            raise ValueError(f"packet loss start {ev.start} outside horizon {horizon}")
        return ev
    raise ValueError(f"unknown event kind {kind!r}")
