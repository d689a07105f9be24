"""Scenario configuration: TOML loading and validation.

File layout::

    [model]    kind = "vehicle" | "power-ieee14", plus model constants
               (r_var = "auto" sets the nominal noise variance to the
               second moment of the scaled measurement noise)
    [noise]    kind = "gaussian" | "mixed_gaussian" | "rayleigh", parameters, scale
    [events]   optional load_drop = {bus, fraction, step}, packet_loss = {rate, start, stop, mode}
    [network]  nodes, edges (1-based pairs, optional), consensus_L
    [filters]  names = [...]; per-filter overrides under [filters.<name>]
    [run]      horizon, mc_runs, seed, report_node (optional, 1-based)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from ..consensus import Topology, TopologyError
from ..kernels import (
    GaussianKernel,
    GaussianMixtureKernel,
    KernelParameterError,
    KernelParams,
    MkmcKernel,
    NoKernel,
)
from ..models.events import LoadDrop, PacketLoss, event_from_config
from ..models.noise import NoiseModel, noise_from_config
from ..robust_filter import UpdateConfig
from ..tuning import calibrate_theta

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid or unreadable scenario file."""


MODEL_KINDS = ("vehicle", "power-ieee14")
FILTER_NAMES = ("DEKF", "MCC-DEKF", "MMC-DEKF", "MKMMC-DEKF", "AMKMMC-RDEKF")

_MODEL_DEFAULTS = {
    "vehicle": {"dt": 0.3, "q_var": 1e-2, "r_var": "auto"},
    "power-ieee14": {"q_var": 1e-5, "r_var": "auto", "p0_var": 1e-2, "alpha_h": 0.8, "beta_h": 0.5,
                     "truth_q_var": 1e-5, "pad_to": 96},
}

GROUPS = {
    "vehicle": {"position": (0, 2), "velocity": (2, 4)},
    "power-ieee14": {"V-M": (0, 14), "V-A": (14, 27)},
}


@dataclass(frozen=True)
class FilterSpec:
    name: str
    update: UpdateConfig
    adaptive: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    model: str
    model_params: dict
    noise: NoiseModel
    noise_scale: float
    events: tuple
    nodes: int
    edges: Optional[tuple]
    consensus_L: int
    filters: tuple
    horizon: int
    mc_runs: int
    seed: int
    report_node: Optional[int] = None
    raw: dict = field(default_factory=dict, compare=False)

    def topology(self) -> Topology:
        if self.edges is None:
            if self.nodes == 10:
                return Topology.default10()
            return Topology.ring(self.nodes) if self.nodes > 2 else Topology.complete(self.nodes)
        return Topology.from_one_based(self.edges, self.nodes)

    @property
    def groups(self) -> dict:
        return GROUPS[self.model]

    def with_overrides(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)


CALIBRATION_DRAWS = 200_000


def calibrated_theta(params: KernelParams, noise: NoiseModel, whiten: float) -> float:
    """Closed-form mixture weight fitted to seeded draws of the whitened nominal noise."""
    draws = noise.sample(np.random.default_rng(0), CALIBRATION_DRAWS) * whiten
    return calibrate_theta(draws, params)


def default_filter(
    name: str, overrides: Optional[dict] = None, noise: Optional[NoiseModel] = None, whiten: float = 1.0
) -> FilterSpec:
    """Built-in filter family with the baseline coefficients, optionally overridden.

    ``theta = "calibrate"`` on an MKMC filter fits the weight to ``noise``
    scaled by ``whiten`` (see :func:`calibrated_theta`).
    """
    o = dict(overrides or {})
    kind = o.pop("kind", name)
    upd = {k: o.pop(k) for k in ("epsilon", "max_iters", "gate", "gate_quantile", "gate_mu", "literal_gate") if k in o}
    adaptive = False
    if kind == "DEKF":
        kernel = NoKernel()
    elif kind == "MCC-DEKF":
        kernel = GaussianKernel(float(o.pop("sigma", 1.8)))
    elif kind == "MMC-DEKF":
        kernel = GaussianMixtureKernel(float(o.pop("theta", 0.5)), float(o.pop("sigma1", 1.6)), float(o.pop("sigma2", 1.2)))
    elif kind in ("MKMMC-DEKF", "AMKMMC-RDEKF"):
        calibrate = o.get("theta") == "calibrate"
        if calibrate:
            o.pop("theta")
        fields_ = {k: float(o.pop(k)) for k in ("theta", "alpha", "omega", "lam", "a1", "a2") if k in o}
        params = KernelParams(**fields_)
        if calibrate:
            if noise is None:
                raise ConfigError(f"filter {name}: theta = \"calibrate\" needs a noise model")
            params = replace(params, theta=calibrated_theta(params, noise, whiten))
        kernel = MkmcKernel(params)
        if kind == "AMKMMC-RDEKF":
            adaptive = bool(o.pop("adaptive", True))
            upd.setdefault("gate", True)
    else:
        raise ConfigError(f"unknown filter kind {kind!r}; expected one of {', '.join(FILTER_NAMES)}")
    if o:
        raise ConfigError(f"filter {name}: unknown keys {sorted(o)}")
    return FilterSpec(name, UpdateConfig(kernel=kernel, **upd), adaptive)


def _section(doc: dict, name: str, required: bool = True) -> dict:
    sec = doc.get(name)
    if sec is None:
        if required:
            raise ConfigError(f"missing [{name}] section")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def parse_config(doc: dict) -> ScenarioConfig:
    try:
        return _parse(doc)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, KernelParameterError, TopologyError) as exc:
        raise ConfigError(str(exc)) from exc


def _parse(doc: dict) -> ScenarioConfig:
    unknown = set(doc) - {"model", "noise", "events", "network", "filters", "run"}
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    model = dict(_section(doc, "model"))
    kind = model.pop("kind", None)
    if kind not in MODEL_KINDS:
        raise ConfigError(f"[model] kind must be one of {MODEL_KINDS}, got {kind!r}")
    params = dict(_MODEL_DEFAULTS[kind])
    for k, v in model.items():
        if k not in params and k != "grid":
            raise ConfigError(f"[model] unknown key {k!r} for {kind}")
        params[k] = v
    if "grid" in params and not Path(params["grid"]).is_file():
        raise ConfigError(f"grid file {params['grid']!r} not found")

    noise_sec = dict(_section(doc, "noise"))
    scale = float(noise_sec.pop("scale", 1.0))
    if not scale > 0:
        raise ConfigError("[noise] scale must be positive")
    noise = noise_from_config(noise_sec)
    # "auto": the filter's nominal variance is the noise second moment about zero
    if params["r_var"] == "auto":
        params["r_var"] = noise.second_moment * scale**2
    params["r_var"] = float(params["r_var"])
    if not params["r_var"] > 0:
        raise ConfigError("[model] r_var must be positive")

    run = _section(doc, "run")
    horizon = int(run.get("horizon", 100))
    mc_runs = int(run.get("mc_runs", 20))
    seed = int(run.get("seed", 0))
    if horizon < 1 or mc_runs < 1:
        raise ConfigError("horizon and mc_runs must be at least 1")

    events = []
    for name, spec in _section(doc, "events", required=False).items():
        if name not in ("load_drop", "packet_loss"):
            raise ConfigError(f"[events] unknown event {name!r}")
        ev = event_from_config({"kind": name, **spec}, horizon)
        if isinstance(ev, LoadDrop) and kind != "power-ieee14":
            raise ConfigError("load_drop applies to the power model only")
        if isinstance(ev, LoadDrop) and not 1 <= ev.bus <= 14:
            raise ConfigError(f"load_drop bus {ev.bus} outside 1..14")
        events.append(ev)

    net = _section(doc, "network")
    nodes = int(net.get("nodes", 10))
    if nodes < 1:
        raise ConfigError("[network] nodes must be positive")
    edges = net.get("edges")
    edges = None if edges is None else tuple((int(a), int(b)) for a, b in edges)
    L = int(net.get("consensus_L", 3))
    if L < 0:
        raise ConfigError("[network] consensus_L must be non-negative")

    fsec = dict(_section(doc, "filters"))
    names = fsec.pop("names", list(FILTER_NAMES))
    if not names or len(set(names)) != len(names):
        raise ConfigError("[filters] names must be a non-empty list without repeats")
    for k in fsec:
        if k not in names:
            raise ConfigError(f"[filters.{k}] does not match any listed filter")
    whiten = scale / float(params["r_var"]) ** 0.5
    filters = tuple(default_filter(n, fsec.get(n), noise, whiten) for n in names)

    report_node = run.get("report_node")
    if report_node is not None:
        report_node = int(report_node)
        if not 1 <= report_node <= nodes:
            raise ConfigError(f"report_node {report_node} outside 1..{nodes}")

    cfg = ScenarioConfig(
        model=kind,
        model_params=params,
        noise=noise,
        noise_scale=scale,
        events=tuple(events),
        nodes=nodes,
        edges=edges,
        consensus_L=L,
        filters=filters,
        horizon=horizon,
        mc_runs=mc_runs,
        seed=seed,
        report_node=report_node,
        raw=doc,
    )
    cfg.topology()  # connectivity check
    return cfg


def load_config(path: Union[str, Path]) -> ScenarioConfig:
    p = Path(path)
    try:
        doc = tomllib.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc.strerror or exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return parse_config(doc)


def packet_loss(cfg: ScenarioConfig) -> Optional[PacketLoss]:
    for ev in cfg.events:
        if isinstance(ev, PacketLoss):
            return ev
    return None


def config_echo(cfg: ScenarioConfig) -> dict[str, Any]:
    """JSON-safe summary of the effective configuration."""
    return {
        "model": cfg.model,
        "model_params": {k: v for k, v in sorted(cfg.model_params.items())},
        "noise": repr(cfg.noise),
        "noise_scale": cfg.noise_scale,
        "events": [repr(e) for e in cfg.events],
        "nodes": cfg.nodes,
        "edges": [list(e) for e in cfg.edges] if cfg.edges is not None else None,
        "consensus_L": cfg.consensus_L,
        "filters": [{"name": f.name, "kernel": repr(f.update.kernel), "gate": f.update.gate, "adaptive": f.adaptive}
                    for f in cfg.filters],
        "horizon": cfg.horizon,
        "mc_runs": cfg.mc_runs,
        "seed": cfg.seed,
        "report_node": cfg.report_node,
    }
