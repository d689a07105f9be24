"""Monte Carlo driver: simulate truth, feed every filter the same data, collect errors."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from ..consensus import DistributedFilter
from ..models.events import LoadDrop, PacketLoss
from ..models.power import PowerModel, load_grid, node_selection, power_measurement, power_truth
from ..models.vehicle import INITIAL_TRUTH, VehicleModel, vehicle_step
from ..tuning import KernelTuner
from .config import FilterSpec, ScenarioConfig, packet_loss
from .metrics import armse, mae, rmse

log = logging.getLogger(__name__)

WORKERS_ENV = "MKMCDSE_WORKERS"


TRACE_FIELDS = ("theta", "alpha", "omega", "lam", "a1", "a2")


def astuple_params(p) -> list[float]:
    return [float(getattr(p, f)) for f in TRACE_FIELDS]


@dataclass
class RunResult:
    """Output of one Monte Carlo run.

    ``estimates`` maps filter name to an array ``(nodes, steps, n)``;
    ``trace`` holds adaptive coefficients as ``(steps, nodes, 6)`` or None.
    """

    truth: np.ndarray
    estimates: dict
    iterations: dict
    gated: dict
    degraded: dict
    min_eig: dict
    seconds: dict
    trace: dict


@dataclass
class MetricsReport:
    rmse: dict
    mae: dict
    armse: dict
    iterations: dict
    gate_rate: dict
    degraded: dict
    min_eig: dict
    seconds_per_step: dict
    trace: dict
    groups: tuple
    horizon: int

    def filters(self) -> list[str]:
        return list(self.rmse)


# ---------------------------------------------------------------------------
# plant setup


@lru_cache(maxsize=4)
def _grid(path: Optional[str]):
    return load_grid(path)


def _power_models(cfg: ScenarioConfig) -> list[PowerModel]:
    mp = cfg.model_params
    grid = _grid(mp.get("grid"))
    return [
        PowerModel(grid, node_selection(grid, i, int(mp["pad_to"])), float(mp["q_var"]), float(mp["r_var"]),
                   float(mp["p0_var"]), float(mp["alpha_h"]), float(mp["beta_h"]))
        for i in range(cfg.nodes)
    ]


def simulate_truth(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """True state per step, shape ``(horizon, n)``."""
    if cfg.model == "vehicle":
        vm = VehicleModel(dt=float(cfg.model_params["dt"]), Q=float(cfg.model_params["q_var"]) * np.eye(4))
        out = np.empty((cfg.horizon, 4))
        x = INITIAL_TRUTH.copy()
        for t in range(cfg.horizon):
            x = vehicle_step(x, rng, vm.Q, vm.dt)
            out[t] = x
        return out
    grid = _grid(cfg.model_params.get("grid"))
    drops = [e for e in cfg.events if isinstance(e, LoadDrop)]
    return power_truth(grid, cfg.horizon, rng, float(cfg.model_params["truth_q_var"]), drops)


def simulate_measurements(cfg: ScenarioConfig, truth: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Noisy per-node measurements, shape ``(horizon, nodes, m)``."""
    if cfg.model == "vehicle":
        H = VehicleModel().Hm
        clean = np.broadcast_to((truth @ H.T)[:, None, :], (cfg.horizon, cfg.nodes, 2))
    else:
        pms = _power_models(cfg)
        clean = np.stack(
            [np.stack([power_measurement(x, pm.grid, pm.selection) for pm in pms]) for x in truth]
        )
    noise = cfg.noise.sample(rng, clean.shape) * cfg.noise_scale
    return clean + noise


def _build_filter(cfg: ScenarioConfig, spec: FilterSpec, L: int, seed: int) -> DistributedFilter:
    if cfg.model == "vehicle":
        vm = VehicleModel(
            dt=float(cfg.model_params["dt"]),
            Q=float(cfg.model_params["q_var"]) * np.eye(4),
            R=float(cfg.model_params["r_var"]) * np.eye(2),
        )
        models = [vm.filter_model() for _ in range(cfg.nodes)]
        beliefs = [vm.initial_belief() for _ in range(cfg.nodes)]
    else:
        pms = _power_models(cfg)
        models = [pm.filter_model() for pm in pms]
        beliefs = [pm.initial_belief() for pm in pms]
    tuners = None
    if spec.adaptive:
        base = KernelTuner(defaults=spec.update.kernel.params)
        tuners = [base.with_seed(seed * 1000 + i) for i in range(cfg.nodes)]
    loss = packet_loss(cfg)
    faults = loss.fault_model() if loss is not None else None
    return DistributedFilter(models, beliefs, cfg.topology(), spec.update, rounds=L, tuners=tuners, faults=faults)


# ---------------------------------------------------------------------------
# one run


def run_single(cfg: ScenarioConfig, run_index: int, L: Optional[int] = None) -> RunResult:
    """Execute Monte Carlo run ``run_index``; everything derives from ``seed + run_index``."""
    L = cfg.consensus_L if L is None else L
    seed = cfg.seed + run_index
    ss = np.random.SeedSequence(seed)
    truth_ss, meas_ss, loss_ss, link_ss = ss.spawn(4)
    truth = simulate_truth(cfg, np.random.default_rng(truth_ss))
    meas = simulate_measurements(cfg, truth, np.random.default_rng(meas_ss))
    T, b = cfg.horizon, cfg.nodes

    lost = np.zeros((T, b), dtype=bool)
    loss = packet_loss(cfg)
    if loss is not None and loss.mode == "measurement":
        fm = loss.fault_model()
        draws = np.random.default_rng(loss_ss).random((T, b))
        for t in range(T):
            if fm.active(t):
                lost[t] = draws[t] < fm.drop_probability

    out = RunResult(truth, {}, {}, {}, {}, {}, {}, {})
    for spec in cfg.filters:
        flt = _build_filter(cfg, spec, L, seed)
        link_rng = np.random.default_rng(link_ss)  # same drop pattern for every filter
        n = flt.beliefs[0].mean.size
        est = np.empty((b, T, n))
        iters = np.zeros((T, b), dtype=int)
        gated = np.zeros((T, b), dtype=bool)
        min_eig = np.empty(T)
        degraded = False
        trace = []
        t0 = time.perf_counter()
        for t in range(T):
            v = [None if lost[t, i] else meas[t, i] for i in range(b)]
            rep = flt.step(v, t, link_rng)
            means = flt.means()
            if rep.failed.any() or not np.all(np.isfinite(means)):
                degraded = True
            est[:, t] = np.nan_to_num(means, nan=0.0, posinf=0.0, neginf=0.0)
            iters[t], gated[t] = rep.iterations, rep.gated
            min_eig[t] = float(np.linalg.eigvalsh(flt.covs()).min())
            if flt.tuners is not None:
                trace.append([astuple_params(tn.current()) for tn in flt.tuners])
        out.seconds[spec.name] = time.perf_counter() - t0
        out.estimates[spec.name] = est
        out.iterations[spec.name] = iters
        out.gated[spec.name] = gated
        out.degraded[spec.name] = degraded
        out.min_eig[spec.name] = min_eig
        out.trace[spec.name] = np.array(trace) if trace else None
    return out


# ---------------------------------------------------------------------------
# aggregation


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer %s=%r", WORKERS_ENV, raw)
        return 1


def _run_all(cfg: ScenarioConfig, L: Optional[int], workers: int) -> list[RunResult]:
    idx = range(cfg.mc_runs)
    if workers <= 1 or cfg.mc_runs == 1:
        return [run_single(cfg, r, L) for r in idx]
    with ProcessPoolExecutor(max_workers=min(workers, cfg.mc_runs)) as pool:
        # map preserves run order, so the reduction below is schedule independent
        return list(pool.map(run_single, [cfg] * cfg.mc_runs, idx, [L] * cfg.mc_runs))


def aggregate(cfg: ScenarioConfig, runs: Sequence[RunResult]) -> MetricsReport:
    groups = tuple(cfg.groups.items())
    node_sel = slice(None) if cfg.report_node is None else slice(cfg.report_node - 1, cfg.report_node)
    rm, ma, ar, it, gr, dg, me, sec, tr = {}, {}, {}, {}, {}, {}, {}, {}, {}
    for spec in cfg.filters:
        name = spec.name
        # every (run, node) pair is one sample of the estimator
        est = np.concatenate([r.estimates[name][node_sel] for r in runs])
        truth = np.concatenate([np.broadcast_to(r.truth, r.estimates[name][node_sel].shape) for r in runs])
        rm[name], ma[name], ar[name] = {}, {}, {}
        for g, (lo, hi) in groups:
            s = slice(lo, hi)
            rm[name][g] = rmse(truth, est, s)
            ma[name][g] = mae(truth, est, s)
            ar[name][g] = armse(rm[name][g])
        iters = np.stack([r.iterations[name] for r in runs])
        it[name] = iters.mean(axis=(0, 2))
        gr[name] = float(np.mean([r.gated[name].mean() for r in runs]))
        dg[name] = bool(any(r.degraded[name] for r in runs))
        me[name] = np.min(np.stack([r.min_eig[name] for r in runs]), axis=0)
        sec[name] = float(sum(r.seconds[name] for r in runs)) / (len(runs) * cfg.horizon)
        tr[name] = runs[0].trace[name]
    return MetricsReport(rm, ma, ar, it, gr, dg, me, sec, tr, tuple(g for g, _ in groups), cfg.horizon)


def run_scenario(cfg: ScenarioConfig, L: Optional[int] = None, workers: Optional[int] = None) -> MetricsReport:
    """All Monte Carlo runs of ``cfg``; deterministic for a given seed and worker count."""
    workers = worker_count() if workers is None else workers
    return aggregate(cfg, _run_all(cfg, L, workers))


def sweep_consensus(
    cfg: ScenarioConfig, values: Sequence[int], workers: Optional[int] = None
) -> dict[int, MetricsReport]:
    """Repeat the scenario for each consensus round count with identical seeds."""
    if not values or any(int(v) < 0 for v in values):
        raise ValueError("consensus round counts must be non-negative")
    return {int(v): run_scenario(cfg, int(v), workers) for v in values}
