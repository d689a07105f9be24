"""Sensor-network consensus on information and the distributed robust filter.

Each node runs the local robust update to obtain kernel weights, converts its
weighted measurement into information form, averages the information terms
with its neighbours for ``L`` synchronous rounds (Metropolis weights), and
fuses the result with its weighted prior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import linalg as sla
from scipy.sparse import csgraph

from . import batch
from .kernels import MkmcKernel
from .robust_filter import (
    GaussianBelief,
    ModelError,
    NonlinearModel,
    NumericalError,
    RegressionProblem,
    UpdateConfig,
    predict,
    robust_update,
    safe_cholesky,
    symmetrize,
)
from .tuning import KernelTuner

log = logging.getLogger(__name__)


class TopologyError(ValueError):
    pass


def _normalize_edges(edges, b: int) -> list[tuple[int, int]]:
    out = set()
    for i, j in edges:
        i, j = int(i), int(j)
        if i == j:
            raise TopologyError(f"self-loop on node {i}")
        if not (0 <= i < b and 0 <= j < b):
            raise TopologyError(f"edge ({i}, {j}) references a node outside 0..{b - 1}")
        out.add((min(i, j), max(i, j)))
    return sorted(out)


def metropolis_weights(edges, b: int) -> np.ndarray:
    """Metropolis weight matrix of an undirected connected graph (0-based edges).

    Off-diagonal ``1 / (1 + max(d_i, d_j))`` on edges, zero elsewhere; the
    diagonal absorbs the remainder so rows sum to one.
    """
    edges = _normalize_edges(edges, b)
    adj = np.zeros((b, b))
    for i, j in edges:
        adj[i, j] = adj[j, i] = 1.0
    if b > 1:
        ncomp, _ = csgraph.connected_components(adj, directed=False)
        if ncomp != 1:
            raise TopologyError(f"graph is disconnected ({ncomp} components)")
    deg = adj.sum(axis=1)
    W = np.zeros((b, b))
    for i, j in edges:
        W[i, j] = W[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    W[np.diag_indices(b)] = 1.0 - W.sum(axis=1)
    return W


@dataclass(frozen=True)
class Topology:
    b: int
    edges: tuple[tuple[int, int], ...]
    weights: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_edges(cls, edges, b: int) -> "Topology":
        e = tuple(_normalize_edges(edges, b))
        return cls(b, e, metropolis_weights(e, b))

    @classmethod
    def from_one_based(cls, edges, b: int) -> "Topology":
        return cls.from_edges([(i - 1, j - 1) for i, j in edges], b)

    @classmethod
    def ring(cls, b: int, chords: Sequence[tuple[int, int]] = ()) -> "Topology":
        edges = [(i, (i + 1) % b) for i in range(b)] if b > 2 else [(i, i + 1) for i in range(b - 1)]
        return cls.from_edges(list(edges) + list(chords), b)

    @classmethod
    def complete(cls, b: int) -> "Topology":
        return cls.from_edges([(i, j) for i in range(b) for j in range(i + 1, b)], b)

    @classmethod
    def default10(cls) -> "Topology":
        """Ring 1-2-...-10-1 with chords {1,6} and {3,8} (1-based labels)."""
        return cls.ring(10, chords=[(0, 5), (2, 7)])


@dataclass(frozen=True)
class LinkFaultModel:
    """Symmetric i.i.d. per-link, per-round packet drops inside ``[start, stop)``.

    ``mode='link'`` drops consensus exchanges; ``mode='measurement'`` instead
    drops each node's measurement for the whole step.
    """

    drop_probability: float = 0.0
    start: int = 0
    stop: Optional[int] = None
    mode: str = "link"

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must lie in [0, 1]")
        if self.mode not in ("link", "measurement"):
            raise ValueError(f"unknown fault mode {self.mode!r}")

    def active(self, step: int) -> bool:
        return self.drop_probability > 0 and step >= self.start and (self.stop is None or step < self.stop)


def faulty_weights(topo: Topology, dropped: np.ndarray) -> np.ndarray:
    """Weights with the masked edges removed and their mass returned to both endpoints."""
    W = topo.weights.copy()
    for (i, j), d in zip(topo.edges, dropped):
        if d:
            W[i, i] += W[i, j]
            W[j, j] += W[j, i]
            W[i, j] = W[j, i] = 0.0
    return W


def consensus_round(
    values: np.ndarray,
    topo: Topology,
    faults: Optional[LinkFaultModel] = None,
    rng: Optional[np.random.Generator] = None,
    step: int = 0,
) -> np.ndarray:
    """One synchronous averaging round over axis 0 (one slice per node)."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != topo.b:
        raise ValueError(f"expected {topo.b} node values, got {values.shape[0]}")
    W = topo.weights
    if faults is not None and faults.mode == "link" and faults.active(step) and topo.edges:
        if rng is None:
            raise ValueError("a random generator is required when link faults are active")
        W = faulty_weights(topo, rng.random(len(topo.edges)) < faults.drop_probability)
    return np.tensordot(W, values, axes=1)


def run_consensus(
    values: np.ndarray,
    topo: Topology,
    rounds: int,
    faults: Optional[LinkFaultModel] = None,
    rng: Optional[np.random.Generator] = None,
    step: int = 0,
) -> np.ndarray:
    for _ in range(rounds):
        values = consensus_round(values, topo, faults, rng, step)
    return values


# ---------------------------------------------------------------------------
# information terms


def information_terms(H: np.ndarray, R_tilde: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(H^T R~^-1 H, H^T R~^-1 y)``; ``y`` is the linearized pseudo-measurement."""
    Rinv_H = np.linalg.solve(R_tilde, H)
    Rinv_y = np.linalg.solve(R_tilde, y)
    return symmetrize(H.T @ Rinv_H), H.T @ Rinv_y


def init_consensus_terms(prob: RegressionProblem, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Information terms of one node from its whitened regression and final weights.

    Equal to :func:`information_terms` with ``R~ = C_R D_v^-1 C_R^T`` and
    ``y = v - h(u) + H u`` but computed without forming ``R~``.
    """
    n = prob.n
    Wv, zv, dv = prob.W[n:], prob.z[n:], weights[n:]
    WtD = Wv.T * dv
    return symmetrize(WtD @ Wv), WtD @ zv


def weighted_prior_information(prob: RegressionProblem, weights: np.ndarray) -> np.ndarray:
    """``(C_P D_u^-1 C_P^T)^-1`` from the whitened state block."""
    n = prob.n
    Wu = prob.W[:n]
    return symmetrize((Wu.T * weights[:n]) @ Wu)


def distributed_update(
    prior: GaussianBelief, Omega: np.ndarray, Xi: np.ndarray, b: int,
    prior_info: Optional[np.ndarray] = None,
) -> GaussianBelief:
    """Fuse the prior with ``b`` times the consensus-averaged information terms."""
    if prior_info is None:
        Lp = safe_cholesky(prior.cov)
        prior_info = sla.cho_solve((Lp, True), np.eye(prior.mean.size))
    info = symmetrize(prior_info + b * Omega)
    L = safe_cholesky(info)
    rhs = prior_info @ prior.mean + b * Xi
    mean = sla.cho_solve((L, True), rhs)
    cov = symmetrize(sla.cho_solve((L, True), np.eye(mean.size)))
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise NumericalError("distributed update produced non-finite values")
    return GaussianBelief(mean, cov)


# ---------------------------------------------------------------------------
# network filter


@dataclass
class StepReport:
    iterations: np.ndarray
    gated: np.ndarray
    failed: np.ndarray


@dataclass
class _Local:
    """Per-node results of the local phase of one step."""

    b: int
    n: int
    iters: np.ndarray = field(init=False)
    gated: np.ndarray = field(init=False)
    failed: np.ndarray = field(init=False)
    Omega: np.ndarray = field(init=False)
    Xi: np.ndarray = field(init=False)
    prior_info: list = field(init=False)
    local: list = field(init=False)
    regress: list = field(init=False)  # (z, W) per node, for post-fit residuals

    def __post_init__(self) -> None:
        b, n = self.b, self.n
        self.iters = np.zeros(b, dtype=int)
        self.gated = np.zeros(b, dtype=bool)
        self.failed = np.zeros(b, dtype=bool)
        self.Omega = np.zeros((b, n, n))
        self.Xi = np.zeros((b, n))
        self.prior_info = [None] * b
        self.local = [None] * b
        self.regress = [None] * b


class DistributedFilter:
    """Network of robust EKF nodes exchanging information terms by consensus.

    Args:
        models: one model per node (each owns any transition state).
        beliefs: initial belief per node.
        topo: communication graph.
        cfg: local update settings; the kernel is overridden per node when
            ``tuners`` is given.
        rounds: consensus rounds ``L`` per step.
        tuners: optional per-node coefficient tuners (adaptive variant).
        faults: optional packet-loss model.
        batched: solve all nodes' local updates as one stacked problem. The
            node-by-node route gives the same numbers up to rounding.
    """

    def __init__(
        self,
        models: Sequence[NonlinearModel],
        beliefs: Sequence[GaussianBelief],
        topo: Topology,
        cfg: UpdateConfig,
        rounds: int = 3,
        tuners: Optional[Sequence[KernelTuner]] = None,
        faults: Optional[LinkFaultModel] = None,
        batched: bool = True,
    ):
        if len(models) != topo.b or len(beliefs) != topo.b:
            raise ValueError("need one model and one belief per node")
        if tuners is not None and len(tuners) != topo.b:
            raise ValueError("need one tuner per node")
        if rounds < 0:
            raise ValueError("rounds must be non-negative")
        self.models = list(models)
        self.beliefs = [bl.copy() for bl in beliefs]
        self.topo = topo
        self.cfg = cfg
        self.rounds = rounds
        self.tuners = list(tuners) if tuners is not None else None
        self.faults = faults
        self.batched = batched

    @property
    def b(self) -> int:
        return self.topo.b

    @property
    def _exchanges(self) -> bool:
        return self.b > 1 and self.rounds > 0

    def _node_cfg(self, i: int) -> UpdateConfig:
        if self.tuners is None:
            return self.cfg
        return replace(self.cfg, kernel=MkmcKernel(self.tuners[i].current()))

    # local phase -----------------------------------------------------------

    def _local_nodewise(self, res: _Local, priors, measurements, nodes) -> None:
        for i in nodes:
            try:
                out, prob = robust_update(priors[i], measurements[i], self.models[i], self._node_cfg(i))
            except (NumericalError, ModelError) as exc:
                log.warning("node %d update failed: %s", i, exc)
                res.failed[i] = True
                continue
            res.iters[i] = out.iterations
            res.regress[i] = (prob.z, prob.W)
            res.local[i] = out.belief
            if out.gated:
                res.gated[i] = True
                continue
            res.Omega[i], res.Xi[i] = init_consensus_terms(prob, out.final_weights)
            res.prior_info[i] = weighted_prior_information(prob, out.final_weights)

    def _local_batched(self, res: _Local, priors, measurements, nodes) -> None:
        sizes = {np.size(measurements[i]) for i in nodes}
        if len(sizes) > 1:
            self._local_nodewise(res, priors, measurements, nodes)
            return
        cfg = self.cfg
        kernels = [self._node_cfg(i).kernel for i in nodes]
        try:
            bp = batch.batch_regression(
                [priors[i] for i in nodes], [measurements[i] for i in nodes], [self.models[i] for i in nodes]
            )
            keep = np.ones(len(nodes), dtype=bool)
            if cfg.gate:
                stats = batch.batch_gate_statistic(bp, cfg, kernels)
                keep = np.abs(stats) <= cfg.threshold(bp.m)
            idx = np.flatnonzero(keep)
            sub = bp.take(idx) if idx.size < len(nodes) else bp
            sub_k = [kernels[j] for j in idx]
            if idx.size:
                out = batch.batch_fixed_point(sub, cfg, sub_k)
                Omega, Xi, pinfo = batch.batch_information(sub, out.weights)
                cov = None if self._exchanges else batch.batch_posterior_cov(sub, out.weights)
        except (NumericalError, ModelError) as exc:
            log.info("stacked update failed (%s); retrying node by node", exc)
            self._local_nodewise(res, priors, measurements, nodes)
            return
        for j, i in enumerate(nodes):
            res.regress[i] = (bp.z[j], bp.W[j])
            if not keep[j]:
                res.gated[i] = True
                res.local[i] = priors[i]
        for j, i in enumerate(np.asarray(nodes)[idx]):
            res.iters[i] = out.iterations[j]
            res.Omega[i], res.Xi[i], res.prior_info[i] = Omega[j], Xi[j], pinfo[j]
            if cov is not None:
                res.local[i] = GaussianBelief(out.mean[j], cov[j])

    # fusion phase ----------------------------------------------------------

    def _fuse(self, res: _Local, priors, k: int, rng) -> None:
        b, n = self.b, res.n
        faults = self.faults if (self.faults is not None and self.faults.mode == "link") else None
        # one packet carries both terms, so a drop removes them together
        packed = run_consensus(
            np.concatenate([res.Omega, res.Xi[:, :, None]], axis=2), self.topo, self.rounds, faults, rng, k
        )
        Omega, Xi = packed[:, :, :n], packed[:, :, n]
        if self.batched:
            try:
                pinfo = np.stack(
                    [pi if pi is not None else np.zeros((n, n)) for pi in res.prior_info]
                )
                missing = [i for i in range(b) if res.prior_info[i] is None]
                if missing:
                    pinfo[missing] = batch.prior_information(np.stack([priors[i].cov for i in missing]))
                means = np.stack([p.mean for p in priors])
                mean, cov = batch.batch_fuse(means, pinfo, Omega, Xi, b)
                for i in range(b):
                    self.beliefs[i] = GaussianBelief(mean[i], cov[i])
                return
            except NumericalError as exc:
                log.info("stacked fusion failed (%s); retrying node by node", exc)
        for i in range(b):
            try:
                self.beliefs[i] = distributed_update(priors[i], Omega[i], Xi[i], b, res.prior_info[i])
            except NumericalError as exc:
                log.warning("node %d fusion failed: %s", i, exc)
                self.beliefs[i] = priors[i]
                res.failed[i] = True

    def step(
        self,
        measurements: Sequence[Optional[np.ndarray]],
        k: int = 0,
        rng: Optional[np.random.Generator] = None,
    ) -> StepReport:
        """Advance every node by one time step; ``None`` marks a lost measurement."""
        b, n = self.b, self.beliefs[0].mean.size
        if len(measurements) != b:
            raise ValueError(f"expected {b} measurements, got {len(measurements)}")
        res = _Local(b, n)
        priors: list[GaussianBelief] = []
        for i in range(b):
            try:
                priors.append(predict(self.beliefs[i], self.models[i]))
            except ModelError as exc:
                log.warning("node %d prediction failed: %s", i, exc)
                priors.append(self.beliefs[i])
                res.failed[i] = True
        nodes = [i for i in range(b) if measurements[i] is not None and not res.failed[i]]
        if nodes:
            if self.batched:
                self._local_batched(res, priors, measurements, nodes)
            else:
                self._local_nodewise(res, priors, measurements, nodes)

        if not self._exchanges:
            # no exchange: every node keeps its local posterior
            for i in range(b):
                self.beliefs[i] = res.local[i] if res.local[i] is not None else priors[i]
        else:
            self._fuse(res, priors, k, rng)

        if self.tuners is not None:
            for i in range(b):
                if res.regress[i] is None:
                    continue
                z, W = res.regress[i]
                self.tuners[i].refresh(z - W @ self.beliefs[i].mean)
        return StepReport(res.iters, res.gated, res.failed)

    def means(self) -> np.ndarray:
        return np.stack([bl.mean for bl in self.beliefs])

    def covs(self) -> np.ndarray:
        return np.stack([bl.cov for bl in self.beliefs])
