"""AC measurement model of a small transmission grid (IEEE 14-bus by default).

State layout: ``[V_1 .. V_nb, A_2 .. A_nb]`` for a slack at bus 1, i.e. all
voltage magnitudes followed by every angle except the slack's, which stays 0.
Injections come from the bus admittance matrix; branch flows use the series
admittance of the line plus half its charging susceptance.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ..robust_filter import GaussianBelief, NonlinearModel
from .holt import HoltForecaster

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class GridConfigError(ValueError):
    """Bad grid file or a selection that references a missing bus or branch."""


_TOKEN = re.compile(r"^(V|A|P|Q)(\d+)(?:-(\d+))?$")

# quantity kinds
VMAG, VANG, PINJ, QINJ, PFLOW, QFLOW = range(6)
_KIND_OF = {("V", False): VMAG, ("A", False): VANG, ("P", False): PINJ,
            ("Q", False): QINJ, ("P", True): PFLOW, ("Q", True): QFLOW}
_PREFIX = {VMAG: "V", VANG: "A", PINJ: "P", QINJ: "Q", PFLOW: "P", QFLOW: "Q"}


@dataclass(frozen=True)
class Quantity:
    """One measured quantity. Buses are 0-based; ``to`` is -1 for bus quantities."""

    kind: int
    bus: int
    to: int = -1

    def token(self) -> str:
        base = f"{_PREFIX[self.kind]}{self.bus + 1}"
        return base if self.to < 0 else f"{base}-{self.to + 1}"


@dataclass(frozen=True)
class PowerGrid:
    """Network data in per unit.

    ``G``/``B`` are the real and imaginary parts of the bus admittance matrix.
    Branch arrays hold the series conductance/susceptance and the half charging
    susceptance of each line; ``shunt_g``/``shunt_b`` are per-bus shunts.
    """

    G: np.ndarray
    B: np.ndarray
    br_from: np.ndarray
    br_to: np.ndarray
    br_g: np.ndarray
    br_b: np.ndarray
    br_bhalf: np.ndarray
    shunt_g: np.ndarray
    shunt_b: np.ndarray
    vm0: np.ndarray
    va0: np.ndarray
    slack: int = 0
    selections: dict = field(default_factory=dict)
    pad_to: int = 0

    @property
    def n_bus(self) -> int:
        return self.G.shape[0]

    @property
    def n_state(self) -> int:
        return 2 * self.n_bus - 1

    @cached_property
    def angle_buses(self) -> np.ndarray:
        return np.array([k for k in range(self.n_bus) if k != self.slack])

    @cached_property
    def state_columns(self) -> np.ndarray:
        """Columns of the (magnitudes, all angles) layout that belong to the state."""
        return np.r_[np.arange(self.n_bus), self.n_bus + self.angle_buses]

    # state <-> (V, A)
    def split(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n_state,):
            raise GridConfigError(f"state must have length {self.n_state}, got {u.shape}")
        nb = self.n_bus
        ang = np.zeros(nb)
        ang[self.angle_buses] = u[nb:]
        return u[:nb], ang

    def join(self, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
        return np.concatenate([vm, np.asarray(va)[self.angle_buses]])

    def initial_state(self) -> np.ndarray:
        return self.join(self.vm0, self.va0)

    def branch_index(self, i: int, j: int) -> tuple[int, bool]:
        """Index of the line joining ``i`` and ``j`` and whether it is stored reversed."""
        fwd = np.flatnonzero((self.br_from == i) & (self.br_to == j))
        if fwd.size:
            return int(fwd[0]), False
        rev = np.flatnonzero((self.br_from == j) & (self.br_to == i))
        if rev.size:
            return int(rev[0]), True
        raise GridConfigError(f"no branch between buses {i + 1} and {j + 1}")


def build_grid(
    n_bus: int,
    branches: Sequence[tuple[int, int, float, float, float]],
    shunt_g: Optional[Sequence[float]] = None,
    shunt_b: Optional[Sequence[float]] = None,
    vm0: Optional[Sequence[float]] = None,
    va0: Optional[Sequence[float]] = None,
    slack: int = 0,
    selections: Optional[dict] = None,
    pad_to: int = 0,
) -> PowerGrid:
    """Assemble a grid from 0-based ``(from, to, r, x, b_half)`` branch tuples."""
    if n_bus < 2:
        raise GridConfigError("need at least two buses")
    gs = np.zeros(n_bus) if shunt_g is None else np.asarray(shunt_g, dtype=float)
    bs = np.zeros(n_bus) if shunt_b is None else np.asarray(shunt_b, dtype=float)
    Y = np.diag(gs + 1j * bs).astype(complex)
    f_idx, t_idx, g_ser, b_ser, b_half = [], [], [], [], []
    for i, j, r, x, bh in branches:
        if not (0 <= i < n_bus and 0 <= j < n_bus) or i == j:
            raise GridConfigError(f"bad branch endpoints ({i + 1}, {j + 1})")
        z = complex(r, x)
        if z == 0:
            raise GridConfigError(f"branch ({i + 1}, {j + 1}) has zero impedance")
        y = 1.0 / z
        Y[i, i] += y + 1j * bh
        Y[j, j] += y + 1j * bh
        Y[i, j] -= y
        Y[j, i] -= y
        f_idx.append(i)
        t_idx.append(j)
        g_ser.append(y.real)
        b_ser.append(y.imag)
        b_half.append(bh)
    grid = PowerGrid(
        G=Y.real.copy(),
        B=Y.imag.copy(),
        br_from=np.array(f_idx, dtype=int),
        br_to=np.array(t_idx, dtype=int),
        br_g=np.array(g_ser),
        br_b=np.array(b_ser),
        br_bhalf=np.array(b_half),
        shunt_g=gs,
        shunt_b=bs,
        vm0=np.ones(n_bus) if vm0 is None else np.asarray(vm0, dtype=float),
        va0=np.zeros(n_bus) if va0 is None else np.asarray(va0, dtype=float),
        slack=slack,
        selections={},
        pad_to=pad_to,
    )
    for name, toks in (selections or {}).items():
        grid.selections[name] = parse_selection(toks, grid)
    return grid


def load_grid(path: Union[str, Path, None] = None) -> PowerGrid:
    """Read a grid TOML file; the bundled IEEE 14-bus case when ``path`` is None."""
    try:
        if path is None:
            text = resources.files("mkmcdse.models.data").joinpath("ieee14.toml").read_text()
        else:
            text = Path(path).read_text()
        doc = tomllib.loads(text)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise GridConfigError(f"cannot read grid file: {exc}") from exc
    try:
        buses = doc["buses"]
        ids = list(buses["id"])
        n_bus = len(ids)
        if ids != list(range(1, n_bus + 1)):
            raise GridConfigError("bus ids must be 1..n in order")
        gs = np.asarray(buses.get("gs", [0.0] * n_bus), dtype=float)
        bs = np.asarray(buses.get("bs", [0.0] * n_bus), dtype=float)
        sh = doc.get("shunts", {})
        for k, bus in enumerate(sh.get("bus", [])):
            gs[bus - 1] += sh.get("g", [0.0] * len(sh["bus"]))[k]
            bs[bus - 1] += sh.get("b", [0.0] * len(sh["bus"]))[k]
        br = doc["branches"]
        tuples = [
            (int(f) - 1, int(t) - 1, float(r), float(x), float(bh))
            for f, t, r, x, bh in zip(br["from"], br["to"], br["r"], br["x"], br["b_half"], strict=True)
        ]
        grid_sec = doc.get("grid", {})
        return build_grid(
            n_bus,
            tuples,
            gs,
            bs,
            vm0=buses["vm"],
            va0=np.deg2rad(np.asarray(buses["va_deg"], dtype=float)),
            slack=int(grid_sec.get("slack", 1)) - 1,
            selections=doc.get("selections", {}),
            pad_to=int(grid_sec.get("pad_to", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, GridConfigError):
            raise
        raise GridConfigError(f"malformed grid file: {exc}") from exc


def parse_selection(tokens: Sequence[str], grid: PowerGrid) -> list[Quantity]:
    out = []
    for tok in tokens:
        mt = _TOKEN.match(str(tok).strip())
        if not mt:
            raise GridConfigError(f"unreadable measurement token {tok!r}")
        letter, a, b = mt.group(1), int(mt.group(2)) - 1, mt.group(3)
        is_flow = b is not None
        if (letter, is_flow) not in _KIND_OF:
            raise GridConfigError(f"token {tok!r} is not a valid quantity")
        if not 0 <= a < grid.n_bus:
            raise GridConfigError(f"token {tok!r} references a missing bus")
        if is_flow:
            j = int(b) - 1
            if not 0 <= j < grid.n_bus:
                raise GridConfigError(f"token {tok!r} references a missing bus")
            grid.branch_index(a, j)
            out.append(Quantity(_KIND_OF[(letter, True)], a, j))
        else:
            out.append(Quantity(_KIND_OF[(letter, False)], a))
    return out


def padded_selection(grid: PowerGrid, base: Sequence[Quantity], size: int) -> list[Quantity]:
    """Extend ``base`` to ``size`` quantities with a fixed, documented order.

    Added in turn until full: the reverse direction of every listed flow, the
    voltage magnitudes not yet present, the missing injections (P then Q per
    bus), then forward P/Q flows of branches not yet covered.
    """
    sel = list(base)
    if size <= len(sel):
        return sel
    seen = set(sel)
    extra: list[Quantity] = []

    def push(q: Quantity) -> None:
        if q not in seen:
            seen.add(q)
            extra.append(q)

    for q in base:
        if q.kind in (PFLOW, QFLOW):
            push(Quantity(q.kind, q.to, q.bus))
    for k in range(grid.n_bus):
        push(Quantity(VMAG, k))
    for k in range(grid.n_bus):
        push(Quantity(PINJ, k))
        push(Quantity(QINJ, k))
    for i, j in zip(grid.br_from, grid.br_to):
        push(Quantity(PFLOW, int(i), int(j)))
        push(Quantity(QFLOW, int(i), int(j)))
    need = size - len(sel)
    if need > len(extra):
        raise GridConfigError(f"cannot pad selection to {size} distinct quantities")
    return sel + extra[:need]


@dataclass(frozen=True)
class CompiledSelection:
    """A selection resolved to index arrays for vectorized evaluation."""

    quantities: tuple
    kinds: np.ndarray
    bus: np.ndarray
    # flow rows: sending/receiving bus and line constants in the measured direction
    flow_rows: np.ndarray
    flow_from: np.ndarray
    flow_to: np.ndarray
    flow_g: np.ndarray
    flow_b: np.ndarray
    flow_bhalf: np.ndarray
    flow_is_p: np.ndarray

    def __len__(self) -> int:
        return len(self.quantities)

    def rows(self, kind: int) -> np.ndarray:
        return np.flatnonzero(self.kinds == kind)

    @cached_property
    def groups(self) -> dict:
        return {k: (self.rows(k), self.bus[self.rows(k)]) for k in (VMAG, VANG, PINJ, QINJ)}


def compile_selection(grid: PowerGrid, sel: Sequence[Quantity]) -> CompiledSelection:
    kinds = np.array([q.kind for q in sel], dtype=int)
    bus = np.array([q.bus for q in sel], dtype=int)
    for q in sel:
        if not 0 <= q.bus < grid.n_bus:
            raise GridConfigError(f"quantity {q} references a missing bus")
    rows = np.flatnonzero((kinds == PFLOW) | (kinds == QFLOW))
    br = np.empty(rows.size, dtype=int)
    for k, r in enumerate(rows):
        br[k], _ = grid.branch_index(sel[r].bus, sel[r].to)
    return CompiledSelection(
        quantities=tuple(sel),
        kinds=kinds,
        bus=bus,
        flow_rows=rows,
        flow_from=np.array([sel[r].bus for r in rows], dtype=int),
        flow_to=np.array([sel[r].to for r in rows], dtype=int),
        flow_g=grid.br_g[br],
        flow_b=grid.br_b[br],
        flow_bhalf=grid.br_bhalf[br],
        flow_is_p=kinds[rows] == PFLOW,
    )


def _as_compiled(grid: PowerGrid, selection) -> CompiledSelection:
    if isinstance(selection, CompiledSelection):
        return selection
    if selection and isinstance(selection[0], str):
        selection = parse_selection(selection, grid)
    return compile_selection(grid, selection)


def _injection_terms(grid: PowerGrid, vm: np.ndarray, va: np.ndarray):
    d = va[:, None] - va[None, :]
    c, s = np.cos(d), np.sin(d)
    vv = vm[:, None] * vm[None, :]
    pm = vv * (grid.G * c + grid.B * s)
    qm = vv * (grid.G * s - grid.B * c)
    return pm, qm


def power_measurement(u: np.ndarray, grid: PowerGrid, selection) -> np.ndarray:
    """Evaluate the selected magnitudes, angles, injections and flows at state ``u``."""
    cs = _as_compiled(grid, selection)
    vm, va = grid.split(u)
    if not (np.all(np.isfinite(vm)) and np.all(np.isfinite(va))):
        raise ValueError("state must be finite")
    out = np.empty(len(cs))
    grp = cs.groups
    r, bb = grp[VMAG]
    out[r] = vm[bb]
    r, bb = grp[VANG]
    out[r] = va[bb]
    if grp[PINJ][0].size or grp[QINJ][0].size:
        pm, qm = _injection_terms(grid, vm, va)
        r, bb = grp[PINJ]
        out[r] = pm.sum(axis=1)[bb]
        r, bb = grp[QINJ]
        out[r] = qm.sum(axis=1)[bb]
    if cs.flow_rows.size:
        i, j, g, b = cs.flow_from, cs.flow_to, cs.flow_g, cs.flow_b
        d = va[i] - va[j]
        c, s = np.cos(d), np.sin(d)
        vi, vj = vm[i], vm[j]
        p = vi**2 * g - vi * vj * (g * c + b * s)
        q = -(vi**2) * (cs.flow_bhalf + b) - vi * vj * (g * s - b * c)
        out[cs.flow_rows] = np.where(cs.flow_is_p, p, q)
    return out


def power_jacobian(u: np.ndarray, grid: PowerGrid, selection) -> np.ndarray:
    """Analytic derivative of :func:`power_measurement` with respect to the state."""
    cs = _as_compiled(grid, selection)
    vm, va = grid.split(u)
    nb = grid.n_bus
    # full columns: magnitudes then all angles; slack angle column dropped at the end
    J = np.zeros((len(cs), 2 * nb))
    grp = cs.groups
    r, bb = grp[VMAG]
    J[r, bb] = 1.0
    r, bb = grp[VANG]
    J[r, nb + bb] = 1.0

    if grp[PINJ][0].size or grp[QINJ][0].size:
        pm, qm = _injection_terms(grid, vm, va)
        P, Qi = pm.sum(axis=1), qm.sum(axis=1)
        pd, qd = np.diag(pm), np.diag(qm)
        dP_dA = qm.copy()
        np.fill_diagonal(dP_dA, -(Qi - qd))
        dQ_dA = -pm
        np.fill_diagonal(dQ_dA, P - pd)
        dP_dV = pm / vm[None, :]
        np.fill_diagonal(dP_dV, (P + pd) / vm)
        dQ_dV = qm / vm[None, :]
        np.fill_diagonal(dQ_dV, (Qi + qd) / vm)
        r, bb = grp[PINJ]
        J[r, :nb] = dP_dV[bb]
        J[r, nb:] = dP_dA[bb]
        r, bb = grp[QINJ]
        J[r, :nb] = dQ_dV[bb]
        J[r, nb:] = dQ_dA[bb]

    rows = cs.flow_rows
    if rows.size:
        i, j, g, b, bh = cs.flow_from, cs.flow_to, cs.flow_g, cs.flow_b, cs.flow_bhalf
        d = va[i] - va[j]
        c, s = np.cos(d), np.sin(d)
        vi, vj = vm[i], vm[j]
        gc_bs = g * c + b * s
        gs_bc = g * s - b * c
        isp = cs.flow_is_p
        J[rows, i] = np.where(isp, 2 * vi * g - vj * gc_bs, -2 * vi * (bh + b) - vj * gs_bc)
        J[rows, j] = np.where(isp, -vi * gc_bs, -vi * gs_bc)
        dai = np.where(isp, vi * vj * gs_bc, -vi * vj * gc_bs)
        J[rows, nb + i] = dai
        J[rows, nb + j] = -dai
    return J[:, grid.state_columns]


# ---------------------------------------------------------------------------
# Scenario helpers


def node_selection(grid: PowerGrid, node: int, pad: Optional[int] = None) -> CompiledSelection:
    """Selection used by 0-based ``node``: T1 for odd sensor numbers, T2 for even."""
    name = "T1" if node % 2 == 0 else "T2"
    if name not in grid.selections:
        raise GridConfigError(f"grid has no selection {name}")
    size = grid.pad_to if pad is None else pad
    return compile_selection(grid, padded_selection(grid, grid.selections[name], size))


@dataclass(frozen=True)
class PowerModel:
    """Forecasting-aided estimation setup for one sensor node."""

    grid: PowerGrid
    selection: CompiledSelection
    q_var: float = 1e-5
    r_var: float = 1e-2
    p0_var: float = 1e-2
    alpha_h: float = 0.8
    beta_h: float = 0.5

    def filter_model(self, x0: Optional[np.ndarray] = None) -> NonlinearModel:
        """Fresh model with its own Holt state (one per filter instance)."""
        x0 = self.grid.initial_state() if x0 is None else x0
        holt = HoltForecaster(x0, self.alpha_h, self.beta_h)
        grid, sel = self.grid, self.selection
        n, m = grid.n_state, len(sel)
        return NonlinearModel(
            f=holt,
            jac_f=holt.jacobian,
            h=lambda u: power_measurement(u, grid, sel),
            jac_h=lambda u: power_jacobian(u, grid, sel),
            Q=self.q_var * np.eye(n),
            R=self.r_var * np.eye(m),
        )

    def initial_belief(self) -> GaussianBelief:
        n = self.grid.n_state
        return GaussianBelief(self.grid.initial_state(), self.p0_var * np.eye(n))


def power_truth(
    grid: PowerGrid, steps: int, rng: np.random.Generator, q_var: float = 1e-5, events: Sequence = ()
) -> np.ndarray:
    """Random walk on the operating point; ``events`` are applied as they fall due.

    Returns an array of shape ``(steps, n_state)``; row ``t`` is the state at step ``t``.
    """
    from .events import apply_event

    n = grid.n_state
    out = np.empty((steps, n))
    x = grid.initial_state()
    sd = np.sqrt(q_var)
    for t in range(steps):
        x = x + sd * rng.standard_normal(n)
        for ev in events:
            x = apply_event(ev, x, t)
        out[t] = x
    return out
