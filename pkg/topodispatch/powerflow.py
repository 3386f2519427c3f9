"""Radial branch-flow power flow (backward-forward sweep) and limit auditing.

Lines are oriented parent -> child along the breadth-first ordering. The line
power P_ij is the quantity appearing in the nodal balance: bus i gives up
P_ij + R_ij I_ij^2 and bus j receives P_ij. The sweep solves the balance,
voltage-drop and apparent-power relations with V_i (sending end) in the last one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, InfeasibleOperatingPointError
from .netmodel import BusId, NetworkLimits, NetworkTopology, bfs_ordering, kw_to_pu

logger = logging.getLogger(__name__)

TOLERANCE_PU = 1e-8
MAX_ITERATIONS = 50


@dataclass(frozen=True)
class InjectionSet:
    """Per-bus net injections in p.u. (generation positive); substation entry ignored."""

    p_inj: np.ndarray
    q_inj: np.ndarray


@dataclass(frozen=True)
class PowerFlowSolution:
    v_pu: np.ndarray
    p_line: np.ndarray
    q_line: np.ndarray
    i_line: np.ndarray
    slack_p: float
    slack_q: float
    iterations: int
    converged: bool
    lines: tuple[tuple[BusId, BusId], ...] = field(default=())


@dataclass(frozen=True)
class BatchSolution:
    """Solutions for many injection scenarios; leading axis indexes the scenario."""

    v_pu: np.ndarray
    p_line: np.ndarray
    q_line: np.ndarray
    i_sq: np.ndarray
    slack_p: np.ndarray
    slack_q: np.ndarray
    iterations: int
    converged: np.ndarray
    lines: tuple[tuple[BusId, BusId], ...]

    def row(self, k: int) -> PowerFlowSolution:
        return PowerFlowSolution(
            v_pu=self.v_pu[k],
            p_line=self.p_line[k],
            q_line=self.q_line[k],
            i_line=np.sqrt(self.i_sq[k]),
            slack_p=float(self.slack_p[k]),
            slack_q=float(self.slack_q[k]),
            iterations=self.iterations,
            converged=bool(self.converged[k]),
            lines=self.lines,
        )


@dataclass(frozen=True)
class ViolationReport:
    voltage_violations: list[tuple[BusId, float]]
    current_violations: list[tuple[tuple[BusId, BusId], float]]

    @property
    def empty(self) -> bool:
        return not self.voltage_violations and not self.current_violations

    @property
    def count(self) -> int:
        return len(self.voltage_violations) + len(self.current_violations)


@dataclass(frozen=True)
class _Sweep:
    lines: tuple[tuple[BusId, BusId], ...]
    parent_pos: np.ndarray
    child_pos: np.ndarray
    r: np.ndarray
    x: np.ndarray
    ampacity: np.ndarray
    subtree: np.ndarray  # subtree[l, m] = 1 when line m lies below (or is) line l
    root_lines: np.ndarray
    substation_pos: int


def _sweep_structure(topo: NetworkTopology) -> _Sweep:
    order = bfs_ordering(topo)
    by_pair = {ln.endpoints: ln for ln in topo.lines}
    n_lines = len(order)
    line_of_child = {child: k for k, (child, _parent) in enumerate(order)}
    parent_pos = np.array([topo.bus_position(p) for _c, p in order], dtype=np.int64)
    child_pos = np.array([topo.bus_position(c) for c, _p in order], dtype=np.int64)
    specs = [by_pair[frozenset((c, p))] for c, p in order]

    subtree = np.eye(n_lines)
    # Reverse BFS order visits children before parents
    for k in range(n_lines - 1, -1, -1):
        child, parent = order[k]
        if parent in line_of_child:
            subtree[line_of_child[parent]] += subtree[k]
    root_lines = np.array(
        [k for k, (_c, p) in enumerate(order) if p == topo.substation], dtype=np.int64
    )
    return _Sweep(
        lines=tuple((p, c) for c, p in order),
        parent_pos=parent_pos,
        child_pos=child_pos,
        r=np.array([s.resistance_pu for s in specs], dtype=np.float64),
        x=np.array([s.reactance_pu for s in specs], dtype=np.float64),
        ampacity=np.array([s.ampacity_pu for s in specs], dtype=np.float64),
        subtree=subtree,
        root_lines=root_lines,
        substation_pos=topo.bus_position(topo.substation),
    )


def sweep_structure(topo: NetworkTopology) -> _Sweep:
    return topo.cached("sweep", _sweep_structure)


def solve_radial_batch(
    topo: NetworkTopology,
    p_inj: np.ndarray,
    q_inj: np.ndarray,
    *,
    tol: float = TOLERANCE_PU,
    max_iter: int = MAX_ITERATIONS,
    raise_infeasible: bool = True,
) -> BatchSolution:
    """Backward-forward sweep over rows of injections (scenarios x buses)."""
    p_inj = np.atleast_2d(np.asarray(p_inj, dtype=np.float64))
    q_inj = np.atleast_2d(np.asarray(q_inj, dtype=np.float64))
    n = topo.n_buses
    if p_inj.shape[-1] != n or q_inj.shape != p_inj.shape:
        raise DimensionMismatchError(
            f"injections of shape {p_inj.shape}/{q_inj.shape} do not match {n} buses"
        )
    if not (np.all(np.isfinite(p_inj)) and np.all(np.isfinite(q_inj))):
        raise DimensionMismatchError("injections must be finite")

    sw = sweep_structure(topo)
    v0 = topo.limits.v_nominal_pu
    v0_sq = v0 * v0
    n_rows = p_inj.shape[0]
    demand_p = -p_inj[:, sw.child_pos]
    demand_q = -q_inj[:, sw.child_pos]
    below = (sw.subtree - np.eye(len(sw.r))).T
    z_sq = sw.r**2 + sw.x**2

    i_sq = np.zeros_like(demand_p)
    v = np.full((n_rows, n), v0)
    v_sq = np.full((n_rows, n), v0_sq)
    converged = np.zeros(n_rows, dtype=bool)
    p_line = np.zeros_like(demand_p)
    q_line = np.zeros_like(demand_p)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        # Backward: accumulate subtree demand plus downstream series losses
        p_line = demand_p @ sw.subtree.T + (sw.r * i_sq) @ below
        q_line = demand_q @ sw.subtree.T + (sw.x * i_sq) @ below
        # Forward: V_j^2 = V_0^2 - sum of drops on the path to j
        drop = 2.0 * (sw.r * p_line + sw.x * q_line) + z_sq * i_sq
        new_v_sq = np.full((n_rows, n), v0_sq)
        new_v_sq[:, sw.child_pos] = v0_sq - drop @ sw.subtree
        bad = np.any(new_v_sq <= 0.0, axis=1)
        if np.any(bad):
            if raise_infeasible:
                worst = int(np.argmin(new_v_sq.min(axis=1)))
                raise InfeasibleOperatingPointError(
                    f"voltage squared turned negative (min {new_v_sq[worst].min():.4g}) "
                    f"after {iterations} sweeps"
                )
            new_v_sq[bad] = np.nan
        v_sq = new_v_sq
        new_v = v0 * np.sqrt(v_sq / v0_sq)
        delta = np.max(np.abs(new_v - v), axis=1)
        v = new_v
        i_sq = (p_line**2 + q_line**2) / v_sq[:, sw.parent_pos]
        converged = (delta < tol) & ~bad
        if np.all(converged | bad):
            break

    if not np.all(converged):
        logger.debug(
            "sweep did not converge for %d of %d scenarios after %d iterations",
            int((~converged).sum()),
            n_rows,
            iterations,
        )
    v[:, sw.substation_pos] = v0
    root = sw.root_lines
    slack_p = (p_line[:, root] + sw.r[root] * i_sq[:, root]).sum(axis=1)
    slack_q = (q_line[:, root] + sw.x[root] * i_sq[:, root]).sum(axis=1)
    return BatchSolution(
        v_pu=v,
        p_line=p_line,
        q_line=q_line,
        i_sq=i_sq,
        slack_p=slack_p,
        slack_q=slack_q,
        iterations=iterations,
        converged=converged,
        lines=sw.lines,
    )


def solve_radial(
    topo: NetworkTopology,
    inj: InjectionSet,
    *,
    tol: float = TOLERANCE_PU,
    max_iter: int = MAX_ITERATIONS,
) -> PowerFlowSolution:
    batch = solve_radial_batch(topo, inj.p_inj, inj.q_inj, tol=tol, max_iter=max_iter)
    return batch.row(0)


def residuals(
    topo: NetworkTopology, inj: InjectionSet, sol: PowerFlowSolution
) -> dict[str, float]:
    """Worst absolute residual of each branch-flow equation family.

    Evaluated line by line from the topology's own line specs, independently of
    the sweep's matrices.
    """
    n = topo.n_buses
    if len(sol.v_pu) != n or len(inj.p_inj) != n or len(inj.q_inj) != n:
        raise DimensionMismatchError("solution/injection length does not match bus count")
    if not (len(sol.p_line) == len(sol.q_line) == len(sol.i_line) == len(topo.lines)):
        raise DimensionMismatchError("solution line arrays do not match line count")
    if len(sol.lines) != len(topo.lines):
        raise DimensionMismatchError("solution carries no line orientation")

    impedance = {ln.endpoints: (ln.resistance_pu, ln.reactance_pu) for ln in topo.lines}
    bal_p = {b: 0.0 for b in topo.buses}
    bal_q = {b: 0.0 for b in topo.buses}
    worst_drop = 0.0
    worst_apparent = 0.0
    for k, (i, j) in enumerate(sol.lines):
        r, x = impedance[frozenset((i, j))]
        p, q = float(sol.p_line[k]), float(sol.q_line[k])
        i2 = float(sol.i_line[k]) ** 2
        vi2 = float(sol.v_pu[i - 1]) ** 2
        vj2 = float(sol.v_pu[j - 1]) ** 2
        bal_p[j] += p
        bal_q[j] += q
        bal_p[i] -= p + r * i2
        bal_q[i] -= q + x * i2
        worst_drop = max(worst_drop, abs(vi2 - vj2 - 2.0 * (r * p + x * q) - (r * r + x * x) * i2))
        worst_apparent = max(worst_apparent, abs(vi2 * i2 - p * p - q * q))
    worst_p = 0.0
    worst_q = 0.0
    for b in topo.buses:
        if b == topo.substation:
            res_p = bal_p[b] + sol.slack_p
            res_q = bal_q[b] + sol.slack_q
        else:
            res_p = bal_p[b] + float(inj.p_inj[b - 1])
            res_q = bal_q[b] + float(inj.q_inj[b - 1])
        worst_p = max(worst_p, abs(res_p))
        worst_q = max(worst_q, abs(res_q))
    return {
        "balance_p": worst_p,
        "balance_q": worst_q,
        "voltage_drop": worst_drop,
        "apparent": worst_apparent,
    }


def slack_balance(topo: NetworkTopology, inj: InjectionSet, sol: PowerFlowSolution) -> float:
    """slack_p - (load - generation + I^2 R losses) over non-substation buses."""
    sw = sweep_structure(topo)
    mask = np.ones(topo.n_buses, dtype=bool)
    mask[sw.substation_pos] = False
    net_load = -float(np.sum(inj.p_inj[mask]))
    losses = float(np.sum(sw.r * sol.i_line**2))
    return sol.slack_p - (net_load + losses)


def voltage_excursions(v_pu: np.ndarray, limits: NetworkLimits) -> np.ndarray:
    """Distance outside [v_min, v_max] per entry (0 inside the band)."""
    v = np.asarray(v_pu, dtype=np.float64)
    return np.maximum(limits.v_min_pu - v, 0.0) + np.maximum(v - limits.v_max_pu, 0.0)


def check_limits(
    sol: PowerFlowSolution, limits: NetworkLimits, topo: NetworkTopology
) -> ViolationReport:
    excursion = voltage_excursions(sol.v_pu, limits)
    voltage = [
        (topo.buses[k], float(excursion[k])) for k in np.flatnonzero(excursion > 0.0)
    ]
    current: list[tuple[tuple[BusId, BusId], float]] = []
    if len(sol.i_line):
        sw = sweep_structure(topo)
        excess = sol.i_line - sw.ampacity
        current = [(sol.lines[k], float(excess[k])) for k in np.flatnonzero(excess > 0.0)]
    return ViolationReport(voltage_violations=voltage, current_violations=current)


def nominal_injections(topo: NetworkTopology, scale: float = 1.0) -> InjectionSet:
    """Injections of the nominal load table (loads enter as negative injections)."""
    p = np.zeros(topo.n_buses)
    q = np.zeros(topo.n_buses)
    for ld in topo.loads:
        k = topo.bus_position(ld.node)
        p[k] -= scale * ld.p_kw
        q[k] -= scale * ld.q_kvar
    return InjectionSet(p_inj=kw_to_pu(p, topo.limits), q_inj=kw_to_pu(q, topo.limits))
