from __future__ import annotations

import logging
import os
from collections.abc import Callable, Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any, TypeVar

import networkx as nx
import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError

from .errors import NetworkFileError, StructuralError, TopologyValidationError

logger = logging.getLogger(__name__)

BusId = int

# No binding current limit unless the data file states one
DEFAULT_AMPACITY_PU = 1.0e6

DATA_DIR_ENV = "TOPODISPATCH_DATA_DIR"

_T = TypeVar("_T")


def data_dir() -> Path:
    """Directory holding the shipped feeder and reconfiguration files."""
    override = os.getenv(DATA_DIR_ENV)
    if override:
        return Path(override)
    return Path(__file__).parent / "data"


class _Record(BaseModel):
    # Immutable, strict records; aliases are the on-disk field names
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)


class LineSpec(_Record):
    from_bus: BusId = Field(alias="from")
    to_bus: BusId = Field(alias="to")
    resistance_pu: float = Field(alias="r_pu")
    reactance_pu: float = Field(alias="x_pu")
    ampacity_pu: float = Field(default=DEFAULT_AMPACITY_PU)

    @property
    def endpoints(self) -> frozenset[BusId]:
        return frozenset((self.from_bus, self.to_bus))


class EssSpec(_Record):
    node: BusId
    capacity_kwh: float
    power_max_kw: float = Field(alias="p_max_kw")
    power_min_kw: float = Field(alias="p_min_kw")
    efficiency: float = 1.0
    soc_min: float
    soc_max: float
    soc_init: float


class LoadSpec(_Record):
    node: BusId
    p_kw: float
    q_kvar: float = 0.0


class PvSpec(_Record):
    node: BusId
    capacity_kw: float


class NetworkLimits(_Record):
    v_min_pu: float = Field(default=0.95, alias="v_min")
    v_max_pu: float = Field(default=1.05, alias="v_max")
    v_nominal_pu: float = Field(default=1.0, alias="v_nominal")
    base_mva: float = 1.0
    base_kv: float = 12.66


class NetworkTopology(_Record):
    """Radial distribution network: the graph shared by power flow and the encoders.

    Build instances through `build_topology`, `load_network` or
    `apply_reconfiguration`; those run the invariant checks.
    """

    name: str = "network"
    buses: tuple[BusId, ...]
    lines: tuple[LineSpec, ...]
    substation: BusId = 1
    ess: tuple[EssSpec, ...] = ()
    limits: NetworkLimits = NetworkLimits()
    loads: tuple[LoadSpec, ...] = ()
    pv: tuple[PvSpec, ...] = ()

    _cache: dict[str, Any] = PrivateAttr(default_factory=dict)

    # Equality and hashing see the declared fields only, never the derived-structure cache
    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NetworkTopology):
            return NotImplemented
        return type(self) is type(other) and self.__dict__ == other.__dict__

    def __hash__(self) -> int:
        return hash(tuple(self.__dict__.values()))

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_ess(self) -> int:
        return len(self.ess)

    @property
    def ess_nodes(self) -> tuple[BusId, ...]:
        return tuple(e.node for e in self.ess)

    @property
    def topology_id(self) -> str:
        return self.name

    def bus_position(self, bus: BusId) -> int:
        return bus - 1

    def cached(self, key: str, factory: Callable[[NetworkTopology], _T]) -> _T:
        """Memoize a structure derived from this (immutable) topology."""
        if key not in self._cache:
            self._cache[key] = factory(self)
        return self._cache[key]  # type: ignore[no-any-return]


class LineSwap(_Record):
    old: tuple[BusId, BusId]
    new: tuple[BusId, BusId]


class ReconfigurationCase(_Record):
    id: str
    kind: str = ""
    swaps: tuple[LineSwap, ...] = ()


class _Header(_Record):
    base_mva: float = 1.0
    base_kv: float = 12.66
    v_min: float = 0.95
    v_max: float = 1.05
    v_nominal: float = 1.0
    substation: BusId = 1


class _NetworkFile(_Record):
    name: str = "network"
    header: _Header = _Header()
    lines: list[LineSpec]
    ess: list[EssSpec] = Field(default_factory=list)
    loads: list[LoadSpec] = Field(default_factory=list)
    pv: list[PvSpec] = Field(default_factory=list)


class _ReconfigurationFile(_Record):
    system: str = ""
    cases: list[ReconfigurationCase]


def _graph(lines: Iterable[LineSpec], buses: Iterable[BusId]) -> nx.Graph:
    g = nx.Graph()
    g.add_nodes_from(buses)
    g.add_edges_from((ln.from_bus, ln.to_bus) for ln in lines)
    return g


def validate_topology(topo: NetworkTopology) -> NetworkTopology:
    """Check every NetworkTopology invariant; raise TopologyValidationError naming it."""
    n = len(topo.buses)
    if sorted(topo.buses) != list(range(1, n + 1)):
        raise TopologyValidationError("bus-ids", f"buses must be exactly 1..{n}")
    bus_set = set(topo.buses)
    if topo.substation not in bus_set:
        raise TopologyValidationError("substation", f"substation {topo.substation} is not a bus")

    lim = topo.limits
    if not lim.v_min_pu < lim.v_nominal_pu < lim.v_max_pu:
        raise TopologyValidationError(
            "limits",
            f"need v_min < v_nominal < v_max, got {lim.v_min_pu}, {lim.v_nominal_pu}, {lim.v_max_pu}",
        )
    if lim.base_mva <= 0 or lim.base_kv <= 0:
        raise TopologyValidationError("limits", "base_mva and base_kv must be positive")

    for ln in topo.lines:
        if ln.from_bus == ln.to_bus:
            raise TopologyValidationError("line", f"line {ln.from_bus}-{ln.to_bus} is a self loop")
        if ln.from_bus not in bus_set or ln.to_bus not in bus_set:
            raise TopologyValidationError(
                "line", f"line {ln.from_bus}-{ln.to_bus} references an unknown bus"
            )
        if ln.resistance_pu < 0 or ln.reactance_pu < 0:
            raise TopologyValidationError(
                "line", f"line {ln.from_bus}-{ln.to_bus} has negative impedance"
            )
        if ln.ampacity_pu <= 0:
            raise TopologyValidationError(
                "line", f"line {ln.from_bus}-{ln.to_bus} ampacity must be positive"
            )

    if len(topo.lines) != n - 1:
        raise TopologyValidationError(
            "radial", f"{n} buses need {n - 1} lines, found {len(topo.lines)}"
        )
    if not nx.is_connected(_graph(topo.lines, topo.buses)):
        raise TopologyValidationError("radial", "line graph is not connected")

    seen: set[BusId] = set()
    for e in topo.ess:
        if e.node not in bus_set:
            raise TopologyValidationError("ess-node", f"ESS node {e.node} is not a bus")
        if e.node in seen:
            raise TopologyValidationError("ess-node", f"duplicate ESS node {e.node}")
        seen.add(e.node)
        if not 0.0 <= e.soc_min < e.soc_init < e.soc_max <= 1.0:
            raise TopologyValidationError(
                "ess-soc", f"ESS {e.node}: need 0 <= soc_min < soc_init < soc_max <= 1"
            )
        if not e.power_min_kw < 0.0 < e.power_max_kw:
            raise TopologyValidationError(
                "ess-power", f"ESS {e.node}: need power_min_kw < 0 < power_max_kw"
            )
        if not 0.0 < e.efficiency <= 1.0 or e.capacity_kwh <= 0:
            raise TopologyValidationError(
                "ess-spec", f"ESS {e.node}: efficiency in (0,1] and positive capacity required"
            )
    for ld in topo.loads:
        if ld.node not in bus_set:
            raise TopologyValidationError("load-node", f"load node {ld.node} is not a bus")
    for p in topo.pv:
        if p.node not in bus_set or p.capacity_kw < 0:
            raise TopologyValidationError("pv-node", f"bad PV entry at node {p.node}")
    return topo


def build_topology(
    lines: Sequence[LineSpec],
    *,
    ess: Sequence[EssSpec] = (),
    limits: NetworkLimits | None = None,
    substation: BusId = 1,
    loads: Sequence[LoadSpec] = (),
    pv: Sequence[PvSpec] = (),
    name: str = "network",
    n_buses: int | None = None,
) -> NetworkTopology:
    if n_buses is None:
        n_buses = max((max(ln.from_bus, ln.to_bus) for ln in lines), default=substation)
    topo = NetworkTopology(
        name=name,
        buses=tuple(range(1, n_buses + 1)),
        lines=tuple(lines),
        substation=substation,
        ess=tuple(sorted(ess, key=lambda e: e.node)),
        limits=limits or NetworkLimits(),
        loads=tuple(sorted(loads, key=lambda ld: ld.node)),
        pv=tuple(sorted(pv, key=lambda p: p.node)),
    )
    return validate_topology(topo)


def _read_yaml(path: Path) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise NetworkFileError(str(exc), path=str(path)) from exc
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(exc, "problem", None) or str(exc)
        raise NetworkFileError(f"parse error: {problem}", path=str(path), line=line) from exc


def _describe(exc: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()
    )


def resolve_network_path(name_or_path: str | Path) -> Path:
    """Shipped names like "feeder34" resolve inside the data directory."""
    path = Path(name_or_path)
    if path.exists():
        return path
    candidate = data_dir() / path
    if candidate.suffix == "":
        candidate = candidate.with_suffix(".yaml")
    return candidate


def load_network(path: str | Path) -> NetworkTopology:
    file_path = resolve_network_path(path)
    return topology_from_document(_read_yaml(file_path), source=str(file_path))


def topology_from_document(raw: Any, *, source: str = "<document>") -> NetworkTopology:
    """Validate a parsed network-file mapping and build its topology."""
    if not isinstance(raw, dict):
        raise NetworkFileError("expected a mapping at the top level", path=source, line=1)
    try:
        doc = _NetworkFile.model_validate(raw)
    except ValidationError as exc:
        raise NetworkFileError(_describe(exc), path=source) from exc
    hdr = doc.header
    limits = NetworkLimits(
        v_min=hdr.v_min,
        v_max=hdr.v_max,
        v_nominal=hdr.v_nominal,
        base_mva=hdr.base_mva,
        base_kv=hdr.base_kv,
    )
    buses = {hdr.substation}
    for ln in doc.lines:
        buses.update((ln.from_bus, ln.to_bus))
    topo = build_topology(
        doc.lines,
        ess=doc.ess,
        limits=limits,
        substation=hdr.substation,
        loads=doc.loads,
        pv=doc.pv,
        name=doc.name,
        n_buses=max(buses),
    )
    logger.debug(
        "loaded network %s: %d buses, %d lines, ESS at %s",
        topo.name,
        topo.n_buses,
        len(topo.lines),
        list(topo.ess_nodes),
    )
    return topo


def network_document(topo: NetworkTopology) -> dict[str, Any]:
    """The network-file mapping of `topo`, inverse of `topology_from_document`."""
    lim = topo.limits
    return {
        "name": topo.name,
        "header": {
            "base_mva": lim.base_mva,
            "base_kv": lim.base_kv,
            "v_min": lim.v_min_pu,
            "v_max": lim.v_max_pu,
            "v_nominal": lim.v_nominal_pu,
            "substation": topo.substation,
        },
        "lines": [ln.model_dump(by_alias=True) for ln in topo.lines],
        "ess": [e.model_dump(by_alias=True) for e in topo.ess],
        "loads": [ld.model_dump() for ld in topo.loads],
        "pv": [p.model_dump() for p in topo.pv],
    }


def save_network(topo: NetworkTopology, path: str | Path) -> Path:
    doc = network_document(topo)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")
    return out


def load_reconfigurations(path: str | Path) -> dict[str, ReconfigurationCase]:
    file_path = resolve_network_path(path)
    raw = _read_yaml(file_path)
    try:
        doc = _ReconfigurationFile.model_validate(raw)
    except ValidationError as exc:
        raise NetworkFileError(_describe(exc), path=str(file_path)) from exc
    cases: dict[str, ReconfigurationCase] = {}
    for case in doc.cases:
        if case.id in cases:
            raise NetworkFileError(f"duplicate case id {case.id}", path=str(file_path))
        cases[case.id] = case
    return cases


def bfs_ordering(topo: NetworkTopology) -> list[tuple[BusId, BusId]]:
    """Breadth-first (bus, parent) pairs rooted at the substation."""

    def _order(t: NetworkTopology) -> list[tuple[BusId, BusId]]:
        g = _graph(t.lines, t.buses)
        if not nx.is_connected(g):
            detached = sorted(set(t.buses) - nx.node_connected_component(g, t.substation))
            raise StructuralError(f"buses {detached} are not connected to the substation")
        if g.number_of_edges() != g.number_of_nodes() - 1 or not nx.is_tree(g):
            cycle = nx.find_cycle(g)
            raise StructuralError(f"cycle detected: {cycle}")
        return [
            (child, parent)
            for parent, child in nx.bfs_edges(g, t.substation, sort_neighbors=sorted)
        ]

    return list(topo.cached("bfs_ordering", _order))


def adjacency(topo: NetworkTopology) -> np.ndarray:
    n = topo.n_buses
    adj = np.zeros((n, n), dtype=np.int64)
    for ln in topo.lines:
        i, j = topo.bus_position(ln.from_bus), topo.bus_position(ln.to_bus)
        adj[i, j] = 1
        adj[j, i] = 1
    return adj


def apply_reconfiguration(topo: NetworkTopology, case: ReconfigurationCase) -> NetworkTopology:
    """Swap lines per `case`; the bus set and ESS placements are kept."""
    if not case.swaps:
        return topo
    lines = list(topo.lines)
    bus_set = set(topo.buses)
    for swap in case.swaps:
        old = frozenset(swap.old)
        idx = next((k for k, ln in enumerate(lines) if ln.endpoints == old), None)
        if idx is None:
            raise StructuralError(f"{case.id}: line {swap.old} does not exist")
        if not set(swap.new) <= bus_set:
            raise StructuralError(f"{case.id}: line {swap.new} references an unknown bus")
        # The relocated connection keeps the old conductor's electrical parameters
        lines[idx] = lines[idx].model_copy(update={"from_bus": swap.new[0], "to_bus": swap.new[1]})
    new_topo = topo.model_copy(
        update={"lines": tuple(lines), "name": f"{topo.name}/{case.id}"}, deep=False
    )
    # model_copy shares private state; start the derived-structure cache afresh
    object.__setattr__(new_topo, "__pydantic_private__", {"_cache": {}})
    return validate_topology(new_topo)


def relabel(topo: NetworkTopology, mapping: Mapping[BusId, BusId]) -> NetworkTopology:
    """Return the same network with buses renamed through a bijection."""
    if sorted(mapping) != sorted(topo.buses) or sorted(mapping.values()) != sorted(topo.buses):
        raise StructuralError("relabel mapping must be a permutation of the bus ids")
    lines = [
        ln.model_copy(update={"from_bus": mapping[ln.from_bus], "to_bus": mapping[ln.to_bus]})
        for ln in topo.lines
    ]
    return build_topology(
        lines,
        ess=[e.model_copy(update={"node": mapping[e.node]}) for e in topo.ess],
        limits=topo.limits,
        substation=mapping[topo.substation],
        loads=[ld.model_copy(update={"node": mapping[ld.node]}) for ld in topo.loads],
        pv=[p.model_copy(update={"node": mapping[p.node]}) for p in topo.pv],
        name=f"{topo.name}/relabel",
        n_buses=topo.n_buses,
    )


def kw_to_pu(kw: np.ndarray | float, limits: NetworkLimits) -> np.ndarray:
    return np.asarray(kw, dtype=np.float64) / (1000.0 * limits.base_mva)


def hop_distances(topo: NetworkTopology) -> np.ndarray:
    """All-pairs hop counts on the line graph, ordered by bus position."""

    def _dist(t: NetworkTopology) -> np.ndarray:
        g = _graph(t.lines, t.buses)
        n = t.n_buses
        out = np.full((n, n), -1, dtype=np.int64)
        for src, lengths in nx.all_pairs_shortest_path_length(g):
            for dst, hops in lengths.items():
                out[t.bus_position(src), t.bus_position(dst)] = hops
        return out

    return topo.cached("hop_distances", _dist)
