import os
import sys

ROOT = os.path.dirname(os.path.dirname(__file__))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

import numpy as np
import pytest

from topodispatch.errors import NetworkFileError, StructuralError, TopologyValidationError
from topodispatch.netmodel import (
    EssSpec,
    LineSpec,
    NetworkTopology,
    ReconfigurationCase,
    adjacency,
    apply_reconfiguration,
    bfs_ordering,
    build_topology,
    hop_distances,
    load_network,
    load_reconfigurations,
    relabel,
    save_network,
)


def _line(a: int, b: int, r: float = 0.01, x: float = 0.01) -> LineSpec:
    return LineSpec(**{"from": a, "to": b, "r_pu": r, "x_pu": x})


def _ess(node: int) -> EssSpec:
    return EssSpec(
        node=node,
        capacity_kwh=100.0,
        p_max_kw=50.0,
        p_min_kw=-50.0,
        soc_min=0.2,
        soc_max=0.8,
        soc_init=0.4,
    )


def test_feeder34_shape():
    topo = load_network("feeder34")
    assert topo.n_buses == 34
    assert len(topo.lines) == 33
    assert topo.ess_nodes == (12, 16, 27, 30, 34)
    assert topo.limits.base_kv == 11.0
    assert all(e.capacity_kwh == 500 and e.power_max_kw == 200 for e in topo.ess)


def test_feeder69_ess_placement():
    topo = load_network("feeder69")
    assert topo.n_buses == 69
    assert topo.ess_nodes == (14, 16, 18, 20, 22, 24, 26, 27, 65)
    assert all(e.capacity_kwh == 1000 and e.power_max_kw == 300 for e in topo.ess)


def test_extra_line_breaks_radiality():
    lines = [_line(k, k + 1) for k in range(1, 4)] + [_line(1, 4)]
    with pytest.raises(TopologyValidationError) as exc:
        build_topology(lines, n_buses=4)
    assert exc.value.invariant == "radial"


def test_ess_soc_bounds_checked():
    bad = _ess(2).model_copy(update={"soc_init": 0.9})
    with pytest.raises(TopologyValidationError) as exc:
        build_topology([_line(1, 2)], ess=[bad])
    assert exc.value.invariant == "ess-soc"


def test_bfs_and_adjacency_two_buses():
    topo = build_topology([_line(1, 2)])
    assert bfs_ordering(topo) == [(2, 1)]
    assert adjacency(topo).tolist() == [[0, 1], [1, 0]]


def test_bfs_detached_bus_is_structural():
    # Constructed directly so validation does not run first
    topo = NetworkTopology(buses=(1, 2, 3), lines=(_line(1, 2),))
    with pytest.raises(StructuralError):
        bfs_ordering(topo)


def test_bfs_parents_precede_children():
    topo = load_network("feeder34")
    order = bfs_ordering(topo)
    assert len(order) == 33
    seen = {topo.substation}
    for child, parent in order:
        assert parent in seen
        seen.add(child)


def test_adjacency_symmetric_and_counts():
    topo = load_network("feeder34")
    adj = adjacency(topo)
    assert (adj == adj.T).all()
    assert int(adj.sum()) == 66


def test_reconfigurations_stay_radial():
    for system, cases_file in (("feeder34", "reconfig34"), ("feeder69", "reconfig69")):
        base = load_network(system)
        cases = load_reconfigurations(cases_file)
        assert list(cases) == [f"TP{k}" for k in range(1, 8)]
        for case in cases.values():
            topo = apply_reconfiguration(base, case)
            assert topo.ess_nodes == base.ess_nodes
            assert len(bfs_ordering(topo)) == base.n_buses - 1


def test_single_swap_changes_four_adjacency_entries():
    base = load_network("feeder34")
    cases = load_reconfigurations("reconfig34")
    tp2 = apply_reconfiguration(base, cases["TP2"])
    assert tp2.topology_id == "feeder34/TP2"
    assert int(np.abs(adjacency(tp2) - adjacency(base)).sum()) == 4
    assert apply_reconfiguration(base, cases["TP1"]) is base


def test_swap_of_missing_line_rejected():
    base = load_network("feeder34")
    case = ReconfigurationCase.model_validate(
        {"id": "bad", "swaps": [{"old": [1, 34], "new": [2, 34]}]}
    )
    with pytest.raises(StructuralError):
        apply_reconfiguration(base, case)


def test_save_load_roundtrip(tmp_path):
    topo = build_topology([_line(1, 2), _line(2, 3, r=0.02)], ess=[_ess(3)], name="small")
    path = save_network(topo, tmp_path / "small.yaml")
    again = load_network(path)
    assert again.name == "small"
    assert again.lines == topo.lines
    assert again.ess == topo.ess
    assert again == topo


def test_equality_ignores_derived_structures(tmp_path):
    topo = load_network("feeder34")
    again = load_network(save_network(topo, tmp_path / "feeder34.yaml"))
    assert again == topo
    bfs_ordering(topo)
    hop_distances(again)
    assert again == topo
    assert hash(again) == hash(topo)
    assert apply_reconfiguration(topo, load_reconfigurations("reconfig34")["TP2"]) != topo


def test_network_file_errors_name_the_file(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("name: x\nlines: [\n")
    with pytest.raises(NetworkFileError) as exc:
        load_network(path)
    assert "broken.yaml" in str(exc.value)

    path.write_text("name: x\nlines:\n  - {from: 1, to: 2}\n")
    with pytest.raises(NetworkFileError):
        load_network(path)


def test_duplicate_reconfiguration_ids(tmp_path):
    path = tmp_path / "cases.yaml"
    path.write_text("cases:\n  - {id: A, swaps: []}\n  - {id: A, swaps: []}\n")
    with pytest.raises(NetworkFileError):
        load_reconfigurations(path)


def test_relabel_preserves_structure():
    topo = build_topology([_line(1, 2), _line(2, 3)], ess=[_ess(3)])
    moved = relabel(topo, {1: 1, 2: 3, 3: 2})
    assert moved.ess_nodes == (2,)
    assert int(adjacency(moved).sum()) == 4
    assert hop_distances(moved)[0].tolist() == [0, 2, 1]
