import os
import sys
from dataclasses import replace

ROOT = os.path.dirname(os.path.dirname(__file__))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

import numpy as np
import pytest

from topodispatch.errors import DimensionMismatchError, InfeasibleOperatingPointError
from topodispatch.netmodel import LineSpec, build_topology, load_network
from topodispatch.powerflow import (
    InjectionSet,
    PowerFlowSolution,
    check_limits,
    nominal_injections,
    residuals,
    slack_balance,
    solve_radial,
    solve_radial_batch,
)


def _two_bus(r: float = 0.01, x: float = 0.01):
    return build_topology([LineSpec(**{"from": 1, "to": 2, "r_pu": r, "x_pu": x})])


def test_zero_injection_is_flat():
    topo = load_network("feeder34")
    inj = InjectionSet(p_inj=np.zeros(34), q_inj=np.zeros(34))
    sol = solve_radial(topo, inj)
    assert sol.converged
    assert np.allclose(sol.v_pu, 1.0)
    assert np.allclose(sol.p_line, 0.0)
    assert max(residuals(topo, inj, sol).values()) < 1e-12


def test_two_bus_closed_form():
    topo = _two_bus()
    inj = InjectionSet(p_inj=np.array([0.0, -0.1]), q_inj=np.zeros(2))
    sol = solve_radial(topo, inj)
    # I^2 = P^2 / V0^2 and V2^2 = V0^2 - 2 (rP + xQ) + (r^2 + x^2) I^2
    assert sol.i_line[0] ** 2 == pytest.approx(0.01, abs=1e-10)
    assert sol.v_pu[1] ** 2 == pytest.approx(0.998002, abs=1e-8)
    assert sol.slack_p == pytest.approx(0.1 + 0.01 * 0.01, abs=1e-10)


@pytest.mark.parametrize("system", ["feeder34", "feeder69"])
def test_nominal_residuals_small(system):
    topo = load_network(system)
    inj = nominal_injections(topo)
    sol = solve_radial(topo, inj)
    assert sol.converged
    res = residuals(topo, inj, sol)
    assert set(res) == {"balance_p", "balance_q", "voltage_drop", "apparent"}
    assert max(res.values()) <= 1e-6
    assert abs(slack_balance(topo, inj, sol)) < 1e-6
    # Voltages fall away from the substation under load
    assert sol.v_pu.min() < 1.0
    assert sol.v_pu[topo.bus_position(topo.substation)] == 1.0


def test_perturbed_voltage_shows_in_residuals():
    topo = load_network("feeder34")
    inj = nominal_injections(topo)
    sol = solve_radial(topo, inj)
    v = sol.v_pu.copy()
    v[1] += 0.01
    assert residuals(topo, inj, replace(sol, v_pu=v))["voltage_drop"] > 1e-4


def test_batch_rows_match_single_solves():
    topo = load_network("feeder34")
    base = nominal_injections(topo)
    scales = np.array([0.5, 1.0, 1.5])
    batch = solve_radial_batch(topo, base.p_inj * scales[:, None], base.q_inj * scales[:, None])
    assert batch.converged.all()
    for k, s in enumerate(scales):
        single = solve_radial(topo, nominal_injections(topo, scale=s))
        assert np.allclose(batch.row(k).v_pu, single.v_pu, atol=1e-10)


def test_infeasible_load_raises_or_flags():
    topo = _two_bus(r=0.5, x=0.5)
    p = np.array([[0.0, -10.0], [0.0, 0.0]])
    q = np.zeros_like(p)
    with pytest.raises(InfeasibleOperatingPointError):
        solve_radial_batch(topo, p, q)
    batch = solve_radial_batch(topo, p, q, raise_infeasible=False)
    assert batch.converged.tolist() == [False, True]


def test_injection_length_checked():
    topo = _two_bus()
    with pytest.raises(DimensionMismatchError):
        solve_radial(topo, InjectionSet(p_inj=np.zeros(3), q_inj=np.zeros(3)))


def test_check_limits_reports_excursions():
    topo = build_topology(
        [
            LineSpec(**{"from": 1, "to": 2, "r_pu": 0.01, "x_pu": 0.01}),
            LineSpec(**{"from": 2, "to": 3, "r_pu": 0.01, "x_pu": 0.01}),
        ]
    )
    sol = PowerFlowSolution(
        v_pu=np.array([1.0, 0.93, 1.06]),
        p_line=np.zeros(0),
        q_line=np.zeros(0),
        i_line=np.zeros(0),
        slack_p=0.0,
        slack_q=0.0,
        iterations=1,
        converged=True,
    )
    report = check_limits(sol, topo.limits, topo)
    assert [bus for bus, _ in report.voltage_violations] == [2, 3]
    mags = [mag for _, mag in report.voltage_violations]
    assert mags == pytest.approx([0.02, 0.01])
    assert report.count == 2
    assert not report.empty
