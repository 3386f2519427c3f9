import os
import sys

ROOT = os.path.dirname(os.path.dirname(__file__))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from topodispatch.env import FeatureScaling, RewardConfig, run_episode, zero_policy
from topodispatch.evaluation import (
    OracleCache,
    check_oracle_dominance,
    confidence_interval,
    cross_transfer,
    evaluate_policy,
    metrics_from_logs,
    reconfiguration_suite,
    reports_frame,
    timing_comparison,
    transfer_frame,
    with_reference,
    write_frame,
)
from topodispatch.netmodel import ReconfigurationCase, load_network, load_reconfigurations
from topodispatch.networks import NetworkConfig
from topodispatch.oracle import OracleConfig, replay_schedule_policy, solve_horizon_oracle, tiny_instance
from topodispatch.profiles import ProfileSet, synthetic_profiles
from topodispatch.td3 import TD3Agent, TD3Config

H = 4


def _agent(topo, variant: str) -> TD3Agent:
    cfg = TD3Config(network=NetworkConfig(variant=variant, hidden=4, mlp_width=6))
    return TD3Agent(cfg, topo, FeatureScaling(horizon=H, base_mva=topo.limits.base_mva))


def test_confidence_interval():
    mean, lo, hi = confidence_interval([1.0, 2.0, 3.0])
    assert mean == 2.0
    assert hi - mean == pytest.approx(mean - lo)
    assert hi - mean == pytest.approx(4.302653 * (1.0 / np.sqrt(3.0)), rel=1e-5)
    assert confidence_interval([5.0]) == (5.0, 5.0, 5.0)
    with pytest.raises(ValueError):
        confidence_interval([])


def test_zero_policy_metrics_and_flags():
    topo = load_network("feeder34")
    days = synthetic_profiles(topo, 2, seed=0, horizon=H)
    logs = [run_episode(zero_policy, topo, days, d, horizon=H) for d in range(2)]
    report = metrics_from_logs(logs, logs, [0.0, 0.0], policy="zero")
    assert report.saved_cost_usd == 0.0
    assert report.accuracy_vs_oracle_pct is None
    assert "oracle_saved_nonpositive" in report.flags
    assert report.episodes == 2
    row = report.row()
    assert "exec_time_s" not in row and "oracle_time_s" not in row
    assert "exec_time_s" in report.row(timing=True)


def test_with_reference_fills_baseline_column():
    topo = load_network("feeder34")
    days = synthetic_profiles(topo, 1, seed=1, horizon=H)
    zero = run_episode(zero_policy, topo, days, horizon=H)
    greedy = run_episode(lambda s, t: np.ones(t.n_ess), topo, days, horizon=H)
    report = metrics_from_logs([greedy], [zero], policy="greedy")
    assert report.accuracy_vs_baseline_policy_pct is None
    half = with_reference(report, 2.0 * report.saved_cost_usd)
    assert half.accuracy_vs_baseline_policy_pct == pytest.approx(50.0)
    flagged = with_reference(report, 0.0)
    assert flagged.accuracy_vs_baseline_policy_pct is None
    assert flagged.flags.count("reference_saved_nonpositive") == 1


def test_diverged_episode_is_a_fault_not_a_saving():
    topo = load_network("feeder34")
    days = synthetic_profiles(topo, 1, seed=1, horizon=H)
    zero = run_episode(zero_policy, topo, days, horizon=H)
    greedy = run_episode(lambda s, t: np.ones(t.n_ess), topo, days, horizon=H)
    # charging hard, cut off by a power-flow fault on the first step
    first = zero.records[0]
    fault = replace(
        first,
        action_kw=tuple(-50.0 for _ in first.action_kw),
        reward=RewardConfig().divergence_penalty,
        diverged=True,
        done=True,
    )
    faulted = replace(zero, records=[fault])
    assert not faulted.complete

    report = metrics_from_logs([faulted, greedy], [zero, zero], [1.0, 1.0], policy="charger")
    direct = metrics_from_logs([greedy], [zero], [1.0], policy="greedy")
    assert report.saved_cost_usd == direct.saved_cost_usd
    assert report.accuracy_vs_oracle_pct == pytest.approx(direct.accuracy_vs_oracle_pct)
    assert report.diverged_episodes == 1
    assert "diverged" in report.flags
    assert math.isnan(report.episode_saved[0])
    assert report.episodes == 2
    assert all(v.episode != 0 for v in check_oracle_dominance([report]))

    only_faults = metrics_from_logs([faulted], [zero], [1.0], policy="charger")
    assert math.isnan(only_faults.saved_cost_usd)
    assert only_faults.accuracy_vs_oracle_pct is None
    assert "no_valid_episodes" in only_faults.flags
    assert with_reference(only_faults, 5.0) is only_faults


def test_oracle_schedule_scores_full_accuracy():
    topo, day = tiny_instance((0.1, 0.1, 0.5, 0.5))
    profiles = ProfileSet(days=(day,))
    cache = OracleCache(cfg=OracleConfig())
    schedule = cache.get(topo, profiles, 0, RewardConfig())
    report = evaluate_policy(
        replay_schedule_policy(schedule), topo, profiles, [0], name="oracle", oracle=cache, horizon=4
    )
    assert report.accuracy_vs_oracle_pct == pytest.approx(100.0)
    assert report.saved_cost_usd == pytest.approx(schedule.saved_cost)
    assert check_oracle_dominance([report]) == []
    assert len(cache.schedules) == 1


def test_dominance_violation_detected():
    topo, day = tiny_instance((0.1, 0.1, 0.5, 0.5))
    profiles = ProfileSet(days=(day,))
    logs = [run_episode(lambda s, t: np.ones(1), topo, profiles, horizon=4)]
    zero = [run_episode(zero_policy, topo, profiles, horizon=4)]
    report = metrics_from_logs(logs, zero, [0.01], policy="too_good")
    found = check_oracle_dominance([report])
    assert [v.policy for v in found] == ["too_good"]


def test_reconfiguration_suite_deltas():
    base = load_network("feeder34")
    cases = load_reconfigurations("reconfig34")
    subset = {k: cases[k] for k in ("TP1", "TP2")}
    days = synthetic_profiles(base, 1, seed=2, horizon=H)
    agent = _agent(base, "gcn")
    entries = reconfiguration_suite(
        {"zero": zero_policy, "gcn": agent.as_policy()}, base, subset, days, [0], horizon=H
    )
    assert [(e.policy, e.target, e.status) for e in entries] == [
        ("zero", "TP1", "ok"),
        ("gcn", "TP1", "ok"),
        ("zero", "TP2", "ok"),
        ("gcn", "TP2", "ok"),
    ]
    assert entries[0].delta_saved_usd == 0.0
    assert entries[1].delta_saved_usd == 0.0
    assert entries[3].report.topology_id == "feeder34/TP2"
    frame = transfer_frame(entries)
    assert set(frame["status"]) == {"ok"}


def test_inapplicable_case_is_recorded():
    base = load_network("feeder34")
    days = synthetic_profiles(base, 1, seed=2, horizon=H)
    bad = ReconfigurationCase.model_validate(
        {"id": "X", "swaps": [{"old": [1, 30], "new": [2, 30]}]}
    )
    entries = reconfiguration_suite({"zero": zero_policy}, base, {"X": bad}, days, [0], horizon=H)
    assert entries[0].status == "structural_failure"
    assert "X" in entries[0].failure


def test_cross_transfer_flat_network_fails_structurally():
    source = load_network("feeder34")
    target = load_network("feeder69")
    target_days = synthetic_profiles(target, 1, seed=3, horizon=H)
    flat = cross_transfer(
        _agent(source, "nn").as_policy(), "nn", source, target, target_days, [0], horizon=H
    )
    assert flat.status == "structural_failure"
    assert flat.report is None
    assert flat.row()["failure"]
    graph = cross_transfer(
        _agent(source, "gatv2").as_policy(), "gatv2", source, target, target_days, [0], horizon=H
    )
    assert graph.status == "ok"
    assert graph.report.topology_id == "feeder69"


def test_write_frame_csv_and_json(tmp_path):
    topo = load_network("feeder34")
    days = synthetic_profiles(topo, 2, seed=4, horizon=H)
    report = evaluate_policy(zero_policy, topo, days, [0, 1], name="zero", horizon=H)
    paths = write_frame(reports_frame([report]), tmp_path / "m.csv", tmp_path / "m.json")
    assert [p.name for p in paths] == ["m.csv", "m.json"]
    records = json.loads(paths[1].read_text())
    assert records[0]["policy"] == "zero"
    assert records[0]["saved_cost_usd"] == 0.0


def test_solve_time_reported_with_timing():
    topo, day = tiny_instance((0.1, 0.5))
    profiles = ProfileSet(days=(day,))
    schedule = solve_horizon_oracle(topo, profiles, 0, OracleConfig(n_starts=1, iterations=2))
    assert schedule.solve_time_s >= 0.0


def test_identity_case_reproduces_base_metrics():
    base = load_network("feeder34")
    tp1 = {"TP1": load_reconfigurations("reconfig34")["TP1"]}
    days = synthetic_profiles(base, 2, seed=5, horizon=H)
    policy = _agent(base, "tagconv").as_policy()
    direct = evaluate_policy(policy, base, days, [0, 1], name="tagconv", horizon=H)
    (entry,) = reconfiguration_suite({"tagconv": policy}, base, tp1, days, [0, 1], horizon=H)
    assert entry.report.episode_saved == direct.episode_saved
    assert entry.report.violation_count == direct.violation_count


@pytest.mark.integration
def test_policy_inference_beats_oracle_time():
    ratios = {}
    for name in ("feeder34", "feeder69"):
        topo = load_network(name)
        days = synthetic_profiles(topo, 1, seed=0)
        scaling = FeatureScaling.for_profiles(days, topo)
        agent = TD3Agent(TD3Config(), topo, scaling)
        ratios[name] = timing_comparison(agent.as_policy(), topo, days, [0]).ratio
    assert ratios["feeder34"] >= 10.0
    assert ratios["feeder69"] > ratios["feeder34"]
