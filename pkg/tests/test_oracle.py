import os
import sys

ROOT = os.path.dirname(os.path.dirname(__file__))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

import numpy as np
import pandas as pd
import pytest

from topodispatch.env import RewardConfig, run_episode
from topodispatch.errors import ConfigError, NetworkFileError
from topodispatch.netmodel import load_network
from topodispatch.oracle import (
    OracleConfig,
    dp_optimum,
    export_instance,
    load_instance,
    replay_schedule_policy,
    solve_horizon_oracle,
    tiny_instance,
    validate_oracle,
    write_schedule_csv,
)
from topodispatch.profiles import ExogenousProfiles, synthetic_profiles

ARBITRAGE = (0.1, 0.1, 0.5, 0.5)


def test_dp_finds_known_arbitrage():
    topo, day = tiny_instance(ARBITRAGE)
    dp = dp_optimum(topo, day)
    # Charge 20 kWh at 0.1 $/kWh, then discharge 50 kWh at 0.5 $/kWh
    replay = run_episode(replay_schedule_policy(dp.p_ess_kw), topo, day, horizon=4)
    zero = run_episode(replay_schedule_policy(np.zeros((1, 4))), topo, day, horizon=4)
    saved = sum(r.price * r.net_load_kw * r.dt_hours for r in zero.records) - sum(
        r.price * r.net_load_kw * r.dt_hours for r in replay.records
    )
    assert saved == pytest.approx(23.0, abs=1e-6)
    assert dp.p_ess_kw[0, 2:] == pytest.approx([100.0, 100.0])


def test_oracle_agrees_with_dp():
    topo, day = tiny_instance(ARBITRAGE)
    check = validate_oracle(topo, day)
    assert check.agrees
    assert check.dp_saved_cost == pytest.approx(23.0, abs=1e-6)
    assert check.oracle_saved_cost == pytest.approx(23.0, abs=0.5)


def test_flat_price_offers_no_savings():
    topo, day = tiny_instance((0.2, 0.2, 0.2, 0.2))
    schedule = solve_horizon_oracle(topo, day, 0, OracleConfig(terminal_soc="initial"))
    assert schedule.feasible
    assert not schedule.fallback
    assert abs(schedule.saved_cost) <= 1e-3
    assert abs(schedule.p_ess_kw.sum()) <= 1e-3


def test_flat_price_with_free_terminal_soc_warns(caplog):
    topo, day = tiny_instance((0.2, 0.2, 0.2, 0.2))
    with caplog.at_level("WARNING", logger="topodispatch.oracle"):
        solve_horizon_oracle(topo, day, 0, OracleConfig(n_starts=1, iterations=5))
    assert "terminal_soc='free'" in caplog.text
    caplog.clear()
    with caplog.at_level("WARNING", logger="topodispatch.oracle"):
        solve_horizon_oracle(topo, day, 0, OracleConfig(terminal_soc="initial", iterations=5))
    assert "flat price" not in caplog.text


def test_schedule_replays_exactly():
    topo = load_network("feeder34")
    days = synthetic_profiles(topo, 1, seed=0, horizon=6)
    cfg = OracleConfig(n_starts=2, iterations=10)
    schedule = solve_horizon_oracle(topo, days, 0, cfg, RewardConfig())
    assert schedule.p_ess_kw.shape == (5, 6)
    assert schedule.log is not None and schedule.log.complete
    assert np.allclose(schedule.log.actions_kw().T, schedule.p_ess_kw)
    assert schedule.best_start in (0, 1)


def test_divergent_day_falls_back_to_zero_schedule():
    topo, day = tiny_instance((0.1, 0.2), impedance_pu=0.5)
    demand = day.demand_kw.copy()
    demand[1, 2] = 10000.0
    broken = ExogenousProfiles(
        price=day.price, demand_kw=demand, pv_kw=day.pv_kw, dt_hours=day.dt_hours
    )
    schedule = solve_horizon_oracle(topo, broken, 0, OracleConfig(n_starts=2, iterations=3))
    assert schedule.fallback
    assert not schedule.feasible
    assert np.all(schedule.p_ess_kw == 0.0)
    assert np.isnan(schedule.baseline_cost)
    assert np.isnan(schedule.saved_cost)


def test_config_guards():
    topo, day = tiny_instance(ARBITRAGE)
    with pytest.raises(ConfigError):
        solve_horizon_oracle(topo, day, 0, OracleConfig(terminal_soc="initial", projection="clip"))
    with pytest.raises(ConfigError):
        dp_optimum(topo, day, levels=100)
    feeder = load_network("feeder34")
    feeder_day = synthetic_profiles(feeder, 1, seed=0, horizon=4).day(0)
    with pytest.raises(ConfigError):
        dp_optimum(feeder, feeder_day)


def test_instance_export_roundtrip(tmp_path):
    topo, day = tiny_instance(ARBITRAGE)
    path = export_instance(topo, day, 0, tmp_path / "instance.json")
    topo2, day2, instance = load_instance(path)
    assert topo2.lines == topo.lines
    assert topo2.ess == topo.ess
    assert np.array_equal(day2.price, day.price)
    assert np.allclose(day2.reactive(), day.reactive())
    assert instance.objective.penalty_weight == RewardConfig().phi1

    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(NetworkFileError):
        load_instance(tmp_path / "bad.json")


def test_schedule_csv(tmp_path):
    topo, day = tiny_instance(ARBITRAGE)
    schedule = solve_horizon_oracle(topo, day, 0, OracleConfig(n_starts=1, iterations=5))
    path = write_schedule_csv(schedule, topo, tmp_path / "schedule.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["t", "p_3"]
    assert np.array_equal(frame["p_3"].to_numpy(), schedule.p_ess_kw[0])
