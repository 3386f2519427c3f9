import os
import sys

ROOT = os.path.dirname(os.path.dirname(__file__))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

import numpy as np
import pytest

from topodispatch.env import (
    Action,
    DispatchEnv,
    EpisodeLog,
    FeatureScaling,
    GridState,
    RewardConfig,
    baseline_cost,
    episode_cost,
    feasible_power,
    flat_state,
    next_soc,
    reset,
    run_episode,
    saved_cost,
    scale_action,
    step,
    unscale_action,
    voltage_penalty,
    zero_policy,
)
from topodispatch.errors import DimensionMismatchError, IncompleteEpisodeError, ProfileError
from topodispatch.netmodel import EssSpec, LineSpec, build_topology, load_network
from topodispatch.profiles import ExogenousProfiles, synthetic_profiles


def _small_topo(r: float = 0.01, x: float = 0.01):
    ess = EssSpec(
        node=2,
        capacity_kwh=100.0,
        p_max_kw=50.0,
        p_min_kw=-50.0,
        soc_min=0.2,
        soc_max=0.8,
        soc_init=0.4,
    )
    return build_topology([LineSpec(**{"from": 1, "to": 2, "r_pu": r, "x_pu": x})], ess=[ess])


def _day(price, demand_kw=None):
    price = np.asarray(price, dtype=float)
    n = len(price)
    demand = np.zeros((n, 2)) if demand_kw is None else np.asarray(demand_kw, dtype=float)
    return ExogenousProfiles(price=price, demand_kw=demand, pv_kw=np.zeros((n, 2)))


def _state(soc: float, price: float = 1.0) -> GridState:
    return GridState(
        t=0, price=price, demand_kw=np.zeros(2), soc=np.array([soc]), v_ess_pu=np.array([1.0])
    )


def test_charging_raises_soc():
    topo = _small_topo()
    day = _day([1.0] * 4)
    result = step(_state(0.4), Action(p_ess_kw=np.array([-40.0])), topo, day)
    assert result.next_state.soc[0] == pytest.approx(0.5)
    assert result.next_state.t == 1
    assert not result.done


def test_discharge_reward():
    topo = _small_topo()
    day = _day([1.0] * 4)
    result = step(_state(0.4), Action(p_ess_kw=np.array([40.0])), topo, day)
    assert result.r0 == pytest.approx(10.0)
    assert result.r1 == 0.0
    assert result.reward == pytest.approx(10.0)
    assert result.next_state.soc[0] == pytest.approx(0.3)


def test_request_clipped_at_soc_limit():
    topo = _small_topo()
    day = _day([1.0] * 4)
    result = step(_state(0.75), Action(p_ess_kw=np.array([-50.0])), topo, day)
    assert result.action.p_ess_kw[0] == pytest.approx(-20.0)
    assert result.next_state.soc[0] == pytest.approx(0.8)


def test_feasible_power_and_next_soc_helpers():
    topo = _small_topo()
    p = feasible_power(np.array([0.25]), np.array([50.0]), topo.ess, 0.25)
    assert p[0] == pytest.approx(20.0)
    assert next_soc(np.array([0.25]), p, topo.ess, 0.25)[0] == pytest.approx(0.2)


def test_voltage_penalty_outside_band():
    topo = _small_topo()
    assert voltage_penalty(np.array([0.94]), topo) == pytest.approx(-0.01)
    assert voltage_penalty(np.array([1.0]), topo) == 0.0


def test_action_scaling():
    topo = _small_topo()
    assert scale_action([-1.0], topo.ess).p_ess_kw[0] == -50.0
    assert scale_action([1.0], topo.ess).p_ess_kw[0] == 50.0
    assert scale_action([3.0], topo.ess).p_ess_kw[0] == 50.0
    assert unscale_action(Action(p_ess_kw=np.array([25.0])), topo.ess)[0] == pytest.approx(0.5)
    with pytest.raises(DimensionMismatchError):
        scale_action([0.0, 0.0], topo.ess)


def test_zero_policy_is_zero_kw():
    topo = load_network("feeder34")
    days = synthetic_profiles(topo, 1, seed=0, horizon=4)
    state = reset(topo, days, horizon=4)
    assert np.all(zero_policy(state, topo).p_ess_kw == 0.0)


def test_wrong_horizon_rejected():
    topo = _small_topo()
    with pytest.raises(ProfileError):
        reset(topo, _day([0.1] * 95), horizon=96)


def test_terminal_state_repeats_last_step():
    topo = _small_topo()
    day = _day([0.1, 0.2, 0.3])
    log = run_episode(zero_policy, topo, day, horizon=3)
    assert len(log) == 3
    assert log.complete
    assert [r.t for r in log.records] == [0, 1, 2]
    state = reset(topo, day, horizon=3)
    for _ in range(3):
        result = step(state, Action(p_ess_kw=np.zeros(1)), topo, day)
        state = result.next_state
    assert result.done
    assert state.t == 3
    assert state.price == 0.3


def test_divergence_ends_episode_with_penalty():
    topo = _small_topo(r=0.5, x=0.5)
    demand = np.array([[0.0, 0.0], [0.0, 10000.0]])
    day = _day([0.1, 0.1], demand)
    state = reset(topo, day, horizon=2)
    first = step(state, Action(p_ess_kw=np.zeros(1)), topo, day)
    assert not first.diverged
    second = step(first.next_state, Action(p_ess_kw=np.zeros(1)), topo, day)
    assert second.diverged
    assert second.done
    assert second.reward == RewardConfig().divergence_penalty
    assert second.pf is None

    log = run_episode(zero_policy, topo, day, horizon=2)
    assert log.diverged
    assert not log.complete
    with pytest.raises(IncompleteEpisodeError, match="diverged"):
        episode_cost(log)


def test_soc_stays_within_bounds_under_random_actions():
    topo = load_network("feeder34")
    days = synthetic_profiles(topo, 1, seed=1, horizon=24)
    rng = np.random.default_rng(5)

    def policy(state, topo):
        return rng.uniform(-3.0, 3.0, size=topo.n_ess)

    log = run_episode(policy, topo, days, horizon=24)
    socs = np.array([r.soc for r in log.records])
    assert socs.min() >= 0.2 - 1e-12
    assert socs.max() <= 0.8 + 1e-12
    assert np.abs(log.actions_kw()).max() <= 200.0


@pytest.mark.parametrize("dt_hours", [0.25, 1.0])
def test_soc_fuzz_feasible_power_never_leaves_bounds(dt_hours):
    ess = load_network("feeder34").ess
    soc_min = np.array([e.soc_min for e in ess])
    soc_max = np.array([e.soc_max for e in ess])
    p_min = np.array([e.power_min_kw for e in ess])
    p_max = np.array([e.power_max_kw for e in ess])
    eff = np.array([e.efficiency for e in ess])
    cap = np.array([e.capacity_kwh for e in ess])
    rng = np.random.default_rng(11)
    walkers, steps = 1000, 100
    soc = rng.uniform(soc_min, soc_max, size=(walkers, len(ess)))
    for _ in range(steps):
        request = rng.uniform(3.0 * p_min, 3.0 * p_max, size=soc.shape)
        p = feasible_power(soc, request, ess, dt_hours)
        assert np.all(p >= p_min - 1e-9) and np.all(p <= p_max + 1e-9)
        unclipped = soc - eff * p * dt_hours / cap
        assert np.all(unclipped >= soc_min - 1e-12)
        assert np.all(unclipped <= soc_max + 1e-12)
        soc = next_soc(soc, p, ess, dt_hours)
        assert np.allclose(soc, np.clip(unclipped, soc_min, soc_max))


def test_zero_policy_saves_nothing():
    topo = load_network("feeder34")
    days = synthetic_profiles(topo, 1, seed=2, horizon=8)
    base = baseline_cost(topo, days, horizon=8)
    log = run_episode(zero_policy, topo, days, horizon=8)
    assert saved_cost(log, base) == 0.0
    assert base > 0.0


def test_episode_log_csv_roundtrip(tmp_path):
    topo = load_network("feeder34")
    days = synthetic_profiles(topo, 1, seed=3, horizon=6)
    log = run_episode(lambda s, t: np.full(t.n_ess, 0.3), topo, days, horizon=6)
    path = log.write_csv(tmp_path / "day.csv")
    again = EpisodeLog.read_csv(path, topology_id=log.topology_id)
    assert again.ess_nodes == topo.ess_nodes
    assert again.records == log.records
    assert episode_cost(again) == episode_cost(log)


def test_incomplete_log_has_no_cost():
    topo = load_network("feeder34")
    days = synthetic_profiles(topo, 1, seed=3, horizon=6)
    log = run_episode(zero_policy, topo, days, horizon=6)
    partial = EpisodeLog(ess_nodes=log.ess_nodes, records=log.records[:-1])
    with pytest.raises(IncompleteEpisodeError):
        episode_cost(partial)


def test_flat_state_and_gym_env():
    topo = load_network("feeder34")
    days = synthetic_profiles(topo, 2, seed=4, horizon=4)
    env = DispatchEnv(topo, days, horizon=4)
    obs, info = env.reset(seed=0, options={"day": 1})
    assert obs.shape == (46,)
    assert info["day"] == 1
    scaling = FeatureScaling.for_profiles(days, topo, 4)
    assert np.allclose(obs, flat_state(info["state"], topo, scaling))
    done = False
    steps = 0
    while not done:
        obs, reward, done, truncated, info = env.step(np.zeros(topo.n_ess))
        steps += 1
        assert not truncated
        assert np.isfinite(reward)
    assert steps == 4
    assert info["result"].done
