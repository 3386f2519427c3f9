"""ESS dispatch MDP over one day of exogenous profiles.

The functional core (`reset`, `step`, `run_episode`) is what training and
evaluation use; `DispatchEnv` wraps it as a gymnasium environment with the
flat observation vector.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import gymnasium as gym
import numpy as np
import pandas as pd
from gymnasium import spaces
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import (
    DimensionMismatchError,
    IncompleteEpisodeError,
    InfeasibleOperatingPointError,
    ProfileError,
    TopoDispatchError,
)
from .netmodel import EssSpec, NetworkTopology, kw_to_pu
from .powerflow import PowerFlowSolution, ViolationReport, check_limits, solve_radial_batch
from .profiles import DEFAULT_HORIZON, ExogenousProfiles, ProfileSet

logger = logging.getLogger(__name__)


class RewardConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    phi0: float = Field(default=1.0, gt=0.0)
    phi1: float = Field(default=200.0, ge=0.0)
    divergence_penalty: float = -100.0

    @model_validator(mode="after")
    def _penalty_negative(self) -> RewardConfig:
        if self.divergence_penalty > 0:
            raise ValueError("divergence_penalty must not be positive")
        return self


@dataclass(frozen=True)
class GridState:
    t: int
    price: float
    demand_kw: np.ndarray
    soc: np.ndarray
    v_ess_pu: np.ndarray


@dataclass(frozen=True)
class Action:
    """Per-ESS power in kW, positive = discharging."""

    p_ess_kw: np.ndarray


@dataclass(frozen=True)
class StepResult:
    next_state: GridState
    reward: float
    r0: float
    r1: float
    pf: PowerFlowSolution | None
    violations: ViolationReport
    done: bool
    action: Action
    diverged: bool = False


Policy = Callable[[GridState, NetworkTopology], "np.ndarray | Action"]


def zero_policy(state: GridState, topo: NetworkTopology) -> Action:
    """No ESS operation: 0 kW at every unit, whatever the power range."""
    return Action(p_ess_kw=np.zeros(topo.n_ess))


@dataclass(frozen=True)
class FeatureScaling:
    """Input normalization shared by the flat state and the graph features."""

    price_scale: float = 1.0
    horizon: int = DEFAULT_HORIZON
    base_mva: float = 1.0

    @classmethod
    def for_profiles(
        cls, profiles: ProfileSet, topo: NetworkTopology, horizon: int = DEFAULT_HORIZON
    ) -> FeatureScaling:
        return cls(price_scale=profiles.price_scale, horizon=horizon, base_mva=topo.limits.base_mva)

    def demand_pu(self, demand_kw: np.ndarray) -> np.ndarray:
        return np.asarray(demand_kw, dtype=np.float64) / (1000.0 * self.base_mva)


def check_state(state: GridState, topo: NetworkTopology) -> None:
    if len(state.demand_kw) != topo.n_buses:
        raise DimensionMismatchError(
            f"state has {len(state.demand_kw)} demand entries, topology {topo.name} "
            f"has {topo.n_buses} buses"
        )
    if len(state.soc) != topo.n_ess or len(state.v_ess_pu) != topo.n_ess:
        raise DimensionMismatchError(
            f"state has {len(state.soc)} ESS entries, topology {topo.name} has {topo.n_ess}"
        )


def flat_state(state: GridState, topo: NetworkTopology, scaling: FeatureScaling) -> np.ndarray:
    """[t, price, demand per bus, SOC per ESS, V per ESS]: 2 + |N| + 2|B| entries."""
    check_state(state, topo)
    return np.concatenate(
        [
            [state.t / scaling.horizon, state.price / scaling.price_scale],
            scaling.demand_pu(state.demand_kw),
            np.asarray(state.soc, dtype=np.float64),
            np.asarray(state.v_ess_pu, dtype=np.float64),
        ]
    )


def _ess_array(ess: Sequence[EssSpec], attr: str) -> np.ndarray:
    return np.array([getattr(e, attr) for e in ess], dtype=np.float64)


def scale_action(raw: np.ndarray | Sequence[float], ess: Sequence[EssSpec]) -> Action:
    """Affine map of [-1, 1] onto [power_min_kw, power_max_kw]; raw values are clipped first."""
    raw_arr = np.asarray(raw, dtype=np.float64).reshape(-1)
    if len(raw_arr) != len(ess):
        raise DimensionMismatchError(f"{len(raw_arr)} raw actions for {len(ess)} ESS units")
    clipped = np.clip(raw_arr, -1.0, 1.0)
    lo = _ess_array(ess, "power_min_kw")
    hi = _ess_array(ess, "power_max_kw")
    return Action(p_ess_kw=lo + (clipped + 1.0) * 0.5 * (hi - lo))


def unscale_action(action: Action, ess: Sequence[EssSpec]) -> np.ndarray:
    lo = _ess_array(ess, "power_min_kw")
    hi = _ess_array(ess, "power_max_kw")
    return np.clip(2.0 * (action.p_ess_kw - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def feasible_power(
    soc: np.ndarray, p_kw: np.ndarray, ess: Sequence[EssSpec], dt_hours: float
) -> np.ndarray:
    """Clip requested ESS power so the next SOC and the power stay within their bounds."""
    eff = _ess_array(ess, "efficiency")
    cap = _ess_array(ess, "capacity_kwh")
    per_soc = cap / (eff * dt_hours)
    hi = np.minimum(_ess_array(ess, "power_max_kw"), (soc - _ess_array(ess, "soc_min")) * per_soc)
    lo = np.maximum(_ess_array(ess, "power_min_kw"), (soc - _ess_array(ess, "soc_max")) * per_soc)
    return np.clip(np.asarray(p_kw, dtype=np.float64), lo, np.maximum(hi, lo))


def next_soc(
    soc: np.ndarray, p_kw: np.ndarray, ess: Sequence[EssSpec], dt_hours: float
) -> np.ndarray:
    eff = _ess_array(ess, "efficiency")
    cap = _ess_array(ess, "capacity_kwh")
    new = soc - eff * p_kw * dt_hours / cap
    return np.clip(new, _ess_array(ess, "soc_min"), _ess_array(ess, "soc_max"))


def nodal_injections_kw(
    topo: NetworkTopology, day: ExogenousProfiles, t: int, p_ess_kw: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Net active/reactive injections per bus at step t (generation positive)."""
    p = day.pv_kw[t] - day.demand_kw[t]
    q = -day.reactive()[t]
    ess_pos = [topo.bus_position(n) for n in topo.ess_nodes]
    p = p.copy()
    np.add.at(p, ess_pos, p_ess_kw)
    return p, q


def voltage_penalty(v_ess: np.ndarray, topo: NetworkTopology) -> float:
    lim = topo.limits
    half_band = (lim.v_max_pu - lim.v_min_pu) / 2.0
    return float(np.sum(np.minimum(0.0, half_band - np.abs(lim.v_nominal_pu - v_ess))))


def _ess_voltages(topo: NetworkTopology, v_pu: np.ndarray) -> np.ndarray:
    return np.asarray([v_pu[topo.bus_position(n)] for n in topo.ess_nodes], dtype=np.float64)


def _solve(topo: NetworkTopology, p_kw: np.ndarray, q_kw: np.ndarray) -> PowerFlowSolution | None:
    batch = solve_radial_batch(
        topo, kw_to_pu(p_kw, topo.limits), kw_to_pu(q_kw, topo.limits), raise_infeasible=False
    )
    if not bool(batch.converged[0]):
        return None
    return batch.row(0)


def _state_at(
    day: ExogenousProfiles, t: int, soc: np.ndarray, v_ess: np.ndarray
) -> GridState:
    # Terminal states repeat the last step's exogenous values.
    k = min(t, day.horizon - 1)
    return GridState(
        t=t,
        price=float(day.price[k]),
        demand_kw=day.demand_kw[k].copy(),
        soc=soc,
        v_ess_pu=v_ess,
    )


def reset(
    topo: NetworkTopology,
    profiles: ProfileSet | ExogenousProfiles,
    episode_index: int = 0,
    *,
    horizon: int = DEFAULT_HORIZON,
) -> GridState:
    day = profiles.day(episode_index) if isinstance(profiles, ProfileSet) else profiles
    day.check_against(topo, horizon)
    p, q = nodal_injections_kw(topo, day, 0, np.zeros(topo.n_ess))
    sol = _solve(topo, p, q)
    if sol is None:
        raise InfeasibleOperatingPointError(
            f"power flow at t=0 of episode {episode_index} on {topo.name} did not converge"
        )
    soc = _ess_array(topo.ess, "soc_init")
    return _state_at(day, 0, soc, _ess_voltages(topo, sol.v_pu))


def step(
    state: GridState,
    action: Action,
    topo: NetworkTopology,
    profiles: ExogenousProfiles,
    cfg: RewardConfig | None = None,
) -> StepResult:
    cfg = cfg or RewardConfig()
    day = profiles
    t = state.t
    if not 0 <= t < day.horizon:
        raise ProfileError(f"step index {t} outside horizon {day.horizon}")
    check_state(state, topo)
    if len(action.p_ess_kw) != topo.n_ess:
        raise DimensionMismatchError(
            f"action has {len(action.p_ess_kw)} entries, topology has {topo.n_ess} ESS"
        )

    p_ess = feasible_power(state.soc, action.p_ess_kw, topo.ess, day.dt_hours)
    soc = next_soc(state.soc, p_ess, topo.ess, day.dt_hours)
    p, q = nodal_injections_kw(topo, day, t, p_ess)
    sol = _solve(topo, p, q)
    r0 = float(day.price[t] * np.sum(p_ess) * day.dt_hours)
    clipped = Action(p_ess_kw=p_ess)

    if sol is None:
        logger.warning("power flow diverged at t=%d on %s; ending episode", t, topo.name)
        return StepResult(
            next_state=_state_at(day, t + 1, soc, state.v_ess_pu),
            reward=cfg.divergence_penalty,
            r0=r0,
            r1=0.0,
            pf=None,
            violations=ViolationReport(voltage_violations=[], current_violations=[]),
            done=True,
            action=clipped,
            diverged=True,
        )

    v_ess = _ess_voltages(topo, sol.v_pu)
    r1 = voltage_penalty(v_ess, topo)
    return StepResult(
        next_state=_state_at(day, t + 1, soc, v_ess),
        reward=cfg.phi0 * r0 + cfg.phi1 * r1,
        r0=r0,
        r1=r1,
        pf=sol,
        violations=check_limits(sol, topo.limits, topo),
        done=t + 1 == day.horizon,
        action=clipped,
    )


@dataclass(frozen=True)
class StepRecord:
    """One logged step; enough to recompute cost and violation metrics."""

    t: int
    price: float
    action_kw: tuple[float, ...]
    soc: tuple[float, ...]
    v_ess_pu: tuple[float, ...]
    r0: float
    r1: float
    reward: float
    violations: int
    violation_sum: float
    ess_violations: int
    net_load_kw: float
    dt_hours: float
    diverged: bool
    done: bool


def record_step(
    state: GridState, result: StepResult, day: ExogenousProfiles, topo: NetworkTopology
) -> StepRecord:
    t = state.t
    v_ess = np.asarray(result.next_state.v_ess_pu)
    ess_out = 0
    if result.pf is not None:
        lim = topo.limits
        ess_out = int(np.count_nonzero((v_ess < lim.v_min_pu) | (v_ess > lim.v_max_pu)))
    net = float(np.sum(day.demand_kw[t] - day.pv_kw[t]) - np.sum(result.action.p_ess_kw))
    return StepRecord(
        t=t,
        price=float(day.price[t]),
        action_kw=tuple(float(x) for x in result.action.p_ess_kw),
        soc=tuple(float(x) for x in result.next_state.soc),
        v_ess_pu=tuple(float(x) for x in v_ess),
        r0=result.r0,
        r1=result.r1,
        reward=result.reward,
        violations=len(result.violations.voltage_violations),
        violation_sum=float(sum(mag for _, mag in result.violations.voltage_violations)),
        ess_violations=ess_out,
        net_load_kw=net,
        dt_hours=day.dt_hours,
        diverged=result.diverged,
        done=result.done,
    )


_SCALAR_COLUMNS = (
    "r0",
    "r1",
    "reward",
    "violations",
    "violation_sum",
    "ess_violations",
    "net_load_kw",
    "dt_hours",
    "diverged",
    "done",
)


@dataclass
class EpisodeLog:
    """Ordered step records of one episode."""

    ess_nodes: tuple[int, ...]
    topology_id: str = ""
    day: int = 0
    records: list[StepRecord] = field(default_factory=list)

    def append(self, record: StepRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def complete(self) -> bool:
        # a diverged episode ends early on a fault, not on the horizon
        return bool(self.records) and self.records[-1].done and not self.diverged

    @property
    def diverged(self) -> bool:
        return any(r.diverged for r in self.records)

    @property
    def total_reward(self) -> float:
        return float(sum(r.reward for r in self.records))

    def actions_kw(self) -> np.ndarray:
        return np.array([r.action_kw for r in self.records], dtype=np.float64).reshape(
            len(self.records), len(self.ess_nodes)
        )

    def to_frame(self) -> pd.DataFrame:
        rows: list[dict[str, Any]] = []
        for r in self.records:
            row: dict[str, Any] = {"t": r.t, "price": r.price}
            row.update({f"p_{n}": a for n, a in zip(self.ess_nodes, r.action_kw)})
            row.update({f"soc_{n}": s for n, s in zip(self.ess_nodes, r.soc)})
            row.update({f"v_{n}": v for n, v in zip(self.ess_nodes, r.v_ess_pu)})
            row.update({c: getattr(r, c) for c in _SCALAR_COLUMNS})
            rows.append(row)
        columns = [
            "t",
            "price",
            *(f"p_{n}" for n in self.ess_nodes),
            *(f"soc_{n}" for n in self.ess_nodes),
            *(f"v_{n}" for n in self.ess_nodes),
            *_SCALAR_COLUMNS,
        ]
        frame = pd.DataFrame(rows, columns=columns)
        frame.attrs["topology_id"] = self.topology_id
        frame.attrs["day"] = self.day
        return frame

    def write_csv(self, path: str | Path) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(out, index=False, float_format="%.17g")
        return out

    @classmethod
    def read_csv(cls, path: str | Path, *, topology_id: str = "", day: int = 0) -> EpisodeLog:
        try:
            frame = pd.read_csv(path)
        except (OSError, pd.errors.ParserError) as exc:
            raise ProfileError(f"{path}: {exc}") from exc
        missing = [c for c in ("t", "price", *_SCALAR_COLUMNS) if c not in frame.columns]
        if missing:
            raise ProfileError(f"{path}: not an episode log (missing {missing})")
        nodes = tuple(int(c[2:]) for c in frame.columns if c.startswith("p_"))
        log = cls(ess_nodes=nodes, topology_id=topology_id, day=day)
        for row in frame.itertuples(index=False):
            values = row._asdict()
            log.append(
                StepRecord(
                    t=int(values["t"]),
                    price=float(values["price"]),
                    action_kw=tuple(float(values[f"p_{n}"]) for n in nodes),
                    soc=tuple(float(values[f"soc_{n}"]) for n in nodes),
                    v_ess_pu=tuple(float(values[f"v_{n}"]) for n in nodes),
                    r0=float(values["r0"]),
                    r1=float(values["r1"]),
                    reward=float(values["reward"]),
                    violations=int(values["violations"]),
                    violation_sum=float(values["violation_sum"]),
                    ess_violations=int(values["ess_violations"]),
                    net_load_kw=float(values["net_load_kw"]),
                    dt_hours=float(values["dt_hours"]),
                    diverged=bool(values["diverged"]),
                    done=bool(values["done"]),
                )
            )
        return log


def episode_cost(log: EpisodeLog) -> float:
    """Electricity purchase cost in $: sum over steps of price x net load x dt."""
    if log.diverged:
        raise IncompleteEpisodeError(
            f"episode log diverged at t={log.records[-1].t}; it has no cost"
        )
    if not log.complete:
        raise IncompleteEpisodeError(
            f"episode log of {len(log)} steps does not end on a terminal step"
        )
    return float(sum(r.price * r.net_load_kw * r.dt_hours for r in log.records))


def _resolve_action(out: np.ndarray | Action, topo: NetworkTopology) -> Action:
    if isinstance(out, Action):
        return out
    return scale_action(out, topo.ess)


def run_episode(
    policy: Policy,
    topo: NetworkTopology,
    profiles: ProfileSet | ExogenousProfiles,
    day: int = 0,
    cfg: RewardConfig | None = None,
    *,
    horizon: int = DEFAULT_HORIZON,
) -> EpisodeLog:
    """Roll one complete episode; the policy returns raw [-1, 1] actions or an `Action`."""
    cfg = cfg or RewardConfig()
    exo = profiles.day(day) if isinstance(profiles, ProfileSet) else profiles
    state = reset(topo, exo, day, horizon=horizon)
    log = EpisodeLog(ess_nodes=topo.ess_nodes, topology_id=topo.topology_id, day=day)
    while True:
        result = step(state, _resolve_action(policy(state, topo), topo), topo, exo, cfg)
        log.append(record_step(state, result, exo, topo))
        state = result.next_state
        if result.done:
            break
    logger.debug(
        "episode day=%d on %s: return %.4f over %d steps", day, topo.name, log.total_reward, len(log)
    )
    return log


def baseline_cost(
    topo: NetworkTopology,
    profiles: ProfileSet | ExogenousProfiles,
    episode: int = 0,
    *,
    horizon: int = DEFAULT_HORIZON,
) -> float:
    """Cost of the zero-ESS-action episode."""
    return episode_cost(run_episode(zero_policy, topo, profiles, episode, horizon=horizon))


def saved_cost(log: EpisodeLog, baseline: float) -> float:
    return baseline - episode_cost(log)


class DispatchEnv(gym.Env[np.ndarray, np.ndarray]):
    """gymnasium view of the dispatch MDP with the flat observation vector."""

    metadata = {"render_modes": []}

    def __init__(
        self,
        topo: NetworkTopology,
        profiles: ProfileSet,
        reward: RewardConfig | None = None,
        *,
        scaling: FeatureScaling | None = None,
        horizon: int = DEFAULT_HORIZON,
    ) -> None:
        super().__init__()
        self.topo = topo
        self.profiles = profiles
        self.reward_cfg = reward or RewardConfig()
        self.horizon = horizon
        self.scaling = scaling or FeatureScaling.for_profiles(profiles, topo, horizon)
        obs_dim = 2 + topo.n_buses + 2 * topo.n_ess
        self.observation_space = spaces.Box(-np.inf, np.inf, shape=(obs_dim,), dtype=np.float64)
        self.action_space = spaces.Box(-1.0, 1.0, shape=(topo.n_ess,), dtype=np.float64)
        self._state: GridState | None = None
        self._day: ExogenousProfiles | None = None
        self._done = True

    @property
    def state(self) -> GridState:
        if self._state is None:
            raise TopoDispatchError("environment not reset")
        return self._state

    def reset(
        self, *, seed: int | None = None, options: dict[str, Any] | None = None
    ) -> tuple[np.ndarray, dict[str, Any]]:
        super().reset(seed=seed)
        if options and "day" in options:
            day = int(options["day"])
        else:
            day = int(self.np_random.integers(len(self.profiles)))
        self._day = self.profiles.day(day)
        self._state = reset(self.topo, self._day, day, horizon=self.horizon)
        self._done = False
        return flat_state(self._state, self.topo, self.scaling), {"state": self._state, "day": day}

    def step(
        self, action: np.ndarray
    ) -> tuple[np.ndarray, float, bool, bool, dict[str, Any]]:
        if self._done or self._day is None:
            raise TopoDispatchError("episode finished; call reset()")
        result = step(
            self.state, scale_action(action, self.topo.ess), self.topo, self._day, self.reward_cfg
        )
        self._state = result.next_state
        self._done = result.done
        obs = flat_state(result.next_state, self.topo, self.scaling)
        return obs, result.reward, result.done, False, {"result": result, "state": result.next_state}
