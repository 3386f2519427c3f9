"""Perfect-foresight horizon oracle for ESS dispatch.

The oracle minimizes the day's purchase cost plus a voltage-band penalty over
the full |B| x T power matrix. Gradients are central finite differences taken
through batched power flows; every iterate is projected back onto the power
box and SOC corridor. A brute-force dynamic program over a discretized action
grid certifies the result on tiny instances.
"""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy.optimize import minimize

from .env import (
    Action,
    EpisodeLog,
    GridState,
    Policy,
    RewardConfig,
    episode_cost,
    feasible_power,
    next_soc,
    run_episode,
    zero_policy,
)
from .errors import ConfigError, NetworkFileError, ProfileError
from .netmodel import (
    EssSpec,
    LineSpec,
    LoadSpec,
    NetworkLimits,
    NetworkTopology,
    build_topology,
    kw_to_pu,
    network_document,
    topology_from_document,
)
from .powerflow import solve_radial_batch
from .profiles import ExogenousProfiles, ProfileSet

logger = logging.getLogger(__name__)

INSTANCE_VERSION = 1
DP_MAX_HORIZON = 8
DP_MAX_LEVELS = 41


class OracleConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_starts: int = Field(default=5, ge=1)
    iterations: int = Field(default=200, ge=0)
    step_size: float = Field(default=0.25, gt=0.0)
    decay: float = Field(default=0.98, gt=0.0, le=1.0)
    fd_step_kw: float = Field(default=0.5, gt=0.0)
    tol_kw: float = Field(default=1e-6, ge=0.0)
    # None: use the reward's phi1 so RL and oracle weigh voltage alike
    penalty_weight: float | None = Field(default=None, ge=0.0)
    quadratic_weight: float = Field(default=1e3, ge=0.0)
    projection: Literal["exact", "clip"] = "exact"
    terminal_soc: Literal["free", "initial"] = "free"
    seed: int = 0


@dataclass(frozen=True)
class HorizonSchedule:
    p_ess_kw: np.ndarray
    feasible: bool
    total_cost: float
    baseline_cost: float
    objective: float
    solve_time_s: float
    topology_id: str = ""
    day: int = 0
    fallback: bool = False
    iterations: int = 0
    best_start: int = -1
    log: EpisodeLog | None = None

    @property
    def saved_cost(self) -> float:
        return self.baseline_cost - self.total_cost

    @property
    def horizon(self) -> int:
        return int(self.p_ess_kw.shape[1])


@dataclass(frozen=True)
class _Problem:
    topo: NetworkTopology
    day: ExogenousProfiles
    base_p: np.ndarray
    base_q: np.ndarray
    net_demand: np.ndarray
    ess_pos: np.ndarray
    soc0: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    weight: float
    quadratic_weight: float
    terminal: bool

    @classmethod
    def build(
        cls, topo: NetworkTopology, day: ExogenousProfiles, cfg: OracleConfig, reward: RewardConfig
    ) -> _Problem:
        return cls(
            topo=topo,
            day=day,
            base_p=day.pv_kw - day.demand_kw,
            base_q=-day.reactive(),
            net_demand=np.sum(day.demand_kw - day.pv_kw, axis=1),
            ess_pos=np.array([topo.bus_position(n) for n in topo.ess_nodes], dtype=np.intp),
            soc0=np.array([e.soc_init for e in topo.ess]),
            lo=np.array([e.power_min_kw for e in topo.ess]),
            hi=np.array([e.power_max_kw for e in topo.ess]),
            weight=reward.phi1 if cfg.penalty_weight is None else cfg.penalty_weight,
            quadratic_weight=cfg.quadratic_weight,
            terminal=cfg.terminal_soc == "initial",
        )

    @property
    def horizon(self) -> int:
        return self.day.horizon

    @property
    def n_ess(self) -> int:
        return len(self.ess_pos)


def step_objectives(prob: _Problem, t_idx: np.ndarray, p_rows: np.ndarray) -> np.ndarray:
    """Per-row cost + voltage penalty of ESS powers `p_rows` applied at steps `t_idx`.

    Rows whose power flow does not converge score +inf.
    """
    day, lim = prob.day, prob.topo.limits
    p = prob.base_p[t_idx].copy()
    p[:, prob.ess_pos] += p_rows
    sol = solve_radial_batch(
        prob.topo,
        kw_to_pu(p, lim),
        kw_to_pu(prob.base_q[t_idx], lim),
        raise_infeasible=False,
    )
    half_band = (lim.v_max_pu - lim.v_min_pu) / 2.0
    excess = np.maximum(0.0, np.abs(lim.v_nominal_pu - sol.v_pu[:, prob.ess_pos]) - half_band)
    penalty = prob.weight * excess.sum(axis=1) + prob.quadratic_weight * (excess**2).sum(axis=1)
    cost = day.price[t_idx] * (prob.net_demand[t_idx] - p_rows.sum(axis=1)) * day.dt_hours
    out = cost + penalty
    out[~sol.converged] = np.inf
    return out


def schedule_objective(prob: _Problem, p_ess: np.ndarray) -> float:
    t_idx = np.arange(prob.horizon)
    return float(np.sum(step_objectives(prob, t_idx, p_ess.T)))


def fd_gradient(prob: _Problem, p_ess: np.ndarray, h: float) -> np.ndarray:
    """Central differences of the schedule objective, one batched power flow for all entries.

    Step t's objective depends only on step t's powers, so each entry needs
    just the two perturbed evaluations of its own step.
    """
    n_t, n_b = prob.horizon, prob.n_ess
    t_idx = np.repeat(np.arange(n_t), n_b)
    b_idx = np.tile(np.arange(n_b), n_t)
    rows = p_ess.T[t_idx]
    plus, minus = rows.copy(), rows.copy()
    k = np.arange(len(rows))
    plus[k, b_idx] += h
    minus[k, b_idx] -= h
    f = step_objectives(prob, np.concatenate([t_idx, t_idx]), np.vstack([plus, minus]))
    with np.errstate(invalid="ignore"):
        diff = (f[: len(rows)] - f[len(rows) :]) / (2.0 * h)
    diff[~np.isfinite(diff)] = 0.0
    return diff.reshape(n_t, n_b).T


def clip_schedule(prob: _Problem, p_ess: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sequential per-step clipping: the powers the environment would actually apply."""
    ess, dt = prob.topo.ess, prob.day.dt_hours
    out = np.empty_like(p_ess)
    soc = prob.soc0.copy()
    socs = np.empty_like(p_ess)
    for t in range(prob.horizon):
        out[:, t] = feasible_power(soc, p_ess[:, t], ess, dt)
        soc = next_soc(soc, out[:, t], ess, dt)
        socs[:, t] = soc
    return out, socs


def _project_unit(z: np.ndarray, e: EssSpec, soc0: float, dt: float, terminal: bool) -> np.ndarray:
    """Euclidean projection of one unit's power path onto box and SOC corridor."""
    n = len(z)
    c = e.efficiency * dt / e.capacity_kwh
    lower = np.tril(np.ones((n, n)))
    corridor = np.vstack([-c * lower, c * lower])

    def slack(x: np.ndarray) -> np.ndarray:
        s = c * (lower @ x)
        return np.concatenate([soc0 - e.soc_min - s, e.soc_max - soc0 + s])

    constraints: list[dict[str, Any]] = [
        {"type": "ineq", "fun": slack, "jac": lambda x: corridor}
    ]
    if terminal:
        constraints.append(
            {"type": "eq", "fun": lambda x: np.array([x.sum()]), "jac": lambda x: np.ones((1, n))}
        )
    x0 = np.clip(z, e.power_min_kw, e.power_max_kw)
    res = minimize(
        lambda x: 0.5 * float(np.sum((x - z) ** 2)),
        x0,
        jac=lambda x: x - z,
        method="SLSQP",
        bounds=[(e.power_min_kw, e.power_max_kw)] * n,
        constraints=constraints,
        options={"maxiter": 200, "ftol": 1e-12},
    )
    if not res.success:
        logger.debug("projection for ESS %d: %s", e.node, res.message)
    return np.asarray(res.x, dtype=np.float64)


def project_schedule(prob: _Problem, p_ess: np.ndarray, mode: str = "exact") -> np.ndarray:
    clipped, _ = clip_schedule(prob, p_ess)
    if mode == "clip":
        return clipped
    if np.allclose(clipped, p_ess, atol=1e-9, rtol=0.0) and (
        not prob.terminal or np.all(np.abs(p_ess.sum(axis=1)) < 1e-9)
    ):
        return clipped
    out = np.vstack(
        [
            _project_unit(p_ess[b], e, float(prob.soc0[b]), prob.day.dt_hours, prob.terminal)
            for b, e in enumerate(prob.topo.ess)
        ]
    )
    # SLSQP meets constraints to its tolerance; the env's clip is authoritative
    return clip_schedule(prob, out)[0]


def _starts(prob: _Problem, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    shape = (prob.n_ess, prob.horizon)
    price = prob.day.price
    greedy = np.where(price >= np.median(price), prob.hi[:, None], prob.lo[:, None])
    starts = [np.zeros(shape), np.broadcast_to(greedy, shape).copy()]
    while len(starts) < n:
        starts.append(rng.uniform(prob.lo[:, None], prob.hi[:, None], size=shape))
    return starts[:n]


def _descend(
    prob: _Problem, start: np.ndarray, cfg: OracleConfig
) -> tuple[np.ndarray, float, int]:
    span = (prob.hi - prob.lo)[:, None]
    p = project_schedule(prob, start, cfg.projection)
    best_p, best_f = p, schedule_objective(prob, p)
    k = 0
    for k in range(1, cfg.iterations + 1):
        g = fd_gradient(prob, p, cfg.fd_step_kw)
        scale = np.max(np.abs(g), axis=1, keepdims=True)
        scale[scale == 0.0] = 1.0
        step = cfg.step_size * cfg.decay ** (k - 1) * span
        nxt = project_schedule(prob, p - step * g / scale, cfg.projection)
        moved = float(np.max(np.abs(nxt - p)))
        p = nxt
        f = schedule_objective(prob, p)
        if f < best_f:
            best_p, best_f = p, f
        if moved <= cfg.tol_kw:
            break
    return best_p, best_f, k


def _check_terminal(cfg: OracleConfig) -> None:
    if cfg.terminal_soc == "initial" and cfg.projection == "clip":
        raise ConfigError("terminal_soc='initial' needs the exact projection")


def _day_of(profiles: ProfileSet | ExogenousProfiles, episode: int) -> ExogenousProfiles:
    return profiles.day(episode) if isinstance(profiles, ProfileSet) else profiles


def replay_schedule_policy(schedule: HorizonSchedule | np.ndarray) -> Policy:
    """Policy that plays column t of the schedule, in kW, at step t."""
    p = schedule.p_ess_kw if isinstance(schedule, HorizonSchedule) else np.asarray(schedule)

    def policy(state: GridState, topo: NetworkTopology) -> Action:
        return Action(p_ess_kw=p[:, state.t].copy())

    return policy


def _cost(log: EpisodeLog) -> float:
    # a day the grid cannot serve even without storage has no defined cost
    return float("nan") if log.diverged else episode_cost(log)


def solve_horizon_oracle(
    topo: NetworkTopology,
    profiles: ProfileSet | ExogenousProfiles,
    episode: int = 0,
    cfg: OracleConfig | None = None,
    reward_cfg: RewardConfig | None = None,
) -> HorizonSchedule:
    """Best schedule over `cfg.n_starts` projected-gradient runs.

    When no start yields a convergent schedule the zero schedule is returned
    with `fallback=True` and `feasible=False`.
    """
    cfg = cfg or OracleConfig()
    reward_cfg = reward_cfg or RewardConfig()
    _check_terminal(cfg)
    day = _day_of(profiles, episode)
    day.check_against(topo)
    if cfg.terminal_soc == "free" and np.ptp(day.price) == 0.0:
        logger.warning(
            "flat price on %s day %d with terminal_soc='free': saved cost includes selling "
            "the initial stored energy; use terminal_soc='initial' for a zero-arbitrage check",
            topo.name,
            episode,
        )
    prob = _Problem.build(topo, day, cfg, reward_cfg)
    rng = np.random.default_rng(cfg.seed)

    started = time.perf_counter()
    best: tuple[np.ndarray, float, int] | None = None
    best_start = -1
    iterations = 0
    for s, start in enumerate(_starts(prob, cfg.n_starts, rng)):
        p, f, its = _descend(prob, start, cfg)
        iterations += its
        logger.debug("oracle start %d: objective %.6f after %d iterations", s, f, its)
        if np.isfinite(f) and (best is None or f < best[1]):
            best, best_start = (p, f, its), s
    solve_time = time.perf_counter() - started

    fallback = best is None
    schedule = np.zeros((prob.n_ess, prob.horizon)) if best is None else best[0]
    objective = float("inf") if best is None else best[1]
    if fallback:
        logger.warning(
            "oracle found no convergent schedule on %s day %d; using the zero schedule",
            topo.name,
            episode,
        )

    horizon = day.horizon
    log = run_episode(
        replay_schedule_policy(schedule), topo, day, episode, reward_cfg, horizon=horizon
    )
    baseline_log = run_episode(zero_policy, topo, day, episode, reward_cfg, horizon=horizon)
    if log.diverged:
        logger.warning(
            "oracle schedule diverged on replay at t=%d on %s day %d; using the zero schedule",
            log.records[-1].t,
            topo.name,
            episode,
        )
        fallback = True
        schedule = np.zeros((prob.n_ess, prob.horizon))
        objective = float("inf")
        log = baseline_log
    result = HorizonSchedule(
        p_ess_kw=schedule,
        feasible=not fallback,
        total_cost=_cost(log),
        baseline_cost=_cost(baseline_log),
        objective=objective,
        solve_time_s=solve_time,
        topology_id=topo.topology_id,
        day=episode,
        fallback=fallback,
        iterations=iterations,
        best_start=best_start,
        log=log,
    )
    logger.info(
        "oracle %s day %d: saved %.4f $ (objective %.4f) in %.2f s",
        topo.name,
        episode,
        result.saved_cost,
        objective,
        solve_time,
    )
    return result


# Exhaustive validation


@dataclass(frozen=True)
class DpSolution:
    p_ess_kw: np.ndarray
    objective: float
    states_visited: int


def dp_optimum(
    topo: NetworkTopology,
    day: ExogenousProfiles,
    *,
    levels: int = DP_MAX_LEVELS,
    cfg: OracleConfig | None = None,
    reward_cfg: RewardConfig | None = None,
) -> DpSolution:
    """Exact optimum over a uniform action grid for one ESS, by forward dynamic programming."""
    cfg = cfg or OracleConfig()
    reward_cfg = reward_cfg or RewardConfig()
    if topo.n_ess != 1:
        raise ConfigError(f"dynamic-programming check needs exactly one ESS, got {topo.n_ess}")
    if day.horizon > DP_MAX_HORIZON or not 2 <= levels <= DP_MAX_LEVELS:
        raise ConfigError(
            f"dynamic-programming grid too large: horizon {day.horizon} (max {DP_MAX_HORIZON}), "
            f"{levels} levels (max {DP_MAX_LEVELS})"
        )
    prob = _Problem.build(topo, day, cfg, reward_cfg)
    e = topo.ess[0]
    grid = np.linspace(e.power_min_kw, e.power_max_kw, levels)
    dt = day.dt_hours

    # key -> (value, soc, action path)
    layer: dict[float, tuple[float, float, tuple[float, ...]]] = {
        round(float(prob.soc0[0]), 10): (0.0, float(prob.soc0[0]), ())
    }
    visited = 1
    for t in range(day.horizon):
        socs = np.array([v[1] for v in layer.values()])
        soc_rows = np.repeat(socs, levels)[:, None]
        p = feasible_power(soc_rows, np.tile(grid, len(socs))[:, None], topo.ess, dt)
        uniq, inverse = np.unique(np.round(p[:, 0], 9), return_inverse=True)
        f_uniq = step_objectives(prob, np.full(len(uniq), t), uniq[:, None])
        new_soc = next_soc(soc_rows, p, topo.ess, dt)[:, 0]
        entries = list(layer.values())
        nxt: dict[float, tuple[float, float, tuple[float, ...]]] = {}
        for k in range(len(p)):
            value, _, path = entries[k // levels]
            total = value + f_uniq[inverse[k]]
            if not np.isfinite(total):
                continue
            key = round(float(new_soc[k]), 10)
            if key not in nxt or total < nxt[key][0]:
                nxt[key] = (total, float(new_soc[k]), (*path, float(p[k, 0])))
        layer = nxt
        visited += len(layer)
    if prob.terminal:
        layer = {k: v for k, v in layer.items() if abs(v[1] - prob.soc0[0]) < 1e-9}
    if not layer:
        return DpSolution(np.zeros((1, day.horizon)), float("inf"), visited)
    value, _, path = min(layer.values(), key=lambda v: v[0])
    return DpSolution(np.array([path]), float(value), visited)


@dataclass(frozen=True)
class OracleValidation:
    dp_objective: float
    oracle_objective: float
    baseline_objective: float
    dp_saved_cost: float
    oracle_saved_cost: float
    relative_gap: float
    agrees: bool
    dp_schedule: np.ndarray
    oracle_schedule: np.ndarray


def validate_oracle(
    topo: NetworkTopology,
    day: ExogenousProfiles,
    *,
    levels: int = DP_MAX_LEVELS,
    cfg: OracleConfig | None = None,
    reward_cfg: RewardConfig | None = None,
    tolerance: float = 0.02,
    abs_tolerance: float = 1e-3,
) -> OracleValidation:
    """Compare the gradient oracle with the exhaustive grid optimum.

    Agreement is judged on the saved objective (baseline objective minus
    schedule objective): the oracle may not fall short of the grid optimum by
    more than `tolerance` relative or `abs_tolerance` absolute.
    """
    cfg = cfg or OracleConfig()
    reward_cfg = reward_cfg or RewardConfig()
    dp = dp_optimum(topo, day, levels=levels, cfg=cfg, reward_cfg=reward_cfg)
    schedule = solve_horizon_oracle(topo, day, 0, cfg, reward_cfg)
    prob = _Problem.build(topo, day, cfg, reward_cfg)
    base = schedule_objective(prob, np.zeros((1, day.horizon)))
    dp_saved_obj = base - dp.objective
    oracle_saved_obj = base - schedule.objective
    shortfall = dp_saved_obj - oracle_saved_obj
    gap = shortfall / max(abs(dp_saved_obj), 1e-12)
    agrees = shortfall <= max(tolerance * abs(dp_saved_obj), abs_tolerance)
    dp_log = run_episode(
        replay_schedule_policy(dp.p_ess_kw), topo, day, 0, reward_cfg, horizon=day.horizon
    )
    record = OracleValidation(
        dp_objective=dp.objective,
        oracle_objective=schedule.objective,
        baseline_objective=base,
        dp_saved_cost=schedule.baseline_cost - episode_cost(dp_log),
        oracle_saved_cost=schedule.saved_cost,
        relative_gap=float(gap),
        agrees=bool(agrees),
        dp_schedule=dp.p_ess_kw,
        oracle_schedule=schedule.p_ess_kw,
    )
    logger.info(
        "oracle validation: dp saved %.5f, oracle saved %.5f, gap %.3g (%s)",
        dp_saved_obj,
        oracle_saved_obj,
        gap,
        "ok" if agrees else "MISMATCH",
    )
    return record


def tiny_instance(
    prices: Sequence[float],
    *,
    load_kw: float = 50.0,
    impedance_pu: float = 0.01,
    capacity_kwh: float = 100.0,
    power_kw: float = 100.0,
    soc_init: float = 0.5,
    efficiency: float = 1.0,
    dt_hours: float = 0.25,
) -> tuple[NetworkTopology, ExogenousProfiles]:
    """Three-bus feeder with one ESS at the far end, for exhaustive checks."""
    lines = [
        LineSpec(from_bus=1, to_bus=2, resistance_pu=impedance_pu, reactance_pu=impedance_pu),
        LineSpec(from_bus=2, to_bus=3, resistance_pu=impedance_pu, reactance_pu=impedance_pu),
    ]
    ess = EssSpec(
        node=3,
        capacity_kwh=capacity_kwh,
        power_max_kw=power_kw,
        power_min_kw=-power_kw,
        efficiency=efficiency,
        soc_min=0.2,
        soc_max=0.8,
        soc_init=soc_init,
    )
    topo = build_topology(
        lines,
        ess=[ess],
        limits=NetworkLimits(),
        loads=[LoadSpec(node=3, p_kw=load_kw)],
        name="tiny3",
    )
    n_t = len(prices)
    demand = np.zeros((n_t, 3))
    demand[:, 2] = load_kw
    day = ExogenousProfiles(
        price=np.asarray(prices, dtype=np.float64),
        demand_kw=demand,
        pv_kw=np.zeros((n_t, 3)),
        dt_hours=dt_hours,
    )
    return topo, day


# Exchange format


class OracleObjective(BaseModel):
    model_config = ConfigDict(extra="forbid")

    description: str = (
        "minimize sum_t price_t * sum_i (demand_it - pv_it - p_ess_it) * dt_hours"
        " + penalty_weight * sum excess + quadratic_weight * sum excess^2,"
        " excess = max(0, |v_nominal - V_ess| - (v_max - v_min) / 2)"
    )
    penalty_weight: float
    quadratic_weight: float
    terminal_soc: str = "free"


class OracleInstance(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: int = INSTANCE_VERSION
    day: int = 0
    network: dict[str, Any]
    dt_hours: float
    price: list[float]
    demand_kw: list[list[float]]
    pv_kw: list[list[float]]
    reactive_kw: list[list[float]]
    objective: OracleObjective


def export_instance(
    topo: NetworkTopology,
    profiles: ProfileSet | ExogenousProfiles,
    day: int,
    path: str | Path,
    *,
    cfg: OracleConfig | None = None,
    reward_cfg: RewardConfig | None = None,
) -> Path:
    """Write the full optimization instance as JSON for external solvers."""
    cfg = cfg or OracleConfig()
    reward_cfg = reward_cfg or RewardConfig()
    exo = _day_of(profiles, day)
    instance = OracleInstance(
        day=day,
        network=network_document(topo),
        dt_hours=exo.dt_hours,
        price=exo.price.tolist(),
        demand_kw=exo.demand_kw.tolist(),
        pv_kw=exo.pv_kw.tolist(),
        reactive_kw=exo.reactive().tolist(),
        objective=OracleObjective(
            penalty_weight=reward_cfg.phi1 if cfg.penalty_weight is None else cfg.penalty_weight,
            quadratic_weight=cfg.quadratic_weight,
            terminal_soc=cfg.terminal_soc,
        ),
    )
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(instance.model_dump(), indent=2), encoding="utf-8")
    return out


def load_instance(path: str | Path) -> tuple[NetworkTopology, ExogenousProfiles, OracleInstance]:
    src = Path(path)
    try:
        instance = OracleInstance.model_validate_json(src.read_text(encoding="utf-8"))
    except OSError as exc:
        raise NetworkFileError(str(exc), path=str(src)) from exc
    except ValidationError as exc:
        raise NetworkFileError(f"not an oracle instance: {exc.error_count()} errors", path=str(src)) from exc
    if instance.format_version != INSTANCE_VERSION:
        raise NetworkFileError(f"instance version {instance.format_version}", path=str(src))
    topo = topology_from_document(instance.network, source=str(src))
    try:
        day = ExogenousProfiles(
            price=np.asarray(instance.price),
            demand_kw=np.asarray(instance.demand_kw),
            pv_kw=np.asarray(instance.pv_kw),
            reactive_kw=np.asarray(instance.reactive_kw),
            dt_hours=instance.dt_hours,
        )
    except ProfileError as exc:
        exc.add_note(f"while reading {src}")
        raise
    return topo, day, instance


def schedule_frame(schedule: HorizonSchedule, topo: NetworkTopology) -> pd.DataFrame:
    frame = pd.DataFrame(
        schedule.p_ess_kw.T, columns=[f"p_{n}" for n in topo.ess_nodes]
    )
    frame.insert(0, "t", np.arange(schedule.horizon))
    return frame


def write_schedule_csv(schedule: HorizonSchedule, topo: NetworkTopology, path: str | Path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    schedule_frame(schedule, topo).to_csv(out, index=False, float_format="%.17g")
    return out
