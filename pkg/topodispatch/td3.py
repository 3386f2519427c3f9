"""TD3 training: exploration, replay, twin-critic targets, delayed actor updates."""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import tensor as T
from .checkpoint import read_tensors, write_tensors
from .env import (
    FeatureScaling,
    GridState,
    Policy,
    RewardConfig,
    reset,
    scale_action,
    step,
    unscale_action,
)
from .errors import CheckpointError, ShapeError, TopoDispatchError, TrainingFault
from .netmodel import NetworkTopology
from .networks import (
    ActorNetwork,
    CriticNetwork,
    Network,
    NetworkConfig,
    actor_forward,
    build_actor,
    build_critic,
    network_from_spec,
)
from .profiles import DEFAULT_HORIZON, ExogenousProfiles, ProfileSet
from .replay import DEFAULT_CAPACITY, ReplayBuffer, Transition, TransitionBatch
from .tensor import ParameterStore, Tape

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
TENSORS_FILE = "tensors.bin"
MANIFEST_FILE = "manifest.json"


class TD3Config(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    gamma: float = Field(default=0.995, ge=0.0, le=1.0)
    tau: float = Field(default=5e-3, gt=0.0, lt=1.0)
    lr: float = Field(default=6e-5, gt=0.0)
    batch: int = Field(default=512, ge=1)
    explore_sigma: float = Field(default=0.1, ge=0.0)
    smooth_sigma: float = Field(default=0.1, ge=0.0)
    smooth_clip: float = Field(default=0.5, ge=0.0)
    policy_delay: int = Field(default=2, ge=1)
    episodes: int = Field(default=1000, ge=0)
    warmup_steps: int = Field(default=1000, ge=0)
    buffer_capacity: int = Field(default=DEFAULT_CAPACITY, ge=1)
    checkpoint_every: int = Field(default=0, ge=0)
    seed: int = 0
    network: NetworkConfig = NetworkConfig()


@dataclass
class TrainState:
    actor: ActorNetwork
    critic: CriticNetwork
    actor_target: ActorNetwork
    critic_target: CriticNetwork
    rng: np.random.Generator
    total_steps: int = 0
    episodes: int = 0
    updates: int = 0
    actor_updates: int = 0


@dataclass(frozen=True)
class TrainingLogRow:
    episode: int
    steps: int
    episode_return: float
    mean_r0: float
    mean_r1: float
    violations: int
    wall_time: float
    topology_id: str = ""


def write_training_log(
    rows: Sequence[TrainingLogRow], path: str | Path, *, timing: bool = True
) -> Path:
    """Training-log CSV; `timing=False` drops the wall-time column for byte-stable reruns."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    columns = [c for c in TrainingLogRow.__annotations__ if timing or c != "wall_time"]
    frame = pd.DataFrame([asdict(r) for r in rows], columns=columns)
    frame = frame.rename(columns={"episode_return": "return"})
    frame.to_csv(out, index=False, float_format="%.17g")
    return out


# Update rules


def select_action(
    state: GridState,
    topo: NetworkTopology,
    actor: ActorNetwork,
    sigma: float,
    rng: np.random.Generator,
    scaling: FeatureScaling,
) -> np.ndarray:
    """clip(actor(s) + N(0, sigma^2), -1, 1)."""
    a = actor_forward(state, topo, actor, scaling)
    if sigma > 0.0:
        a = a + rng.normal(0.0, sigma, size=a.shape)
    return np.clip(a, -1.0, 1.0)


def compute_target(
    batch: TransitionBatch,
    actor_target: ActorNetwork,
    critic_target: CriticNetwork,
    cfg: TD3Config,
    rng: np.random.Generator,
    scaling: FeatureScaling,
) -> np.ndarray:
    """y = r + gamma (1 - done) min(Q1', Q2') at the smoothed target action."""
    a_next = actor_target.forward_batch(batch.next_states, batch.topologies, scaling).value
    noise = rng.normal(0.0, cfg.smooth_sigma, size=a_next.shape)
    noise = np.clip(noise, -cfg.smooth_clip, cfg.smooth_clip)
    a_next = np.clip(a_next + noise, -1.0, 1.0)
    q1, q2 = critic_target.forward_batch(
        batch.next_states, batch.topologies, T.constant(a_next), scaling
    )
    bootstrap = np.minimum(q1.value, q2.value)
    return batch.rewards + cfg.gamma * (1.0 - batch.dones) * bootstrap


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingFault(f"{what} is not finite ({value})")


def critic_update(
    batch: TransitionBatch,
    y: np.ndarray,
    critic: CriticNetwork,
    lr: float,
    scaling: FeatureScaling,
) -> tuple[float, float]:
    """One Adam step on both critics for mean squared Bellman error."""
    with Tape() as tape:
        q1, q2 = critic.forward_batch(
            batch.states, batch.topologies, T.constant(batch.actions), scaling
        )
        target = T.constant(y)
        loss1 = T.mean(T.square(T.sub(q1, target)))
        loss2 = T.mean(T.square(T.sub(q2, target)))
        loss = T.add(loss1, loss2)
    _check_finite(loss.item(), "critic loss")
    tape.backward(loss, wrt=critic.parameters())
    T.optimizer_step(critic.parameters(), lr)
    return loss1.item(), loss2.item()


def actor_update(
    batch: TransitionBatch,
    actor: ActorNetwork,
    critic: CriticNetwork,
    lr: float,
    scaling: FeatureScaling,
) -> float:
    """Ascend mean Q1(s, actor(s)); only actor parameters move."""
    with Tape() as tape:
        actions = actor.forward_batch(batch.states, batch.topologies, scaling)
        q1, _ = critic.forward_batch(batch.states, batch.topologies, actions, scaling)
        objective = T.mean(q1)
        loss = T.scale(objective, -1.0)
    _check_finite(objective.item(), "actor objective")
    tape.backward(loss, wrt=actor.parameters())
    T.optimizer_step(actor.parameters(), lr)
    return objective.item()


def soft_update(online: Network | ParameterStore, target: Network | ParameterStore, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, parameter by parameter."""
    src = online.parameters() if isinstance(online, Network) else online
    dst = target.parameters() if isinstance(target, Network) else target
    if src.names() != dst.names():
        raise ShapeError("online and target networks hold different parameters")
    for p, q in zip(src, dst):
        if p.shape != q.shape:
            raise ShapeError(f"soft update of {p.name!r}: shapes {p.shape} vs {q.shape}")
        q.value = tau * p.value + (1.0 - tau) * q.value


# Agent


class TD3Agent:
    """Online/target networks, optimizer state, replay buffer and counters."""

    def __init__(
        self,
        cfg: TD3Config,
        topo: NetworkTopology,
        scaling: FeatureScaling,
        *,
        topology_id: str | None = None,
        state: TrainState | None = None,
        buffer: ReplayBuffer | None = None,
    ) -> None:
        self.cfg = cfg
        self.scaling = scaling
        self.topology_id = topology_id or topo.topology_id
        if state is None:
            rng = np.random.default_rng(cfg.seed)
            actor = build_actor(cfg.network, topo, rng)
            critic = build_critic(cfg.network, topo, rng)
            state = TrainState(
                actor=actor,
                critic=critic,
                actor_target=actor.clone(),  # type: ignore[arg-type]
                critic_target=critic.clone(),  # type: ignore[arg-type]
                rng=rng,
            )
        self.state = state
        self.buffer = buffer or ReplayBuffer(cfg.buffer_capacity)

    @property
    def variant(self) -> str:
        return self.cfg.network.variant

    @property
    def actor(self) -> ActorNetwork:
        return self.state.actor

    @property
    def critic(self) -> CriticNetwork:
        return self.state.critic

    def act(self, state: GridState, topo: NetworkTopology, *, explore: bool = True) -> np.ndarray:
        s = self.state
        if explore and s.total_steps < self.cfg.warmup_steps:
            return s.rng.uniform(-1.0, 1.0, size=topo.n_ess)
        sigma = self.cfg.explore_sigma if explore else 0.0
        return select_action(state, topo, s.actor, sigma, s.rng, self.scaling)

    def remember(self, tr: Transition, topo: NetworkTopology) -> None:
        self.buffer.add(tr, topo)

    def ready(self) -> bool:
        return len(self.buffer) >= self.cfg.batch

    def update(self) -> dict[str, float]:
        """One critic update; actor and target updates every `policy_delay` calls."""
        s, cfg = self.state, self.cfg
        batch = self.buffer.sample(cfg.batch, s.rng)
        y = compute_target(batch, s.actor_target, s.critic_target, cfg, s.rng, self.scaling)
        loss1, loss2 = critic_update(batch, y, s.critic, cfg.lr, self.scaling)
        s.updates += 1
        out = {"critic_loss1": loss1, "critic_loss2": loss2}
        if s.updates % cfg.policy_delay == 0:
            out["actor_objective"] = actor_update(batch, s.actor, s.critic, cfg.lr, self.scaling)
            soft_update(s.actor, s.actor_target, cfg.tau)
            soft_update(s.critic, s.critic_target, cfg.tau)
            s.actor_updates += 1
        logger.debug("update %d: %s", s.updates, out)
        return out

    def as_policy(self) -> Policy:
        """Deterministic policy over the current online actor."""
        actor, scaling = self.state.actor, self.scaling

        def policy(state: GridState, topo: NetworkTopology) -> np.ndarray:
            return actor_forward(state, topo, actor, scaling)

        return policy

    def save(self, path: str | Path, *, config_hash: str = "", include_replay: bool = True) -> Path:
        return save_checkpoint(self, path, config_hash=config_hash, include_replay=include_replay)


# Training loop

EpisodeSource = Callable[[int, np.random.Generator], tuple[NetworkTopology, ExogenousProfiles]]


def cycle_days(topo: NetworkTopology, profiles: ProfileSet) -> EpisodeSource:
    """Episode k runs on day k (mod the number of days) of one topology."""

    def source(episode: int, rng: np.random.Generator) -> tuple[NetworkTopology, ExogenousProfiles]:
        return topo, profiles.day(episode)

    return source


def random_topologies(topos: Sequence[NetworkTopology], profiles: ProfileSet) -> EpisodeSource:
    """Each episode draws one of `topos` uniformly from the agent's generator."""

    def source(episode: int, rng: np.random.Generator) -> tuple[NetworkTopology, ExogenousProfiles]:
        return topos[int(rng.integers(len(topos)))], profiles.day(episode)

    return source


@dataclass
class TrainResult:
    agent: TD3Agent
    log: list[TrainingLogRow] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def returns(self) -> list[float]:
        return [r.episode_return for r in self.log]


def run_training_episode(
    agent: TD3Agent,
    topo: NetworkTopology,
    day: ExogenousProfiles,
    reward_cfg: RewardConfig,
    *,
    episode: int,
    horizon: int = DEFAULT_HORIZON,
) -> TrainingLogRow:
    started = time.perf_counter()
    state = reset(topo, day, episode, horizon=horizon)
    total = r0_sum = r1_sum = 0.0
    violations = steps = 0
    while True:
        raw = agent.act(state, topo)
        try:
            result = step(state, scale_action(raw, topo.ess), topo, day, reward_cfg)
        except TopoDispatchError as exc:
            exc.add_note(f"episode {episode}, step {state.t}, topology {topo.topology_id}")
            raise
        stored = unscale_action(result.action, topo.ess)
        agent.remember(
            Transition(
                state=state,
                action=stored,
                reward=result.reward,
                next_state=result.next_state,
                done=result.done,
                topology_id=topo.topology_id,
            ),
            topo,
        )
        agent.state.total_steps += 1
        if agent.ready() and agent.state.total_steps >= agent.cfg.warmup_steps:
            agent.update()
        total += result.reward
        r0_sum += result.r0
        r1_sum += result.r1
        violations += len(result.violations.voltage_violations)
        steps += 1
        state = result.next_state
        if result.done:
            break
    agent.state.episodes += 1
    return TrainingLogRow(
        episode=episode,
        steps=steps,
        episode_return=total,
        mean_r0=r0_sum / steps,
        mean_r1=r1_sum / steps,
        violations=violations,
        wall_time=time.perf_counter() - started,
        topology_id=topo.topology_id,
    )


def train(
    agent: TD3Agent,
    source: EpisodeSource,
    reward_cfg: RewardConfig | None = None,
    *,
    episodes: int | None = None,
    horizon: int = DEFAULT_HORIZON,
    checkpoint_dir: str | Path | None = None,
    config_hash: str = "",
    log_path: str | Path | None = None,
) -> TrainResult:
    """Run `episodes` training episodes; every draw comes from the agent's seeded generator."""
    reward_cfg = reward_cfg or RewardConfig()
    n = agent.cfg.episodes if episodes is None else episodes
    result = TrainResult(agent=agent)
    first = agent.state.episodes
    for k in range(first, first + n):
        topo, day = source(k, agent.state.rng)
        row = run_training_episode(agent, topo, day, reward_cfg, episode=k, horizon=horizon)
        result.log.append(row)
        logger.info(
            "episode %d: return %.3f (r0 %.3f, r1 %.4f, %d violations)",
            k,
            row.episode_return,
            row.mean_r0,
            row.mean_r1,
            row.violations,
        )
        every = agent.cfg.checkpoint_every
        if checkpoint_dir is not None and every and (k + 1) % every == 0:
            result.checkpoints.append(
                save_checkpoint(agent, Path(checkpoint_dir) / f"episode_{k + 1:05d}", config_hash=config_hash)
            )
    if checkpoint_dir is not None:
        result.checkpoints.append(
            save_checkpoint(agent, Path(checkpoint_dir) / "final", config_hash=config_hash)
        )
    if log_path is not None:
        write_training_log(result.log, log_path)
    return result


# Checkpoints


class CheckpointManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: int = CHECKPOINT_VERSION
    variant: str
    topology_id: str
    config_hash: str = ""
    td3: dict[str, Any]
    scaling: dict[str, float]
    episodes: int
    total_steps: int
    updates: int
    actor_updates: int
    actor_steps: int
    critic_steps: int
    actor_spec: dict[str, Any]
    critic_spec: dict[str, Any]
    rng_state: dict[str, Any]
    replay_topologies: list[str] | None = None


_NETWORKS = ("actor", "critic", "actor_target", "critic_target")


def save_checkpoint(
    agent: TD3Agent, path: str | Path, *, config_hash: str = "", include_replay: bool = True
) -> Path:
    """Write tensors and a JSON manifest into directory `path`."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    s = agent.state
    tensors: dict[str, np.ndarray] = {}
    for role in _NETWORKS:
        net: Network = getattr(s, role)
        for p in net.parameters():
            tensors[f"{role}/{p.name}"] = p.value
    for role in ("actor", "critic"):
        store = getattr(s, role).parameters()
        for name, (m, v) in store.moments.items():
            tensors[f"{role}.m/{name}"] = m
            tensors[f"{role}.v/{name}"] = v
    replay_ids = None
    if include_replay and len(agent.buffer):
        for key, arr in agent.buffer.state_arrays().items():
            tensors[f"replay/{key}"] = arr
        replay_ids = agent.buffer.topology_ids()
    write_tensors(out / TENSORS_FILE, tensors)
    manifest = CheckpointManifest(
        variant=agent.variant,
        topology_id=agent.topology_id,
        config_hash=config_hash,
        td3=agent.cfg.model_dump(),
        scaling=asdict(agent.scaling),
        episodes=s.episodes,
        total_steps=s.total_steps,
        updates=s.updates,
        actor_updates=s.actor_updates,
        actor_steps=s.actor.parameters().step_count,
        critic_steps=s.critic.parameters().step_count,
        actor_spec=s.actor.spec(),
        critic_spec=s.critic.spec(),
        rng_state=s.rng.bit_generator.state,
        replay_topologies=replay_ids,
    )
    (out / MANIFEST_FILE).write_text(json.dumps(manifest.model_dump(), indent=2, sort_keys=True))
    logger.info("checkpoint written to %s (episode %d)", out, s.episodes)
    return out


def read_manifest(path: str | Path) -> CheckpointManifest:
    src = Path(path) / MANIFEST_FILE
    try:
        manifest = CheckpointManifest.model_validate_json(src.read_text())
    except OSError as exc:
        raise CheckpointError(f"cannot read {src}: {exc}") from exc
    except ValidationError as exc:
        raise CheckpointError(f"{src}: corrupt manifest ({exc.error_count()} errors)") from exc
    if manifest.format_version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{src}: checkpoint version {manifest.format_version}, expected {CHECKPOINT_VERSION}"
        )
    return manifest


def _restore_network(spec: dict[str, Any], tensors: Mapping[str, np.ndarray], role: str) -> Network:
    net = network_from_spec(spec)
    values = {}
    for p in net.parameters():
        key = f"{role}/{p.name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {key!r}")
        values[p.name] = tensors[key]
    try:
        net.parameters().load_values(values)
    except ShapeError as exc:
        raise CheckpointError(f"{role}: {exc}") from exc
    return net


def load_checkpoint(
    path: str | Path,
    *,
    variant: str | None = None,
    topologies: Mapping[str, NetworkTopology] | None = None,
) -> TD3Agent:
    """Restore an agent; with `topologies` the replay buffer is restored too."""
    manifest = read_manifest(path)
    if variant is not None and manifest.variant != variant:
        raise CheckpointError(
            f"checkpoint holds a {manifest.variant!r} network, expected {variant!r}"
        )
    tensors = read_tensors(Path(path) / TENSORS_FILE)
    try:
        cfg = TD3Config.model_validate(manifest.td3)
    except ValidationError as exc:
        raise CheckpointError(f"checkpoint config invalid: {exc}") from exc
    nets = {
        role: _restore_network(
            manifest.actor_spec if role.startswith("actor") else manifest.critic_spec, tensors, role
        )
        for role in _NETWORKS
    }
    for role, steps in (("actor", manifest.actor_steps), ("critic", manifest.critic_steps)):
        store = nets[role].parameters()
        store.step_count = steps
        for name in store.names():
            store.moments[name] = (
                tensors[f"{role}.m/{name}"].copy(),
                tensors[f"{role}.v/{name}"].copy(),
            )
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest.rng_state
    state = TrainState(
        actor=nets["actor"],  # type: ignore[arg-type]
        critic=nets["critic"],  # type: ignore[arg-type]
        actor_target=nets["actor_target"],  # type: ignore[arg-type]
        critic_target=nets["critic_target"],  # type: ignore[arg-type]
        rng=rng,
        total_steps=manifest.total_steps,
        episodes=manifest.episodes,
        updates=manifest.updates,
        actor_updates=manifest.actor_updates,
    )
    buffer = None
    if manifest.replay_topologies is not None and topologies is not None:
        replay = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("replay/")}
        buffer = ReplayBuffer.from_arrays(replay, manifest.replay_topologies, topologies)
    agent = TD3Agent.__new__(TD3Agent)
    agent.cfg = cfg
    agent.scaling = FeatureScaling(
        price_scale=manifest.scaling["price_scale"],
        horizon=int(manifest.scaling["horizon"]),
        base_mva=manifest.scaling["base_mva"],
    )
    agent.topology_id = manifest.topology_id
    agent.state = state
    agent.buffer = buffer or ReplayBuffer(cfg.buffer_capacity)
    logger.info("loaded %s checkpoint from %s (episode %d)", manifest.variant, path, manifest.episodes)
    return agent
