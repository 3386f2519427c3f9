"""Actor and critic networks: three graph-encoder variants and the flat MLP baseline."""

from __future__ import annotations

import copy
import logging
from abc import ABC, abstractmethod
from collections.abc import Sequence
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import tensor as T
from .encoders import (
    DEFAULT_HOPS,
    N_FEATURES,
    GraphOperators,
    action_channel,
    batch_features,
    batch_operators,
    ess_embeddings,
    gat_forward,
    gcn_forward,
    mean_pool,
    tag_forward,
)
from .env import FeatureScaling, GridState, flat_state
from .errors import DimensionMismatchError
from .netmodel import NetworkTopology
from .tensor import Parameter, ParameterStore, Tensor

logger = logging.getLogger(__name__)

Variant = Literal["nn", "gcn", "tagconv", "gatv2"]
GRAPH_VARIANTS: tuple[str, ...] = ("gcn", "tagconv", "gatv2")
VARIANTS: tuple[str, ...] = ("nn", *GRAPH_VARIANTS)
VARIANT_ALIASES = {"tag": "tagconv", "gat": "gatv2", "mlp": "nn"}
HEAD_INIT_SCALE = 1e-3


class NetworkConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    variant: Variant = "gcn"
    hidden: int = Field(default=64, ge=1)
    mlp_width: int = Field(default=256, ge=1)
    k_hops: int = Field(default=DEFAULT_HOPS, ge=0)
    n_layers: int = Field(default=3, ge=1)
    flat_layers: int = Field(default=3, ge=1)

    @field_validator("variant", mode="before")
    @classmethod
    def _canonical_variant(cls, value: object) -> object:
        if isinstance(value, str):
            return VARIANT_ALIASES.get(value.lower(), value.lower())
        return value


def _uniform(
    rng: np.random.Generator, fan_in: int, shape: tuple[int, ...], scale: float | None = None
) -> np.ndarray:
    bound = scale if scale is not None else 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class MLP:
    """Dense layers with ReLU between them and a linear output."""

    def __init__(
        self,
        store: ParameterStore,
        prefix: str,
        sizes: Sequence[int],
        rng: np.random.Generator,
        final_scale: float | None = None,
    ) -> None:
        self.layers: list[tuple[Parameter, Parameter]] = []
        last = len(sizes) - 2
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = final_scale if k == last else None
            w = store.create(f"{prefix}.{k}.w", _uniform(rng, fan_in, (fan_in, fan_out), scale))
            b = store.create(f"{prefix}.{k}.b", _uniform(rng, fan_in, (fan_out,), scale))
            self.layers.append((w, b))

    def __call__(self, x: Tensor) -> Tensor:
        for k, (w, b) in enumerate(self.layers):
            x = T.add(T.matmul(x, w), b)
            if k < len(self.layers) - 1:
                x = T.relu(x)
        return x

    def zero_output(self) -> None:
        w, b = self.layers[-1]
        w.value = np.zeros_like(w.value)
        b.value = np.zeros_like(b.value)


class GraphEncoder:
    """`n_layers` message-passing layers of one variant, ReLU after each."""

    def __init__(
        self,
        store: ParameterStore,
        prefix: str,
        variant: str,
        in_dim: int,
        cfg: NetworkConfig,
        rng: np.random.Generator,
    ) -> None:
        if variant not in GRAPH_VARIANTS:
            raise ValueError(f"unknown graph encoder variant {variant!r}")
        self.variant = variant
        self.k_hops = cfg.k_hops
        self.layers: list[dict[str, Any]] = []
        width = in_dim
        for layer in range(cfg.n_layers):
            name = f"{prefix}.l{layer}"
            shape = (width, cfg.hidden)
            params: dict[str, Any]
            if variant == "gcn":
                params = {"w": store.create(f"{name}.w", _uniform(rng, width, shape))}
            elif variant == "tagconv":
                fan_in = width * (cfg.k_hops + 1)
                params = {
                    "w": [
                        store.create(f"{name}.w{k}", _uniform(rng, fan_in, shape))
                        for k in range(cfg.k_hops + 1)
                    ]
                }
            else:
                params = {
                    "w_dst": store.create(f"{name}.w_dst", _uniform(rng, 2 * width, shape)),
                    "w_src": store.create(f"{name}.w_src", _uniform(rng, 2 * width, shape)),
                    "attn": store.create(
                        f"{name}.attn", _uniform(rng, cfg.hidden, (cfg.hidden, 1))
                    ),
                }
            self.layers.append(params)
            width = cfg.hidden

    def __call__(self, x: Tensor, ops: GraphOperators) -> Tensor:
        for params in self.layers:
            if self.variant == "gcn":
                x = gcn_forward(x, ops, params["w"])
            elif self.variant == "tagconv":
                x = tag_forward(x, ops, params["w"])
            else:
                x = gat_forward(x, ops, params["w_dst"], params["w_src"], params["attn"])
        return x


class Network(ABC):
    role: str = ""

    def __init__(self, variant: str, cfg: NetworkConfig) -> None:
        self.variant = variant
        self.cfg = cfg
        self.store = ParameterStore()
        self.dims: dict[str, int] = {}

    def parameters(self) -> ParameterStore:
        return self.store

    def spec(self) -> dict[str, Any]:
        """Shape manifest recorded in checkpoints."""
        return {
            "role": self.role,
            "variant": self.variant,
            "config": self.cfg.model_dump(),
            "dims": dict(self.dims),
            "shapes": {p.name: list(p.shape) for p in self.store},
        }

    def clone(self) -> Network:
        return copy.deepcopy(self)

    @abstractmethod
    def zero_output(self) -> None:
        """Zero the final linear layer(s) so every output is 0 (or tanh(0))."""


class ActorNetwork(Network):
    role = "actor"

    @abstractmethod
    def forward_batch(
        self, states: Sequence[GridState], topos: Sequence[NetworkTopology], scaling: FeatureScaling
    ) -> Tensor:
        """(batch, |B|) raw actions in [-1, 1]."""


class CriticNetwork(Network):
    role = "critic"

    @abstractmethod
    def forward_batch(
        self,
        states: Sequence[GridState],
        topos: Sequence[NetworkTopology],
        actions: Tensor,
        scaling: FeatureScaling,
    ) -> tuple[Tensor, Tensor]:
        """Twin Q estimates, each of shape (batch,)."""


class GraphActor(ActorNetwork):
    """Graph encoder, then a per-ESS-node head shared across nodes with tanh output."""

    def __init__(self, variant: str, cfg: NetworkConfig, rng: np.random.Generator) -> None:
        super().__init__(variant, cfg)
        self.encoder = GraphEncoder(self.store, "actor.enc", variant, N_FEATURES, cfg, rng)
        self.head = MLP(
            self.store,
            "actor.head",
            [cfg.hidden, cfg.mlp_width, cfg.mlp_width, 1],
            rng,
            final_scale=HEAD_INIT_SCALE,
        )

    def zero_output(self) -> None:
        self.head.zero_output()

    def act(self, x: Tensor, ops: GraphOperators) -> Tensor:
        h = ess_embeddings(self.encoder(x, ops), ops)
        out = T.tanh(self.head(h))
        return T.reshape(out, out.shape[:-1])

    def forward_batch(
        self, states: Sequence[GridState], topos: Sequence[NetworkTopology], scaling: FeatureScaling
    ) -> Tensor:
        x = T.constant(batch_features(states, topos, scaling))
        return self.act(x, batch_operators(topos, self.cfg.k_hops))


class GraphCritic(CriticNetwork):
    """Two independent branches: encoder over features + action channel, mean pool, MLP."""

    def __init__(self, variant: str, cfg: NetworkConfig, rng: np.random.Generator) -> None:
        super().__init__(variant, cfg)
        self.encoders: list[GraphEncoder] = []
        self.heads: list[MLP] = []
        for m in (1, 2):
            self.encoders.append(
                GraphEncoder(self.store, f"q{m}.enc", variant, N_FEATURES + 1, cfg, rng)
            )
            self.heads.append(
                MLP(self.store, f"q{m}.head", [cfg.hidden, cfg.mlp_width, cfg.mlp_width, 1], rng)
            )

    def evaluate(self, x: Tensor, ops: GraphOperators, actions: Tensor) -> tuple[Tensor, Tensor]:
        xa = T.concat([x, action_channel(actions, ops)], axis=-1)
        q = []
        for enc, head in zip(self.encoders, self.heads):
            pooled = mean_pool(enc(xa, ops))
            out = head(pooled)
            q.append(T.reshape(out, out.shape[:-1]))
        return q[0], q[1]

    def forward_batch(
        self,
        states: Sequence[GridState],
        topos: Sequence[NetworkTopology],
        actions: Tensor,
        scaling: FeatureScaling,
    ) -> tuple[Tensor, Tensor]:
        x = T.constant(batch_features(states, topos, scaling))
        return self.evaluate(x, batch_operators(topos, self.cfg.k_hops), actions)

    def zero_output(self) -> None:
        for head in self.heads:
            head.zero_output()


def _flat_batch(
    states: Sequence[GridState], topos: Sequence[NetworkTopology], scaling: FeatureScaling
) -> np.ndarray:
    return np.stack([flat_state(s, t, scaling) for s, t in zip(states, topos)])


class FlatActor(ActorNetwork):
    """MLP over the flat state vector; input width is tied to one bus set."""

    def __init__(
        self, n_state: int, n_action: int, cfg: NetworkConfig, rng: np.random.Generator
    ) -> None:
        super().__init__("nn", cfg)
        self.dims = {"state": n_state, "action": n_action}
        sizes = [n_state, *([cfg.mlp_width] * cfg.flat_layers), n_action]
        self.mlp = MLP(self.store, "actor.mlp", sizes, rng, final_scale=HEAD_INIT_SCALE)

    def zero_output(self) -> None:
        self.mlp.zero_output()

    def act(self, x: np.ndarray) -> Tensor:
        if x.shape[-1] != self.dims["state"]:
            raise DimensionMismatchError(
                f"flat actor expects {self.dims['state']} state entries, got {x.shape[-1]}"
            )
        return T.tanh(self.mlp(T.constant(x)))

    def forward_batch(
        self, states: Sequence[GridState], topos: Sequence[NetworkTopology], scaling: FeatureScaling
    ) -> Tensor:
        return self.act(_flat_batch(states, topos, scaling))


class FlatCritic(CriticNetwork):
    def __init__(
        self, n_state: int, n_action: int, cfg: NetworkConfig, rng: np.random.Generator
    ) -> None:
        super().__init__("nn", cfg)
        self.dims = {"state": n_state, "action": n_action}
        sizes = [n_state + n_action, *([cfg.mlp_width] * cfg.flat_layers), 1]
        self.q = [MLP(self.store, f"q{m}.mlp", sizes, rng) for m in (1, 2)]

    def evaluate(self, x: np.ndarray, actions: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.dims["state"] or actions.shape[-1] != self.dims["action"]:
            raise DimensionMismatchError(
                f"flat critic expects ({self.dims['state']}, {self.dims['action']}) inputs, "
                f"got ({x.shape[-1]}, {actions.shape[-1]})"
            )
        xa = T.concat([T.constant(x), actions], axis=-1)
        outs = [mlp(xa) for mlp in self.q]
        return T.reshape(outs[0], outs[0].shape[:-1]), T.reshape(outs[1], outs[1].shape[:-1])

    def forward_batch(
        self,
        states: Sequence[GridState],
        topos: Sequence[NetworkTopology],
        actions: Tensor,
        scaling: FeatureScaling,
    ) -> tuple[Tensor, Tensor]:
        return self.evaluate(_flat_batch(states, topos, scaling), actions)

    def zero_output(self) -> None:
        for mlp in self.q:
            mlp.zero_output()


def flat_state_dim(topo: NetworkTopology) -> int:
    return 2 + topo.n_buses + 2 * topo.n_ess


def build_actor(
    cfg: NetworkConfig, topo: NetworkTopology, rng: np.random.Generator
) -> ActorNetwork:
    if cfg.variant == "nn":
        return FlatActor(flat_state_dim(topo), topo.n_ess, cfg, rng)
    return GraphActor(cfg.variant, cfg, rng)


def build_critic(
    cfg: NetworkConfig, topo: NetworkTopology, rng: np.random.Generator
) -> CriticNetwork:
    if cfg.variant == "nn":
        return FlatCritic(flat_state_dim(topo), topo.n_ess, cfg, rng)
    return GraphCritic(cfg.variant, cfg, rng)


def network_from_spec(spec: dict[str, Any]) -> Network:
    """Rebuild an (uninitialized-value) network with the shapes of `spec`."""
    cfg = NetworkConfig(**spec["config"])
    rng = np.random.default_rng(0)
    dims = spec.get("dims") or {}
    net: Network
    if spec["role"] == "actor":
        net = (
            FlatActor(dims["state"], dims["action"], cfg, rng)
            if cfg.variant == "nn"
            else GraphActor(cfg.variant, cfg, rng)
        )
    else:
        net = (
            FlatCritic(dims["state"], dims["action"], cfg, rng)
            if cfg.variant == "nn"
            else GraphCritic(cfg.variant, cfg, rng)
        )
    return net


def actor_forward(
    state: GridState,
    topo: NetworkTopology,
    actor: ActorNetwork,
    scaling: FeatureScaling | None = None,
) -> np.ndarray:
    """Deterministic raw actions in [-1, 1], ordered by ascending ESS node id."""
    scaling = scaling or FeatureScaling(base_mva=topo.limits.base_mva)
    return actor.forward_batch([state], [topo], scaling).value[0].copy()


def critic_forward(
    state: GridState,
    topo: NetworkTopology,
    action: np.ndarray | Sequence[float],
    critic: CriticNetwork,
    scaling: FeatureScaling | None = None,
) -> tuple[float, float]:
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if len(a) != topo.n_ess:
        raise DimensionMismatchError(f"{len(a)} action entries for {topo.n_ess} ESS nodes")
    scaling = scaling or FeatureScaling(base_mva=topo.limits.base_mva)
    q1, q2 = critic.forward_batch([state], [topo], T.constant(a[None, :]), scaling)
    return float(q1.value[0]), float(q2.value[0])


def nn_actor_forward(state_vec: np.ndarray, actor: FlatActor) -> np.ndarray:
    return actor.act(np.asarray(state_vec, dtype=np.float64)[None, :]).value[0].copy()


def nn_critic_forward(
    state_vec: np.ndarray, action: np.ndarray, critic: FlatCritic
) -> tuple[float, float]:
    x = np.asarray(state_vec, dtype=np.float64)[None, :]
    a = T.constant(np.asarray(action, dtype=np.float64).reshape(1, -1))
    q1, q2 = critic.evaluate(x, a)
    return float(q1.value[0]), float(q2.value[0])
