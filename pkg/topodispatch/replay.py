from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .env import GridState
from .errors import CheckpointError, DimensionMismatchError
from .netmodel import NetworkTopology

logger = logging.getLogger(__name__)

DEFAULT_CAPACITY = 1_000_000
CHUNK = 4096


@dataclass(frozen=True)
class Transition:
    state: GridState
    action: np.ndarray
    reward: float
    next_state: GridState
    done: bool
    topology_id: str


@dataclass(frozen=True)
class TransitionBatch:
    states: list[GridState]
    actions: np.ndarray
    rewards: np.ndarray
    next_states: list[GridState]
    dones: np.ndarray
    topologies: list[NetworkTopology]

    def __len__(self) -> int:
        return len(self.states)


_STATE_FIELDS = ("t", "price", "demand", "soc", "v")


class ReplayBuffer:
    """FIFO ring of raw transitions, stored column-wise.

    Storage grows in chunks up to `capacity`; graph features are rebuilt from
    the stored states at sample time, so one buffer can hold transitions from
    several topologies of the same bus set.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY) -> None:
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self.size = 0
        self.position = 0
        self.topologies: dict[str, NetworkTopology] = {}
        self._topology_ids: list[str] = []
        self._data: dict[str, np.ndarray] = {}
        self._n_buses = 0
        self._n_ess = 0

    def __len__(self) -> int:
        return self.size

    @property
    def allocated(self) -> int:
        return len(self._data["reward"]) if self._data else 0

    def _allocate(self, n_buses: int, n_ess: int, rows: int) -> None:
        self._n_buses, self._n_ess = n_buses, n_ess
        widths = {"demand": n_buses, "soc": n_ess, "v": n_ess}
        data: dict[str, np.ndarray] = {}
        for prefix in ("s", "s2"):
            data[f"{prefix}.t"] = np.zeros(rows)
            data[f"{prefix}.price"] = np.zeros(rows)
            for name, width in widths.items():
                data[f"{prefix}.{name}"] = np.zeros((rows, width))
        data["action"] = np.zeros((rows, n_ess))
        data["reward"] = np.zeros(rows)
        data["done"] = np.zeros(rows)
        data["topology"] = np.zeros(rows)
        self._data = data

    def _grow(self) -> None:
        rows = min(self.capacity, max(CHUNK, 2 * self.allocated))
        for key, arr in self._data.items():
            grown = np.zeros((rows,) + arr.shape[1:])
            grown[: len(arr)] = arr
            self._data[key] = grown

    def register(self, topo: NetworkTopology) -> int:
        if topo.topology_id not in self.topologies:
            self.topologies[topo.topology_id] = topo
            self._topology_ids.append(topo.topology_id)
        return self._topology_ids.index(topo.topology_id)

    def add(self, tr: Transition, topo: NetworkTopology) -> None:
        if not self._data:
            self._allocate(len(tr.state.demand_kw), len(tr.action), min(CHUNK, self.capacity))
        if len(tr.state.demand_kw) != self._n_buses or len(tr.action) != self._n_ess:
            raise DimensionMismatchError(
                "replay buffer holds one bus set; transition dimensions differ"
            )
        if np.any(np.abs(tr.action) > 1.0):
            raise ValueError("replay actions must lie in [-1, 1]")
        if self.position >= self.allocated:
            self._grow()
        k = self.position
        d = self._data
        for prefix, st in (("s", tr.state), ("s2", tr.next_state)):
            d[f"{prefix}.t"][k] = st.t
            d[f"{prefix}.price"][k] = st.price
            d[f"{prefix}.demand"][k] = st.demand_kw
            d[f"{prefix}.soc"][k] = st.soc
            d[f"{prefix}.v"][k] = st.v_ess_pu
        d["action"][k] = tr.action
        d["reward"][k] = tr.reward
        d["done"][k] = float(tr.done)
        d["topology"][k] = self.register(topo)
        self.position = (self.position + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _state(self, prefix: str, k: int) -> GridState:
        d = self._data
        return GridState(
            t=int(d[f"{prefix}.t"][k]),
            price=float(d[f"{prefix}.price"][k]),
            demand_kw=d[f"{prefix}.demand"][k].copy(),
            soc=d[f"{prefix}.soc"][k].copy(),
            v_ess_pu=d[f"{prefix}.v"][k].copy(),
        )

    def sample(self, batch: int, rng: np.random.Generator) -> TransitionBatch:
        """Uniform sample, without replacement within the batch."""
        if batch > self.size:
            raise ValueError(f"cannot sample {batch} transitions from {self.size}")
        idx = rng.choice(self.size, size=batch, replace=False)
        d = self._data
        return TransitionBatch(
            states=[self._state("s", k) for k in idx],
            actions=d["action"][idx].copy(),
            rewards=d["reward"][idx].copy(),
            next_states=[self._state("s2", k) for k in idx],
            dones=d["done"][idx].copy(),
            topologies=[self.topologies[self._topology_ids[int(d["topology"][k])]] for k in idx],
        )

    def oldest(self) -> int:
        """Storage row of the oldest retained transition."""
        return self.position if self.size == self.capacity else 0

    def rewards(self) -> np.ndarray:
        """Retained rewards, oldest first."""
        if not self._data:
            return np.zeros(0)
        order = (np.arange(self.size) + self.oldest()) % self.capacity
        return self._data["reward"][order].copy()

    # Checkpoint support

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {key: arr[: self.size].copy() for key, arr in self._data.items()}
        out["meta"] = np.array(
            [self.capacity, self.size, self.position, self._n_buses, self._n_ess], dtype=np.float64
        )
        return out

    def topology_ids(self) -> list[str]:
        return list(self._topology_ids)

    @classmethod
    def from_arrays(
        cls,
        arrays: Mapping[str, np.ndarray],
        topology_ids: list[str],
        topologies: Mapping[str, NetworkTopology],
    ) -> ReplayBuffer:
        capacity, size, position, n_buses, n_ess = (int(v) for v in arrays["meta"])
        buf = cls(capacity)
        for tid in topology_ids:
            if tid not in topologies:
                raise CheckpointError(f"replay references unknown topology {tid!r}")
            buf.register(topologies[tid])
        if size:
            buf._allocate(n_buses, n_ess, max(size, min(CHUNK, capacity)))
            for key in buf._data:
                buf._data[key][:size] = arrays[key]
        buf.size = size
        buf.position = position
        return buf
