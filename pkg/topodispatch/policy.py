from __future__ import annotations

import logging
import re
from collections.abc import Iterable
from dataclasses import dataclass
from typing import Any

import numpy as np

from .env import GridState, Policy, zero_policy
from .netmodel import NetworkTopology

logger = logging.getLogger(__name__)


@dataclass
class LoadedPolicy:
    """A policy plus the metadata needed for lookup and report attribution."""

    name: str
    policy: Policy
    source: str
    variant: str
    topology_id: str = ""
    # The TD3 agent behind a checkpoint policy, when there is one
    agent: Any | None = None


def random_policy(seed: int = 0) -> Policy:
    """Uniform raw actions from a private generator; a degradation floor for reports."""
    rng = np.random.default_rng(seed)

    def policy(state: GridState, topo: NetworkTopology) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=topo.n_ess)

    return policy


def builtin_policy(name: str) -> LoadedPolicy | None:
    if name in ("zero", "no_control"):
        return LoadedPolicy(name="zero", policy=zero_policy, source="builtin", variant="zero")
    match = re.fullmatch(r"random(?::(\d+))?", name)
    if match:
        seed = int(match.group(1) or 0)
        return LoadedPolicy(
            name=f"random_{seed}", policy=random_policy(seed), source="builtin", variant="random"
        )
    return None


class PolicyHub:
    """Named policies from checkpoints and built-ins, looked up by name."""

    def __init__(self) -> None:
        self._policies: dict[str, LoadedPolicy] = {}

    def __len__(self) -> int:
        return len(self._policies)

    def __contains__(self, name: object) -> bool:
        return name in self._policies

    def add_loaded_policies(self, items: Iterable[LoadedPolicy]) -> list[str]:
        """Register policies; a name already taken gets a numeric suffix."""
        added = []
        for lp in items:
            name = lp.name
            if name in self._policies:
                base = name
                idx = 2
                while name in self._policies:
                    name = f"{base}_{idx}"
                    idx += 1
                lp.name = name
            self._policies[name] = lp
            added.append(name)
            logger.debug("registered policy %s (%s from %s)", name, lp.variant, lp.source)
        return added

    def names(self) -> list[str]:
        return list(self._policies)

    def get(self, name: str) -> LoadedPolicy:
        try:
            return self._policies[name]
        except KeyError:
            raise KeyError(f"no policy named {name!r}; known: {', '.join(self._policies)}") from None

    def all_policies(self) -> list[LoadedPolicy]:
        return list(self._policies.values())

    def as_mapping(self) -> dict[str, Policy]:
        return {name: lp.policy for name, lp in self._policies.items()}

