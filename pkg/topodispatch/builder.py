from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from pathlib import Path

# Load environment variables from .env early
try:
    from dotenv import load_dotenv  # type: ignore

    load_dotenv()
except Exception:  # pragma: no cover
    pass

from .errors import CheckpointError
from .netmodel import NetworkTopology
from .policy import LoadedPolicy, PolicyHub, builtin_policy
from .td3 import MANIFEST_FILE, load_checkpoint


def _is_checkpoint(value: str) -> bool:
    return (Path(value) / MANIFEST_FILE).is_file()


def _checkpoint_name(path: Path, variant: str) -> str:
    # runs/<exp>/seed_0/checkpoints/final -> <variant>_seed_0
    parts = [p for p in path.parts if p.startswith("seed_")]
    return f"{variant}_{parts[-1]}" if parts else variant


def build_policy(
    source: str,
    *,
    variant: str | None = None,
    topologies: Mapping[str, NetworkTopology] | None = None,
    name: str | None = None,
) -> LoadedPolicy:
    """Resolve one policy source.

    source may be:
      - "zero" (no-control baseline)
      - "random" or "random:<seed>"
      - a checkpoint directory written by training
    """
    builtin = builtin_policy(source)
    if builtin is not None:
        if name:
            builtin.name = name
        return builtin
    if not _is_checkpoint(source):
        raise CheckpointError(f"{source!r} is neither a built-in policy nor a checkpoint directory")
    agent = load_checkpoint(source, variant=variant, topologies=topologies)
    path = Path(source)
    return LoadedPolicy(
        name=name or _checkpoint_name(path, agent.variant),
        policy=agent.as_policy(),
        source=str(path),
        variant=agent.variant,
        topology_id=agent.topology_id,
        agent=agent,
    )


def build_policy_hub(
    sources: Sequence[str],
    *,
    include_baseline: bool = True,
    variant: str | None = None,
) -> PolicyHub:
    """Build a PolicyHub from a list of sources; the no-control baseline is always first."""
    hub = PolicyHub()
    if include_baseline:
        baseline = builtin_policy("zero")
        assert baseline is not None
        hub.add_loaded_policies([baseline])
    loaded = []
    for src in sources:
        if include_baseline and src in ("zero", "no_control"):
            continue
        loaded.append(build_policy(src, variant=variant))
    hub.add_loaded_policies(loaded)
    logging.getLogger(__name__).info("policy hub: %s", ", ".join(hub.names()))
    return hub
