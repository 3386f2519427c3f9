import os
import sys

ROOT = os.path.dirname(os.path.dirname(__file__))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

import numpy as np
import pytest

import topodispatch.builder as builder
from topodispatch.env import FeatureScaling, reset
from topodispatch.errors import CheckpointError
from topodispatch.networks import NetworkConfig
from topodispatch.oracle import tiny_instance
from topodispatch.td3 import MANIFEST_FILE, TD3Agent, TD3Config


def _saved_agent(tmp_path, variant: str = "tagconv"):
    topo, day = tiny_instance((0.1, 0.5))
    cfg = TD3Config(network=NetworkConfig(variant=variant, hidden=4, mlp_width=6))
    agent = TD3Agent(cfg, topo, FeatureScaling(price_scale=0.5, horizon=2))
    path = agent.save(tmp_path / "exp" / "seed_3" / "checkpoints" / "final")
    return agent, path, topo, day


def test_builtin_sources():
    lp = builder.build_policy("random:2", name="noise")
    assert lp.name == "noise"
    assert lp.source == "builtin"
    with pytest.raises(CheckpointError):
        builder.build_policy("no/such/dir")


def test_checkpoint_source_named_after_seed(tmp_path):
    agent, path, topo, day = _saved_agent(tmp_path)
    lp = builder.build_policy(str(path))
    assert lp.name == "tagconv_seed_3"
    assert lp.variant == "tagconv"
    assert lp.topology_id == "tiny3"
    state = reset(topo, day, horizon=2)
    assert np.array_equal(lp.policy(state, topo), agent.as_policy()(state, topo))
    with pytest.raises(CheckpointError):
        builder.build_policy(str(path), variant="gcn")


def test_hub_puts_baseline_first(tmp_path):
    _, path, _, _ = _saved_agent(tmp_path)
    hub = builder.build_policy_hub([str(path), "zero", "random:1", str(path)])
    assert hub.names() == ["zero", "tagconv_seed_3", "random_1", "tagconv_seed_3_2"]
    bare = builder.build_policy_hub(["random"], include_baseline=False)
    assert bare.names() == ["random_0"]


def test_hub_routes_checkpoints_through_loader(monkeypatch, tmp_path):
    seen = []
    (tmp_path / MANIFEST_FILE).write_text("{}")

    class _FakeAgent:
        variant = "gcn"
        topology_id = "feeder34"

        def as_policy(self):
            return lambda state, topo: np.zeros(topo.n_ess)

    def fake_load(source, *, variant=None, topologies=None):
        seen.append((source, variant))
        return _FakeAgent()

    monkeypatch.setattr(builder, "load_checkpoint", fake_load)
    hub = builder.build_policy_hub([str(tmp_path)], variant="gcn")
    assert seen == [(str(tmp_path), "gcn")]
    assert hub.get("gcn").topology_id == "feeder34"
