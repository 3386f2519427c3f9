import os
import sys

ROOT = os.path.dirname(os.path.dirname(__file__))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

import numpy as np
import pytest

from topodispatch.config import (
    ExperimentConfig,
    ProfileSource,
    config_hash,
    load_config,
    network_exists,
    validate_config,
)
from topodispatch.errors import ConfigError
from topodispatch.netmodel import load_network


def test_defaults():
    cfg = validate_config(None)
    assert cfg.network == "feeder34"
    assert cfg.resolved_variant == "gcn"
    assert cfg.seeds == [0]
    assert cfg.reward.phi1 == 200.0
    assert cfg.oracle.terminal_soc == "free"
    assert cfg.horizon == cfg.profiles.horizon


def test_variant_alias_and_seed_override():
    cfg = validate_config({"variant": "GAT", "td3": {"network": {"hidden": 8}}})
    assert cfg.resolved_variant == "gatv2"
    td3 = cfg.td3_for_seed(11)
    assert td3.seed == 11
    assert td3.network.variant == "gatv2"
    assert td3.network.hidden == 8


def test_errors_name_the_field():
    with pytest.raises(ConfigError, match="td3.gamma"):
        validate_config({"td3": {"gamma": 2.0}})
    with pytest.raises(ConfigError, match="unknown_key"):
        validate_config({"unknown_key": 1})
    with pytest.raises(ConfigError):
        validate_config({"variant": "gin"})
    with pytest.raises(ConfigError):
        validate_config(["not", "a", "mapping"])
    with pytest.raises(ConfigError):
        validate_config({"reward": {"divergence_penalty": 5.0}})


def test_load_config_from_yaml(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(
        "name: small\n"
        "profiles: {kind: flat, horizon: 4, n_days: 2, flat_price: 0.2}\n"
        "evaluation: {days: [0, 1], oracle: false}\n"
        "seeds: [1, 2]\n"
    )
    cfg = load_config(path)
    assert cfg.name == "small"
    assert cfg.seeds == [1, 2]
    profiles = cfg.profiles.load(cfg.load_network())
    assert len(profiles) == 2
    assert np.all(profiles.day(1).price == 0.2)


def test_load_config_reports_path(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
    broken = tmp_path / "broken.yaml"
    broken.write_text("name: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(broken)
    invalid = tmp_path / "invalid.yaml"
    invalid.write_text("seeds: []\n")
    with pytest.raises(ConfigError) as info:
        load_config(invalid)
    assert any(str(invalid) in note for note in info.value.__notes__)


def test_csv_profiles_need_a_path():
    topo = load_network("feeder34")
    source = ProfileSource(kind="csv", path="  ")
    assert source.path is None
    with pytest.raises(ConfigError):
        source.load(topo)


def test_hash_is_stable_and_sensitive():
    a = validate_config({"name": "x"})
    b = ExperimentConfig.model_validate({"name": "x"})
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 64
    assert config_hash(a) != config_hash(a.with_overrides(seeds=[3]))


def test_overrides_skip_none():
    cfg = validate_config({"output_dir": "elsewhere"})
    same = cfg.with_overrides(output_dir=None, variant=None)
    assert same == cfg
    with pytest.raises(ConfigError):
        cfg.with_overrides(seeds=[])


def test_network_exists():
    assert network_exists("feeder69")
    assert not network_exists("feeder9999")
