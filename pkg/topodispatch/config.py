"""Experiment configuration: one YAML file fully specifies a run."""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .env import RewardConfig
from .errors import ConfigError
from .netmodel import NetworkTopology, load_network, resolve_network_path
from .networks import VARIANT_ALIASES, NetworkConfig, Variant
from .oracle import OracleConfig
from .profiles import (
    DEFAULT_DT_HOURS,
    DEFAULT_HORIZON,
    ProfileSet,
    flat_price_profiles,
    load_profiles_csv,
    synthetic_profiles,
)
from .td3 import TD3Config

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ProfileSource(_Section):
    kind: Literal["synthetic", "csv", "flat"] = "synthetic"
    seed: int = 0
    n_days: int = Field(default=30, ge=1)
    path: str | None = None
    horizon: int = Field(default=DEFAULT_HORIZON, ge=1)
    dt_hours: float = Field(default=DEFAULT_DT_HOURS, gt=0.0)
    flat_price: float = Field(default=0.1, ge=0.0)

    @field_validator("path")
    @classmethod
    def _strip(cls, value: str | None) -> str | None:
        return value.strip() or None if value is not None else None

    def load(self, topo: NetworkTopology) -> ProfileSet:
        if self.kind == "csv":
            if self.path is None:
                raise ConfigError("profiles.path: required when profiles.kind is 'csv'")
            return load_profiles_csv(self.path, topo, dt_hours=self.dt_hours)
        if self.kind == "flat":
            return flat_price_profiles(
                topo,
                price=self.flat_price,
                horizon=self.horizon,
                dt_hours=self.dt_hours,
                n_days=self.n_days,
            )
        return synthetic_profiles(
            topo, self.n_days, self.seed, horizon=self.horizon, dt_hours=self.dt_hours
        )


class EvaluationConfig(_Section):
    days: list[int] = Field(default_factory=lambda: list(range(5)))
    oracle: bool = True
    reconfigurations: str | None = None
    transfer_network: str | None = None
    transfer_reconfigurations: str | None = None


class ExperimentConfig(_Section):
    name: str = "experiment"
    network: str = "feeder34"
    profiles: ProfileSource = ProfileSource()
    variant: Variant | None = None
    td3: TD3Config = TD3Config()
    reward: RewardConfig = RewardConfig()
    oracle: OracleConfig = OracleConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: str = "runs"

    @field_validator("variant", mode="before")
    @classmethod
    def _canonical_variant(cls, value: object) -> object:
        if isinstance(value, str):
            return VARIANT_ALIASES.get(value.lower(), value.lower())
        return value

    @property
    def resolved_variant(self) -> str:
        return self.variant or self.td3.network.variant

    def td3_for_seed(self, seed: int) -> TD3Config:
        network = NetworkConfig.model_validate(
            {**self.td3.network.model_dump(), "variant": self.resolved_variant}
        )
        return TD3Config.model_validate(
            {**self.td3.model_dump(), "seed": seed, "network": network.model_dump()}
        )

    def with_overrides(self, **updates: Any) -> ExperimentConfig:
        """Re-validated copy with top-level fields replaced (None values are ignored)."""
        data = self.model_dump()
        data.update({k: v for k, v in updates.items() if v is not None})
        return validate_config(data)

    def load_network(self) -> NetworkTopology:
        return load_network(self.network)

    @property
    def horizon(self) -> int:
        return self.profiles.horizon


def _field_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def validate_config(data: Any) -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_field_errors(exc)}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    src = Path(path)
    try:
        raw = yaml.safe_load(src.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {src}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{src}: not valid YAML ({exc})") from exc
    try:
        cfg = validate_config(raw)
    except ConfigError as exc:
        exc.add_note(f"in {src}")
        raise
    logger.debug("loaded config %s from %s", cfg.name, src)
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form of the config."""
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def network_exists(name_or_path: str) -> bool:
    return resolve_network_path(name_or_path).exists()
