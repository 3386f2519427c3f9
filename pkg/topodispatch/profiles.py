from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ProfileError
from .netmodel import NetworkTopology

logger = logging.getLogger(__name__)

DEFAULT_DT_HOURS = 0.25
DEFAULT_HORIZON = 96
# tan(acos(0.95)) for loads without a reactive series
REACTIVE_RATIO_PF095 = math.tan(math.acos(0.95))


@dataclass(frozen=True)
class ExogenousProfiles:
    """One day of exogenous inputs; node axes follow bus positions (bus k -> column k-1)."""

    price: np.ndarray
    demand_kw: np.ndarray
    pv_kw: np.ndarray
    reactive_kw: np.ndarray | None = None
    dt_hours: float = DEFAULT_DT_HOURS

    def __post_init__(self) -> None:
        horizon = len(self.price)
        if horizon == 0:
            raise ProfileError("profiles must contain at least one step")
        for name in ("demand_kw", "pv_kw", "reactive_kw"):
            arr = getattr(self, name)
            if arr is None:
                continue
            if arr.ndim != 2 or arr.shape[0] != horizon:
                raise ProfileError(
                    f"{name} has shape {arr.shape}; expected ({horizon}, n_buses)"
                )
        if self.pv_kw.shape != self.demand_kw.shape:
            raise ProfileError("pv_kw and demand_kw must have the same shape")
        if np.any(self.demand_kw < 0) or np.any(self.pv_kw < 0):
            raise ProfileError("demand and pv series must be non-negative")
        if self.dt_hours <= 0:
            raise ProfileError("dt_hours must be positive")

    @property
    def horizon(self) -> int:
        return len(self.price)

    @property
    def n_buses(self) -> int:
        return int(self.demand_kw.shape[1])

    def reactive(self) -> np.ndarray:
        if self.reactive_kw is not None:
            return self.reactive_kw
        return self.demand_kw * REACTIVE_RATIO_PF095

    def check_against(self, topo: NetworkTopology, horizon: int | None = None) -> None:
        if self.n_buses != topo.n_buses:
            raise ProfileError(
                f"profiles cover {self.n_buses} buses, topology {topo.name} has {topo.n_buses}"
            )
        if horizon is not None and self.horizon != horizon:
            raise ProfileError(f"profiles have {self.horizon} steps, expected {horizon}")


@dataclass(frozen=True)
class ProfileSet:
    """Indexed days of profiles; episodes address days by index."""

    days: tuple[ExogenousProfiles, ...]

    def __len__(self) -> int:
        return len(self.days)

    def day(self, index: int) -> ExogenousProfiles:
        if not self.days:
            raise ProfileError("profile set is empty")
        return self.days[index % len(self.days)]

    @property
    def price_scale(self) -> float:
        return float(max(np.max(d.price) for d in self.days)) or 1.0


def _bump(hours: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-(((hours - center) / width) ** 2))


def price_curve(hours: np.ndarray) -> np.ndarray:
    """Daily $/kWh shape with a morning and a larger evening peak."""
    return (
        0.08
        + 0.10 * _bump(hours, 8.0, 1.5)
        + 0.16 * _bump(hours, 19.0, 2.0)
        - 0.03 * _bump(hours, 13.0, 2.0)
    )


def load_shape(hours: np.ndarray) -> np.ndarray:
    shape = 0.5 + 0.2 * _bump(hours, 8.5, 2.0) + 0.45 * _bump(hours, 19.5, 2.5) - 0.1 * _bump(
        hours, 3.5, 2.5
    )
    return shape / shape.max()


def pv_shape(hours: np.ndarray) -> np.ndarray:
    bell = _bump(hours, 12.5, 2.8)
    bell[(hours < 6.0) | (hours > 19.0)] = 0.0
    return bell


def synthetic_profiles(
    topo: NetworkTopology,
    n_days: int,
    seed: int,
    *,
    horizon: int = DEFAULT_HORIZON,
    dt_hours: float = DEFAULT_DT_HOURS,
    load_noise: float = 0.05,
    price_noise: float = 0.05,
) -> ProfileSet:
    """Price, load and PV days generated from the feeder's nominal tables."""
    rng = np.random.default_rng(seed)
    hours = (np.arange(horizon) + 0.5) * dt_hours
    n = topo.n_buses
    nominal_p = np.zeros(n)
    nominal_q = np.zeros(n)
    for ld in topo.loads:
        nominal_p[topo.bus_position(ld.node)] = ld.p_kw
        nominal_q[topo.bus_position(ld.node)] = ld.q_kvar
    pv_cap = np.zeros(n)
    for p in topo.pv:
        pv_cap[topo.bus_position(p.node)] = p.capacity_kw

    base_price = price_curve(hours)
    base_load = load_shape(hours)
    base_pv = pv_shape(hours)
    days = []
    for _ in range(n_days):
        price = base_price * rng.normal(1.0, price_noise) + rng.normal(0.0, 0.005, horizon)
        price = np.clip(price, 0.01, None)
        day_scale = rng.normal(1.0, load_noise)
        step_noise = rng.normal(1.0, load_noise, size=(horizon, n))
        load_factor = np.clip(base_load[:, None] * day_scale * step_noise, 0.0, None)
        demand = load_factor * nominal_p[None, :]
        reactive = load_factor * nominal_q[None, :]
        clouds = rng.uniform(0.6, 1.0)
        pv_noise = np.clip(rng.normal(1.0, 0.05, size=(horizon, n)), 0.0, None)
        pv = base_pv[:, None] * clouds * pv_noise * pv_cap[None, :]
        days.append(
            ExogenousProfiles(
                price=price,
                demand_kw=demand,
                pv_kw=pv,
                reactive_kw=reactive,
                dt_hours=dt_hours,
            )
        )
    logger.debug("generated %d synthetic days for %s (seed %d)", n_days, topo.name, seed)
    return ProfileSet(days=tuple(days))


def flat_price_profiles(
    topo: NetworkTopology,
    *,
    price: float = 0.1,
    horizon: int = DEFAULT_HORIZON,
    dt_hours: float = DEFAULT_DT_HOURS,
    load_scale: float = 1.0,
    n_days: int = 1,
) -> ProfileSet:
    """Constant price and constant nominal load; no arbitrage opportunity exists."""
    n = topo.n_buses
    demand = np.zeros((horizon, n))
    reactive = np.zeros((horizon, n))
    for ld in topo.loads:
        demand[:, topo.bus_position(ld.node)] = load_scale * ld.p_kw
        reactive[:, topo.bus_position(ld.node)] = load_scale * ld.q_kvar
    day = ExogenousProfiles(
        price=np.full(horizon, float(price)),
        demand_kw=demand,
        pv_kw=np.zeros((horizon, n)),
        reactive_kw=reactive,
        dt_hours=dt_hours,
    )
    return ProfileSet(days=(day,) * n_days)


def _columns(n: int, prefix: str) -> list[str]:
    return [f"{prefix}_{bus}" for bus in range(1, n + 1)]


def profiles_frame(profiles: ProfileSet) -> pd.DataFrame:
    frames = []
    for k, day in enumerate(profiles.days):
        n = day.n_buses
        data: dict[str, np.ndarray] = {
            "day": np.full(day.horizon, k),
            "step": np.arange(day.horizon),
            "price": day.price,
        }
        frame = pd.DataFrame(data)
        parts = [
            frame,
            pd.DataFrame(day.demand_kw, columns=_columns(n, "demand")),
            pd.DataFrame(day.pv_kw, columns=_columns(n, "pv")),
        ]
        if day.reactive_kw is not None:
            parts.append(pd.DataFrame(day.reactive_kw, columns=_columns(n, "reactive")))
        frames.append(pd.concat(parts, axis=1))
    return pd.concat(frames, ignore_index=True)


def save_profiles_csv(profiles: ProfileSet, path: str | Path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    profiles_frame(profiles).to_csv(out, index=False, float_format="%.10g")
    return out


def _day_from_frame(frame: pd.DataFrame, n: int, dt_hours: float, source: str) -> ExogenousProfiles:
    frame = frame.sort_values("step")
    steps = frame["step"].to_numpy()
    if not np.array_equal(steps, np.arange(len(steps))):
        raise ProfileError(f"{source}: steps must run 0..{len(steps) - 1} without gaps")
    reactive_cols = _columns(n, "reactive")
    reactive = None
    if all(c in frame.columns for c in reactive_cols):
        reactive = frame[reactive_cols].to_numpy(dtype=np.float64)
    return ExogenousProfiles(
        price=frame["price"].to_numpy(dtype=np.float64),
        demand_kw=frame[_columns(n, "demand")].to_numpy(dtype=np.float64),
        pv_kw=frame[_columns(n, "pv")].to_numpy(dtype=np.float64),
        reactive_kw=reactive,
        dt_hours=dt_hours,
    )


def load_profiles_csv(
    path: str | Path, topo: NetworkTopology, *, dt_hours: float = DEFAULT_DT_HOURS
) -> ProfileSet:
    """Read one long CSV with a `day` column, or a directory of one-day CSV files."""
    src = Path(path)
    files: Sequence[Path] = sorted(src.glob("*.csv")) if src.is_dir() else [src]
    if not files:
        raise ProfileError(f"no profile CSV files under {src}")
    n = topo.n_buses
    required = {"step", "price", *_columns(n, "demand"), *_columns(n, "pv")}
    days: list[ExogenousProfiles] = []
    for file in files:
        try:
            frame = pd.read_csv(file)
        except (OSError, pd.errors.ParserError) as exc:
            raise ProfileError(f"{file}: {exc}") from exc
        missing = sorted(required - set(frame.columns))
        if missing:
            raise ProfileError(f"{file}: missing columns {missing[:5]}")
        if "day" in frame.columns:
            for _day, part in frame.groupby("day", sort=True):
                days.append(_day_from_frame(part, n, dt_hours, str(file)))
        else:
            days.append(_day_from_frame(frame, n, dt_hours, str(file)))
    logger.info("loaded %d profile days from %s", len(days), src)
    return ProfileSet(days=tuple(days))
