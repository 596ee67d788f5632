"""Single-zone heat-pump space-heating MDP.

First-order lumped RC zone (one capacitance, one conductance to outdoors)
driven by a modulating heat pump with a fixed COP. The reward trades off
thermal discomfort against electricity cost with a weight ``omega``.
"""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

MODULATION_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)
N_ACTIONS = len(MODULATION_LEVELS)
FEATURE_NAMES = ("hour", "zone_temp", "outdoor_temp", "comfort_lower")
ACTION_NAMES = tuple(f"u={u:g}" for u in MODULATION_LEVELS)

TEMP_RANGE = (-40.0, 60.0)


class EnvFault(RuntimeError):
    """Raised when the simulator state becomes non-finite or leaves its valid range."""


@dataclass(frozen=True)
class EnvConfig:
    timestep: float = 900.0  # s
    capacitance: float = 1.0e7  # J/K
    loss_coefficient: float = 250.0  # W/K
    rated_electric_power: float = 3000.0  # W
    cop: float = 3.0
    peak_price: float = 0.30  # per kWh
    offpeak_price: float = 0.15
    peak_start: float = 7.0
    peak_end: float = 22.0
    comfort_day: float = 21.0
    comfort_night: float = 15.0
    comfort_start: float = 7.0
    comfort_end: float = 22.0
    outdoor_mean: float = 5.0
    outdoor_daily_amp: float = 5.0
    outdoor_peak_hour: float = 15.0
    outdoor_seasonal_amp: float = 3.0
    outdoor_seasonal_coldest_day: float = 37.0
    outdoor_noise_std: float = 0.5
    # Cost KPI is reported per m2 of floor, as in common building benchmarks.
    floor_area: float = 192.0
    initial_zone_temp: float = 20.0
    omega: float = 100.0
    seed: int = 0

    def __post_init__(self):
        positive = ("timestep", "capacitance", "loss_coefficient", "rated_electric_power",
                    "cop", "floor_area")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"EnvConfig.{name} must be positive")
        if 3600 % self.timestep != 0:
            raise ValueError("EnvConfig.timestep must divide 3600")
        if self.peak_price < 0 or self.offpeak_price < 0 or self.omega < 0:
            raise ValueError("prices and omega must be nonnegative")

    @property
    def steps_per_day(self) -> int:
        return int(round(86400 / self.timestep))

    def with_overrides(self, **kw) -> "EnvConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def load_env_config(path, section: str = "env") -> EnvConfig:
    """Read an ``[env]`` section of key = value pairs; unknown keys are rejected."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    if not parser.has_section(section):
        return EnvConfig()
    return env_config_from_mapping(dict(parser[section]))


def env_config_from_mapping(mapping: dict) -> EnvConfig:
    types = {f.name: f.type for f in fields(EnvConfig)}
    kw = {}
    for key, raw in mapping.items():
        if key not in types:
            raise ValueError(f"unknown env config key: {key!r}")
        kw[key] = int(raw) if types[key] in (int, "int") else float(raw)
    return EnvConfig(**kw)


@dataclass(frozen=True)
class EnvState:
    hour: float
    zone_temp: float
    outdoor_temp: float
    comfort_lower: float
    time_index: int

    def validate(self):
        vals = (self.hour, self.zone_temp, self.outdoor_temp, self.comfort_lower)
        if not all(math.isfinite(v) for v in vals):
            raise EnvFault(f"non-finite state {self}")
        if not 0.0 <= self.hour < 24.0:
            raise EnvFault(f"hour out of range in {self}")
        lo, hi = TEMP_RANGE
        for v in vals[1:]:
            if not lo <= v <= hi:
                raise EnvFault(f"temperature out of [{lo}, {hi}] in {self}")

    def raw_features(self) -> np.ndarray:
        return np.array([self.hour / 24.0, self.zone_temp, self.outdoor_temp, self.comfort_lower])


@dataclass(frozen=True)
class RewardComponents:
    discomfort: float
    energy_cost: float
    omega: float
    reward: float


def compose_reward(discomfort: float, energy_cost: float, omega: float) -> float:
    return -(discomfort + omega * energy_cost)


def price(cfg: EnvConfig, hour: float) -> float:
    return cfg.peak_price if cfg.peak_start <= hour < cfg.peak_end else cfg.offpeak_price


def comfort_lower(cfg: EnvConfig, hour: float) -> float:
    return cfg.comfort_day if cfg.comfort_start <= hour < cfg.comfort_end else cfg.comfort_night


def _hour_of(cfg: EnvConfig, t: int) -> float:
    return (t % cfg.steps_per_day) * cfg.timestep / 3600.0


def _day_noise(cfg: EnvConfig, day: int) -> np.ndarray:
    # One independent stream per (seed, day) so any period can be simulated in isolation.
    rng = np.random.default_rng([cfg.seed, day])
    return rng.normal(0.0, cfg.outdoor_noise_std, size=cfg.steps_per_day)


class _OutdoorCache:
    def __init__(self):
        self._key = None
        self._days = {}

    def get(self, cfg: EnvConfig, t: int) -> float:
        key = (cfg.seed, cfg.outdoor_noise_std, cfg.steps_per_day)
        if key != self._key:
            self._key, self._days = key, {}
        day, step = divmod(t, cfg.steps_per_day)
        noise = self._days.get(day)
        if noise is None:
            if len(self._days) > 512:
                self._days.clear()
            noise = self._days[day] = _day_noise(cfg, day)
        return float(noise[step])


_outdoor_cache = _OutdoorCache()


def outdoor_temp(cfg: EnvConfig, t: int) -> float:
    """Outdoor temperature at absolute step ``t``; daily cycle peaks at ``outdoor_peak_hour``."""
    h = _hour_of(cfg, t)
    day = t * cfg.timestep / 86400.0
    daily = cfg.outdoor_daily_amp * math.sin(2 * math.pi * (h - cfg.outdoor_peak_hour + 6.0) / 24.0)
    seasonal = -cfg.outdoor_seasonal_amp * math.cos(
        2 * math.pi * (day - cfg.outdoor_seasonal_coldest_day) / 365.0)
    return cfg.outdoor_mean + daily + seasonal + _outdoor_cache.get(cfg, t)


def env_reset(cfg: EnvConfig, start_day: int = 0, start_hour: float = 0.0,
              zone_temp: float | None = None) -> EnvState:
    steps_per_hour = 3600.0 / cfg.timestep
    t = int(start_day) * cfg.steps_per_day + int(round(start_hour * steps_per_hour))
    h = _hour_of(cfg, t)
    tz = cfg.initial_zone_temp if zone_temp is None else float(zone_temp)
    state = EnvState(h, tz, outdoor_temp(cfg, t), comfort_lower(cfg, h), t)
    state.validate()
    return state


def env_step(state: EnvState, action: int, cfg: EnvConfig) -> tuple[EnvState, RewardComponents]:
    """Advance one timestep with explicit Euler and return the next state and reward terms."""
    state.validate()
    if not 0 <= int(action) < N_ACTIONS:
        raise ValueError(f"action level must be in [0, {N_ACTIONS}), got {action}")
    u = MODULATION_LEVELS[int(action)]
    dt = cfg.timestep
    heat = cfg.cop * cfg.rated_electric_power * u
    tz = state.zone_temp + dt / cfg.capacitance * (
        cfg.loss_coefficient * (state.outdoor_temp - state.zone_temp) + heat)

    t = state.time_index + 1
    h = _hour_of(cfg, t)
    ts = comfort_lower(cfg, h)
    discomfort = max(0.0, ts - tz) * dt / 3600.0
    energy_cost = price(cfg, state.hour) * cfg.rated_electric_power * u * dt / 3.6e6 / cfg.floor_area
    reward = compose_reward(discomfort, energy_cost, cfg.omega)

    nxt = EnvState(h, tz, outdoor_temp(cfg, t), ts, t)
    nxt.validate()
    return nxt, RewardComponents(discomfort, energy_cost, cfg.omega, reward)


def electric_energy_kwh(cfg: EnvConfig, action: int) -> float:
    return cfg.rated_electric_power * MODULATION_LEVELS[int(action)] * cfg.timestep / 3.6e6


def state_to_features(state: EnvState, scaling=None) -> np.ndarray:
    """Encode a state as (h/24, T_z, T_o, T_s), standardized when ``scaling`` is given."""
    raw = state.raw_features()
    if scaling is None:
        return raw
    return scaling.standardize(raw)


EPISODE_LOG_COLUMNS = ("t", "h", "T_z", "T_o", "T_s", "u", "T_c", "E_c", "R_t")


def write_episode_log(path, rows):
    """``rows`` are (state, action, RewardComponents) triples."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPISODE_LOG_COLUMNS)
        for s, a, rc in rows:
            writer.writerow([s.time_index, repr(s.hour), repr(s.zone_temp), repr(s.outdoor_temp),
                             repr(s.comfort_lower), MODULATION_LEVELS[a], repr(rc.discomfort),
                             repr(rc.energy_cost), repr(rc.reward)])
    return Path(path)
