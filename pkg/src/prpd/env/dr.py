"""Per-episode physical and observation parameters (domain randomisation)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration; ``keys`` names the settings involved, if known."""

    def __init__(self, message: str, keys: tuple[str, ...] = ()):
        super().__init__(message)
        self.keys = tuple(keys)


@dataclass(frozen=True)
class DRRange:
    nominal: float
    low: float
    high: float
    dims: int = 1


# name -> (value without DR, min, max, vector size); volumes in mm^3, masses in kg
DR_RANGES: dict[str, DRRange] = {
    "rock_obs_noise": DRRange(0.0, -25.0, 25.0, 2),
    "rock_obs_bias": DRRange(0.0, -25.0, 25.0, 2),
    "rock_in_bucket_error": DRRange(0.0, 0.2, 0.2),
    "ground_height_bias": DRRange(0.0, -25.0, 25.0),
    "bucket_pos_bias": DRRange(0.0, -300.0, 300.0, 3),
    "rock_pos_bias": DRRange(0.0, -30.0, 30.0, 3),
    "bucket_torque_weight": DRRange(1.0, 0.8, 1.2, 3),
    "external_force": DRRange(0.0, 0.0, 1.0),
    "friction": DRRange(1.0, 0.8, 1.2),
    "soil_mass": DRRange(3.0, 2.7, 3.3),
    "rock_mass": DRRange(1.0, 0.8, 1.2),
    "soil_volume": DRRange(125.0 ** 3, 120.0 ** 3, 130.0 ** 3),
    "rock_volume": DRRange(50.0 ** 3, 45.0 ** 3, 55.0 ** 3),
}


@dataclass(frozen=True)
class DRParams:
    """One episode's draw.

    ``rock_obs_noise`` is the half-width of the per-step uniform noise added to
    the observed rock XY; the other rows are constant for the episode.
    """

    rock_obs_noise: float
    rock_obs_bias: tuple[float, float]
    rock_in_bucket_error: float
    ground_height_bias: float
    bucket_pos_bias: tuple[float, float, float]
    rock_pos_bias: tuple[float, float, float]
    bucket_torque_weight: tuple[float, float, float]
    external_force: float
    friction: float
    soil_mass: float
    rock_mass: float
    soil_volume: float
    rock_volume: float

    def as_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def validate_ranges(ranges: dict[str, DRRange]) -> None:
    missing = set(DR_RANGES) - set(ranges)
    if missing:
        raise ConfigError(f"DR ranges missing rows: {sorted(missing)}")
    for name, r in ranges.items():
        if name not in DR_RANGES:
            raise ConfigError(f"unknown DR row {name!r}")
        if not (np.isfinite(r.low) and np.isfinite(r.high)) or r.low > r.high:
            raise ConfigError(f"malformed DR range for {name!r}: [{r.low}, {r.high}]")


# rows randomised by the desk preset: rock pose and the physical bulk
# properties; the start-pose, sensing and disturbance rows stay nominal
DESK_ROWS = ("rock_pos_bias", "bucket_torque_weight", "friction", "soil_mass", "rock_mass",
             "soil_volume", "rock_volume")


def sample_dr(ranges: dict[str, DRRange] | None, enabled: bool, rng: np.random.Generator,
              rows=None) -> DRParams:
    """Draw one episode's parameters; ``rows`` limits which rows are randomised."""
    ranges = DR_RANGES if ranges is None else ranges
    validate_ranges(ranges)
    if rows is not None:
        unknown = set(rows) - set(DR_RANGES)
        if unknown:
            raise ConfigError(f"unknown DR row(s): {sorted(unknown)}")
    values = {}
    for name in DR_RANGES:
        r = ranges[name]
        active = enabled and (rows is None or name in rows)
        if name == "rock_obs_noise":
            values[name] = max(abs(r.low), abs(r.high)) if active else r.nominal
            continue
        if active:
            draw = rng.uniform(r.low, r.high, size=r.dims) if r.low < r.high else np.full(r.dims, r.low)
        else:
            draw = np.full(r.dims, r.nominal)
        values[name] = float(draw[0]) if r.dims == 1 else tuple(float(v) for v in draw)
    return DRParams(**values)
