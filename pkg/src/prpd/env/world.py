"""Quasi-static rock excavation world at a chosen voxel resolution.

Soil is a column height field, the rock a rigid voxel cluster that can only
translate (and carry a pitch angle for observation), and the bucket a thin
square plate that passes freely through soil and collides only with the rock.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from prpd.env.dr import DR_RANGES, DRParams, DRRange, sample_dr
from prpd.env.rock import RockState, grow_rock
from prpd.env.soil import SimulationFault, SoilField, even_heights, settle_soil

DELTA_MIN, DELTA_MAX = 5.0, 100.0

MAX_MOVE_MM = 30.0
MAX_PITCH_STEP = 0.2
HOLD_PITCH = (0.3, 1.2)
PITCH_LIMIT = math.pi / 2

PLATE_HALF = 70.0          # plate is 140 x 140 mm
PLATE_THICKNESS = 10.0
BUCKET_START = (-100.0, 0.0, 0.0)   # beside the rock, plate at the soil top
WORKSPACE_LO = (-450.0, -450.0, -250.0)
WORKSPACE_HI = (450.0, 450.0, 450.0)

EMBED_DEPTH = 50.0         # nominal rock bottom below the soil top
EMBED_MIN = 30.0           # never shallower than the largest ground bias
DRIFT_MM_PER_N = 2.0
GRAVITY = 9.81
LOAD_THRESHOLD_N = 1.0
REWARD_SCALE = 100.0

OBS_DIM = 8
ACT_DIM = 4


@dataclass
class Resolution:
    delta_mm: float

    def __post_init__(self):
        d = float(self.delta_mm)
        if not (DELTA_MIN <= d <= DELTA_MAX):
            raise ValueError(f"resolution {d} mm outside [{DELTA_MIN}, {DELTA_MAX}]")
        self.delta_mm = d


@dataclass
class BucketState:
    x: float
    y: float
    z: float
    pitch: float = 0.0
    half_width: float = PLATE_HALF
    thickness: float = PLATE_THICKNESS


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    success: bool
    voxel_ops: int


@dataclass
class WorldState:
    soil: SoilField
    rock: RockState
    bucket: BucketState
    delta: float
    dr: DRParams
    rng: np.random.Generator
    horizon: int
    h_ground: float
    drift: tuple[float, float]
    step_count: int = 0
    done: bool = False
    plate_load: float = 0.0
    log: list[str] = field(default_factory=list)
    footprint_key: tuple | None = field(default=None, repr=False)
    footprint: list[int] = field(default_factory=list, repr=False)

    def digest(self) -> str:
        payload = {
            "delta": self.delta,
            "soil": self.soil.heights,
            "rock_cells": self.rock.cells.tolist(),
            "rock": [self.rock.x, self.rock.y, self.rock.bottom, self.rock.pitch, self.rock.held],
            "bucket": [self.bucket.x, self.bucket.y, self.bucket.z, self.bucket.pitch],
            "dr": self.dr.as_dict(),
            "step": self.step_count,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def soil_grid_size(soil_volume: float, delta: float) -> int:
    side = soil_volume ** (1.0 / 3.0)
    return max(1, math.ceil(side / delta - 1e-9))


def generate_world(delta: float, dr: DRParams, seed, horizon: int = 64) -> WorldState:
    """Build soil bed, rock and bucket for one episode.

    The soil top of the nominal cube is z = 0. The rock is pressed into the
    bed so its bottom sits on a voxel layer about ``EMBED_DEPTH`` deep.
    """
    delta = Resolution(delta).delta_mm
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    log: list[str] = []

    side = dr.soil_volume ** (1.0 / 3.0)
    n = soil_grid_size(dr.soil_volume, delta)
    total = int(round(dr.soil_volume / delta ** 3))
    half = 0.5 * n * delta
    soil = SoilField(n, delta, even_heights(total, n * n), -half, -half, -side)

    cells = grow_rock(dr.rock_volume, delta, rng)
    bx, by, bz = dr.rock_pos_bias
    target = min(-EMBED_DEPTH + bz, -EMBED_MIN)
    # nearest voxel layer, but never shallower than EMBED_MIN
    layer = max(0, math.floor((target - soil.base_z) / delta + 0.5))
    while layer > 0 and soil.base_z + layer * delta > -EMBED_MIN + 1e-9:
        layer -= 1
    rock = RockState(cells, delta, bx, by, soil.base_z + layer * delta)
    if _clamp_rock_to_bed(rock, soil):
        log.append("rock position clamped to soil footprint")

    ux, uy, uz = dr.bucket_pos_bias
    bucket = BucketState(BUCKET_START[0] + ux, BUCKET_START[1] + uy, BUCKET_START[2] + uz)
    _clamp_bucket(bucket)

    angle = rng.uniform(0.0, 2.0 * math.pi)
    drift = (math.cos(angle) * dr.external_force * DRIFT_MM_PER_N,
             math.sin(angle) * dr.external_force * DRIFT_MM_PER_N)

    state = WorldState(soil, rock, bucket, delta, dr, rng, horizon,
                       h_ground=dr.ground_height_bias, drift=drift, log=log)
    # a biased start may put the plate inside the rock; separate them so a
    # zero action on the fresh world changes nothing
    if _collides(state):
        _push(state, resistance=1.0)
        _clamp_rock_to_bed(rock, soil)
        log.append("rock moved clear of the starting bucket")
        if _collides(state):  # pinned against the bed edge: lift the bucket instead
            bucket.z = rock.top + bucket.thickness
            _clamp_bucket(bucket)
            log.append("bucket lifted clear of the rock")
    caps = _plow(state)
    _fall(state)
    settle_soil(soil, caps)
    soil.ops = 0
    return state


def _clamp_bucket(b: BucketState) -> None:
    b.x = min(max(b.x, WORKSPACE_LO[0]), WORKSPACE_HI[0])
    b.y = min(max(b.y, WORKSPACE_LO[1]), WORKSPACE_HI[1])
    b.z = min(max(b.z, WORKSPACE_LO[2]), WORKSPACE_HI[2])
    b.pitch = min(max(b.pitch, -PITCH_LIMIT), PITCH_LIMIT)


def _clamp_rock_to_bed(rock: RockState, soil: SoilField) -> bool:
    lo_x, hi_x = soil.x0 + rock.half_x, soil.x0 + soil.side - rock.half_x
    lo_y, hi_y = soil.y0 + rock.half_y, soil.y0 + soil.side - rock.half_y
    # rock wider than the bed: keep it centred
    nx = 0.5 * (soil.x0 * 2 + soil.side) if lo_x > hi_x else min(max(rock.x, lo_x), hi_x)
    ny = 0.5 * (soil.y0 * 2 + soil.side) if lo_y > hi_y else min(max(rock.y, lo_y), hi_y)
    moved = (nx != rock.x) or (ny != rock.y)
    rock.x, rock.y = nx, ny
    return moved


def _footprint(state: WorldState) -> list[int]:
    """Soil columns under the rock, memoised on the rock's XY position."""
    soil, rock = state.soil, state.rock
    key = (rock.x, rock.y)
    if state.footprint_key == key:
        return state.footprint
    cols = set()
    for x, y in rock.voxel_xy():
        c = soil.column_at(x, y)
        if c >= 0:
            cols.add(c)
    soil.ops += rock.n_voxels
    state.footprint_key = key
    state.footprint = sorted(cols)
    return state.footprint


def _plow(state: WorldState) -> dict[int, int]:
    """Push soil out of the rock's footprint down to its bottom; return caps."""
    soil, rock = state.soil, state.rock
    fp = _footprint(state)
    cap = max(0, math.floor((rock.bottom - soil.base_z) / soil.delta + 1e-9))
    caps = {c: cap for c in fp}
    h = soil.heights
    for c in fp:
        excess = h[c] - cap
        if excess <= 0:
            continue
        dest = _nearest_free_column(soil.n, c, caps)
        if dest < 0:
            continue
        h[c] = cap
        h[dest] += excess
        soil.ops += excess
    return caps


def _nearest_free_column(n: int, start: int, blocked: dict[int, int]) -> int:
    from prpd.env.soil import neighbours

    nbs = neighbours(n)
    seen = {start}
    queue = deque([start])
    while queue:
        c = queue.popleft()
        for nb in nbs[c]:
            if nb in seen:
                continue
            if nb not in blocked:
                return nb
            seen.add(nb)
            queue.append(nb)
    return -1


def _support(state: WorldState) -> float:
    soil = state.soil
    return max((soil.top(c) for c in _footprint(state)), default=soil.base_z)


def _fall(state: WorldState) -> None:
    rock = state.rock
    rock.bottom = max(min(rock.bottom, _support(state)), state.soil.base_z)


def _hold_ok(state: WorldState) -> bool:
    b, rock = state.bucket, state.rock
    if not (HOLD_PITCH[0] <= b.pitch <= HOLD_PITCH[1]):
        return False
    half_band = 0.5 * state.delta
    if not (rock.bottom - half_band <= b.z <= rock.bottom + half_band):
        return False
    w = b.half_width
    inside = 0
    for x, y in rock.voxel_xy():
        if abs(x - b.x) <= w and abs(y - b.y) <= w:
            inside += 1
    state.soil.ops += rock.n_voxels
    return 2 * inside >= rock.n_voxels


def _collides(state: WorldState) -> bool:
    b, rock = state.bucket, state.rock
    d = state.delta
    reach = b.half_width + 0.5 * d
    lo = b.z - b.thickness
    hit = False
    for (x, y), k in zip(rock.voxel_xy(), rock.layer):
        z0 = rock.bottom + k * d
        if b.z > z0 and lo < z0 + d and abs(x - b.x) < reach and abs(y - b.y) < reach:
            hit = True
            break
    state.soil.ops += rock.n_voxels
    return hit


def _push(state: WorldState, resistance: float | None = None) -> None:
    """Shove the rock horizontally out of the plate along the shortest axis.

    The distance is divided by ``resistance`` (the episode friction by default).
    """
    b, rock = state.bucket, state.rock
    w = b.half_width
    options = (
        ((b.x + w) - (rock.x - rock.half_x), 1.0, 0.0),
        ((rock.x + rock.half_x) - (b.x - w), -1.0, 0.0),
        ((b.y + w) - (rock.y - rock.half_y), 0.0, 1.0),
        ((rock.y + rock.half_y) - (b.y - w), 0.0, -1.0),
    )
    dist, ux, uy = min(options, key=lambda o: o[0])
    dist = max(dist, 0.0) / (state.dr.friction if resistance is None else resistance)
    rock.x += ux * dist
    rock.y += uy * dist


def clamp_action(action) -> tuple[float, float, float, float]:
    x, y, z, p = np.asarray(action, dtype=np.float64).reshape(ACT_DIM).tolist()
    m, q = MAX_MOVE_MM, MAX_PITCH_STEP
    return (min(max(x, -m), m), min(max(y, -m), m), min(max(z, -m), m), min(max(p, -q), q))


def step_env(state: WorldState, action) -> StepResult:
    """Advance the world one control step (mutates ``state``)."""
    if state.done:
        raise RuntimeError("step on a finished episode")
    a = clamp_action(action)
    soil, rock, b = state.soil, state.rock, state.bucket
    soil.ops = 0

    tw = state.dr.bucket_torque_weight
    ox, oy, oz, op = b.x, b.y, b.z, b.pitch
    b.x += a[0] * tw[0]
    b.y += a[1] * tw[1]
    b.z += a[2] * tw[2]
    b.pitch += a[3]
    _clamp_bucket(b)
    if not all(map(math.isfinite, (b.x, b.y, b.z, b.pitch))):
        raise SimulationFault("non-finite bucket pose")

    load = 0.0
    if rock.held:
        old_bottom = rock.bottom
        rock.x += b.x - ox
        rock.y += b.y - oy
        rock.bottom += b.z - oz
        rock.pitch += b.pitch - op
        soil.ops += rock.n_voxels
        if rock.bottom < old_bottom:
            floor = _support(state)
            if rock.bottom < floor:
                # soil blocks the way down: the rock stays and slips off the plate
                rock.bottom = min(old_bottom, floor)
                rock.held = False
        if rock.held and HOLD_PITCH[0] <= b.pitch <= HOLD_PITCH[1]:
            load = state.dr.rock_mass * GRAVITY
        else:
            rock.held = False
    if not rock.held:
        if _hold_ok(state):
            rock.held = True
            rock.bottom = max(rock.bottom, b.z)
            load = state.dr.rock_mass * GRAVITY
        elif _collides(state):
            _push(state)
            load = 0.5 * state.dr.rock_mass * GRAVITY

    if rock.held:
        caps = _plow(state)
    else:
        rock.x += state.drift[0]
        rock.y += state.drift[1]
        _clamp_rock_to_bed(rock, soil)
        caps = _plow(state)
        _fall(state)
    settle_soil(soil, caps)
    state.plate_load = load

    if not all(map(math.isfinite, (rock.x, rock.y, rock.bottom))):
        raise SimulationFault("non-finite rock pose")

    state.step_count += 1
    success = is_success(state)
    state.done = success or state.step_count >= state.horizon
    obs = observe(state, state.rng)
    return StepResult(obs, rock.bottom / REWARD_SCALE, state.done, success, soil.ops)


def is_success(state: WorldState) -> bool:
    return state.rock.bottom > state.h_ground


def observe(state: WorldState, rng: np.random.Generator) -> np.ndarray:
    """8-vector: noisy rock XY + pitch, rock-in-bucket flag, bucket XYZ + pitch."""
    dr, rock, b = state.dr, state.rock, state.bucket
    amp = dr.rock_obs_noise
    if amp > 0:
        nx, ny = rng.uniform(-amp, amp, size=2)
    else:
        nx = ny = 0.0
    flag = 1.0 if state.plate_load > LOAD_THRESHOLD_N else 0.0
    if dr.rock_in_bucket_error > 0 and rng.random() < dr.rock_in_bucket_error:
        flag = 1.0 - flag
    return np.array([
        rock.x + nx + dr.rock_obs_bias[0],
        rock.y + ny + dr.rock_obs_bias[1],
        rock.pitch,
        flag,
        b.x, b.y, b.z, b.pitch,
    ])


def episode_rng(run_seed: int, env_index: int, episode_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(run_seed), int(env_index), int(episode_index)]))


class ExcavationEnv:
    """One environment instance with its own seeded episode stream."""

    def __init__(self, delta: float, horizon: int = 64, dr_enabled: bool = True,
                 dr_ranges: dict[str, DRRange] | None = None, seed: int = 0, index: int = 0,
                 dr_rows=None):
        self.delta = Resolution(delta).delta_mm
        self.horizon = horizon
        self.dr_enabled = dr_enabled
        self.dr_ranges = dr_ranges if dr_ranges is not None else DR_RANGES
        self.dr_rows = None if dr_rows is None else tuple(dr_rows)
        self.seed = seed
        self.index = index
        self.episode = 0
        self.state: WorldState | None = None

    def reset(self, episode: int | None = None) -> np.ndarray:
        if episode is not None:
            self.episode = episode
        rng = episode_rng(self.seed, self.index, self.episode)
        self.episode += 1
        dr = sample_dr(self.dr_ranges, self.dr_enabled, rng, self.dr_rows)
        self.state = generate_world(self.delta, dr, rng, self.horizon)
        return observe(self.state, rng)

    def step(self, action) -> StepResult:
        return step_env(self.state, action)
