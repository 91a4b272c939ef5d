"""Episode recording, digests and bit-exact replay.

A replay file is JSON: a header (config hash, seed, env index, episode,
resolution, horizon, DR settings), the per-step action list, and the
per-step digests used to locate the first divergence.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from prpd.env.world import ExcavationEnv, StepResult

REPLAY_VERSION = 1


class ReplayDivergenceError(RuntimeError):
    def __init__(self, step: int, expected: str, got: str):
        super().__init__(f"replay diverged at step {step}: expected {expected[:12]}, got {got[:12]}")
        self.step = step


def step_digest(prev: str, res: StepResult) -> str:
    """Chain hash over the previous digest and every field of a step result."""
    h = hashlib.sha256(prev.encode())
    h.update(np.ascontiguousarray(res.observation, dtype="<f8").tobytes())
    h.update(json.dumps([float(res.reward), bool(res.done), bool(res.success), int(res.voxel_ops)]).encode())
    return h.hexdigest()


@dataclass
class EpisodeTrace:
    header: dict
    actions: list[list[float]] = field(default_factory=list)
    digests: list[str] = field(default_factory=list)
    success: bool = False
    voxel_ops: int = 0

    @property
    def digest(self) -> str:
        return self.digests[-1] if self.digests else ""

    def summary(self) -> dict:
        """One JSON-lines digest record for the episode."""
        return {"seed": self.header["seed"], "index": self.header["index"],
                "episode": self.header["episode"], "dr": self.header.get("dr"),
                "success": self.success, "steps": len(self.actions),
                "voxel_ops": self.voxel_ops, "digest": self.digest}


def _make_env(header: dict) -> ExcavationEnv:
    return ExcavationEnv(header["delta_mm"], header["horizon"], header["dr_enabled"], None,
                         seed=header["seed"], index=header["index"],
                         dr_rows=header.get("dr_rows"))


def record_episode(policy, delta: float, seed: int, index: int = 0, episode: int = 0,
                   horizon: int = 64, dr_enabled: bool = True, dr_rows=None,
                   config_hash: str = "") -> EpisodeTrace:
    """Run one episode; ``policy(obs) -> action`` (e.g. a mean-action closure)."""
    header = {"version": REPLAY_VERSION, "config_hash": config_hash, "seed": int(seed),
              "index": int(index), "episode": int(episode), "delta_mm": float(delta),
              "horizon": int(horizon), "dr_enabled": bool(dr_enabled),
              "dr_rows": None if dr_rows is None else list(dr_rows)}
    env = _make_env(header)
    obs = env.reset(episode)
    header["dr"] = env.state.dr.as_dict()
    trace = EpisodeTrace(header)
    prev = ""
    while True:
        action = [float(a) for a in np.asarray(policy(obs), dtype=np.float64).reshape(-1)]
        res = env.step(action)
        prev = step_digest(prev, res)
        trace.actions.append(action)
        trace.digests.append(prev)
        trace.voxel_ops += res.voxel_ops
        obs = res.observation
        if res.done:
            trace.success = res.success
            return trace


def save_trace(trace: EpisodeTrace, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # repr round-trips float64 exactly through JSON
    payload = {"header": trace.header, "actions": trace.actions, "digests": trace.digests}
    path.write_text(json.dumps(payload, sort_keys=True) + "\n")
    return path


def load_trace(path) -> EpisodeTrace:
    try:
        raw = json.loads(Path(path).read_text())
        header, actions, digests = raw["header"], raw["actions"], raw["digests"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: not a replay file ({exc})") from None
    if header.get("version") != REPLAY_VERSION:
        raise ValueError(f"{path}: unsupported replay version {header.get('version')}")
    if len(actions) != len(digests):
        raise ValueError(f"{path}: {len(actions)} actions but {len(digests)} digests")
    return EpisodeTrace(header, actions, digests)


def replay(trace: EpisodeTrace) -> EpisodeTrace:
    """Re-run the stored actions; raises ReplayDivergenceError at the first mismatch."""
    env = _make_env(trace.header)
    env.reset(trace.header["episode"])
    out = EpisodeTrace(dict(trace.header))
    prev = ""
    for i, (action, want) in enumerate(zip(trace.actions, trace.digests)):
        if env.state.done:
            raise ReplayDivergenceError(i, want, "episode already finished")
        res = env.step(action)
        prev = step_digest(prev, res)
        if prev != want:
            raise ReplayDivergenceError(i, want, prev)
        out.actions.append(action)
        out.digests.append(prev)
        out.voxel_ops += res.voxel_ops
        out.success = res.success
    return out


def write_digests(traces, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for t in traces:
            fh.write(json.dumps(t.summary(), sort_keys=True) + "\n")
    return path
