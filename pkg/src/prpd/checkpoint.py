"""Versioned binary policy checkpoints.

Layout: magic, u16 version, u32 header length, JSON header (config hash,
layer manifest, metadata), raw little-endian float64 arrays in manifest
order, then a sha256 of everything before it.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from prpd.rl import ActorCritic

MAGIC = b"PRPDCKPT"
VERSION = 1


class CheckpointError(RuntimeError):
    """Corrupt, truncated or unreadable checkpoint."""


class ConfigMismatchError(CheckpointError):
    pass


def save_checkpoint(path, ac: ActorCritic, config_hash: str, meta: dict | None = None) -> Path:
    layout = ac.layout()
    header = {
        "config_hash": config_hash,
        "hidden": [int(w) for w in ac.pi.widths[1:-1]],
        "layers": [{"name": n, "shape": list(s)} for n, s in layout],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in ac.ordered_params())
    blob = MAGIC + struct.pack("<HI", VERSION, len(head)) + head + body
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob + hashlib.sha256(blob).digest())
    return path


def read_header(path) -> dict:
    return _parse(Path(path).read_bytes())[0]


def _parse(raw: bytes) -> tuple[dict, bytes]:
    if len(raw) < len(MAGIC) + 6 + 32 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a policy checkpoint (bad magic)")
    blob, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(blob).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    version, hlen = struct.unpack_from("<HI", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 6
    try:
        header = json.loads(blob[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    return header, blob[start + hlen:]


def load_checkpoint(path, expected_hash: str | None = None, force: bool = False) -> tuple[ActorCritic, dict]:
    """Rebuild the networks; refuses a config-hash mismatch unless ``force``."""
    header, body = _parse(Path(path).read_bytes())
    if expected_hash is not None and header["config_hash"] != expected_hash and not force:
        raise ConfigMismatchError(
            f"checkpoint config hash {header['config_hash']} != expected {expected_hash} (use --force)")
    ac = ActorCritic(header["hidden"], seed=0)
    layout = ac.layout()
    stored = [(d["name"], tuple(d["shape"])) for d in header["layers"]]
    if stored != [(n, tuple(s)) for n, s in layout]:
        raise CheckpointError("layer manifest does not match the network layout")
    need = sum(int(np.prod(s)) for _, s in layout) * 8
    if len(body) != need:
        raise CheckpointError(f"payload is {len(body)} bytes, manifest needs {need}")
    offset = 0
    for p, (_, shape) in zip(ac.ordered_params(), layout):
        n = int(np.prod(shape)) * 8
        p.data = np.frombuffer(body[offset:offset + n], dtype="<f8").reshape(shape).astype(np.float64)
        offset += n
    return ac, header
