"""YAML experiment configs and ``key=value`` overrides.

Keys are the ``ExperimentConfig`` field names. Errors carry the file and
line of the offending entry so a bad config can be fixed without guessing.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import yaml

from prpd.env.dr import ConfigError
from prpd.harness import ExperimentConfig

# fields that take a list or may be left empty
_SEQ_INT = {"hidden", "seeds"}
_SEQ_STR = {"dr_rows"}
_OPTIONAL = {"middle_target", "max_samples", "dr_rows"}


def _kinds() -> dict[str, type]:
    base = ExperimentConfig()
    out = {}
    for f in fields(ExperimentConfig):
        v = getattr(base, f.name)
        if f.name in _SEQ_INT or f.name in _SEQ_STR:
            out[f.name] = tuple
        elif f.name == "middle_target":
            out[f.name] = float
        elif f.name == "max_samples":
            out[f.name] = int
        else:
            out[f.name] = type(v)
    return out


KINDS = _kinds()


def coerce(key: str, value):
    """Check and convert one value for ``key``; raises ConfigError on a bad type."""
    if key not in KINDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = KINDS[key]
    if value is None:
        if key in _OPTIONAL:
            return None
        raise ConfigError(f"{key} may not be empty")
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} expects true/false, got {value!r}")
    if kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key} expects an integer, got {value!r}")
    if kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):  # YAML 1.1 reads "1e-3" as a string
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{key} expects a number, got {value!r}")
    if kind is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key} expects a string, got {value!r}")
    # sequences
    items = value if isinstance(value, (list, tuple)) else [value]
    want = str if key in _SEQ_STR else int
    for it in items:
        if not isinstance(it, want) or isinstance(it, bool):
            raise ConfigError(f"{key} expects a list of {want.__name__}, got {value!r}")
    return tuple(items)


def load_mapping(path, lines: dict | None = None) -> dict:
    """Parse a YAML mapping of config keys; errors name the file and line.

    ``lines``, if given, is filled with the line number of every key.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    text = path.read_text()
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigError(f"{where}: invalid YAML ({getattr(exc, 'problem', exc)})") from None
    if root is None:
        return {}
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{path}:{root.start_mark.line + 1}: top level must be a mapping")
    out = {}
    for key_node, val_node in root.value:
        line = key_node.start_mark.line + 1
        key = key_node.value
        if key in out:
            raise ConfigError(f"{path}:{line}: duplicate key {key!r}")
        if lines is not None:
            lines[key] = line
        try:
            value = yaml.safe_load(yaml.serialize(val_node))
            out[key] = coerce(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{line}: {exc}") from None
    return out


def parse_overrides(pairs) -> dict:
    """``["lr=1e-3", "seeds=[0,1]"]`` -> typed dict; values use YAML syntax."""
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        try:
            value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError:
            raise ConfigError(f"override {key}: cannot parse {raw!r}") from None
        out[key] = coerce(key, value)
    return out


def load_config(path=None, overrides=None, **extra) -> ExperimentConfig:
    """Defaults, then the file, then ``extra`` keyword values, then overrides."""
    lines: dict[str, int] = {}
    values = load_mapping(path, lines) if path is not None else {}
    values.update({k: v for k, v in extra.items() if v is not None})
    values.update(parse_overrides(overrides))
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        # point at the file line of a key the failed check depends on
        hit = [lines[k] for k in exc.keys if k in lines]
        if hit:
            raise ConfigError(f"{path}:{min(hit)}: {exc}", exc.keys) from None
        raise


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
