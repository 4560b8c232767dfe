"""YAML config files and dotted-key overrides for SimConfig."""
from __future__ import annotations

import re
from dataclasses import fields
from pathlib import Path
from typing import Any

import yaml

from .simkernel import (
    ConfigError,
    HypercallCost,
    HypercallModel,
    JitterModel,
    SimConfig,
    VirtualBoardSpec,
)

_UNITS = {"ns": 1, "us": 1_000, "µs": 1_000, "ms": 1_000_000, "s": 1_000_000_000, "min": 60_000_000_000}
_DURATION_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)\s*(ns|us|µs|ms|s|min)?\s*$")

DURATION_KEYS = {
    "time_slice", "tse_offset", "enforced_switch_duration", "base_switch_cost", "tick_cost",
    "stall_absorption", "sim_duration", "magnitude", "tail_magnitude", "base_cost",
    "cache_flush_penalty", "critical_section",
}
_SIM_SCALARS = {
    "speed_exponent": int, "counter_freq": int, "tick_frequency": int, "seed": int,
    "enforced_switch_duration": int, "base_switch_cost": int, "tick_cost": int,
    "stall_absorption": int, "sim_duration": int,
}


def parse_duration(value: Any) -> int:
    """Nanoseconds from an int or a string such as ``"10us"`` / ``"15min"``."""
    if isinstance(value, bool):
        raise ValueError(f"not a duration: {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"durations are integer nanoseconds: {value!r}")
        return int(value)
    m = _DURATION_RE.match(str(value))
    if not m:
        raise ValueError(f"not a duration: {value!r}")
    number = float(m.group(1)) * _UNITS[m.group(2) or "ns"]
    return int(round(number))


def _number(key: str, value: Any) -> Any:
    if key in DURATION_KEYS:
        return parse_duration(value)
    return value


def config_to_dict(config: SimConfig) -> dict:
    return {
        "boards": [
            {
                "id": b.id,
                "role": b.role,
                "time_slice": b.time_slice,
                "tse_offset": b.tse_offset,
                "authorized_hypercalls": sorted(b.authorized_hypercalls),
                **({"enforced_switch_duration": b.enforced_switch_duration}
                   if b.enforced_switch_duration is not None else {}),
            }
            for b in config.boards
        ],
        "speed_exponent": config.speed_exponent,
        "counter_freq": config.counter_freq,
        "tick_frequency": config.tick_frequency,
        "enforced_switch_duration": config.enforced_switch_duration,
        "base_switch_cost": config.base_switch_cost,
        "tick_cost": config.tick_cost,
        "stall_absorption": config.stall_absorption,
        "hypercalls": {
            k: {"base_cost": c.base_cost, "cache_flush_penalty": c.cache_flush_penalty,
                "critical_section": c.critical_section}
            for k, c in sorted(config.hypercalls.costs.items())
        },
        "jitter": {
            "kind": config.jitter.kind,
            "magnitude": config.jitter.magnitude,
            "tail_probability": config.jitter.tail_probability,
            "tail_magnitude": config.jitter.tail_magnitude,
        },
        "seed": config.seed,
        "sim_duration": config.sim_duration,
    }


def config_from_dict(d: dict) -> SimConfig:
    errors: list[tuple[str, str]] = []
    known = {f.name for f in fields(SimConfig)} - {"major_frame", "slice_starts"}
    for key in d:
        if key not in known:
            errors.append((key, "unknown config key"))
    if errors:
        raise ConfigError(errors)

    kwargs: dict[str, Any] = {}
    try:
        for key, conv in _SIM_SCALARS.items():
            if key in d:
                kwargs[key] = conv(_number(key, d[key]))
        boards = []
        board_keys = {f.name for f in fields(VirtualBoardSpec)}
        for i, b in enumerate(d.get("boards", [])):
            extra = set(b) - board_keys
            if extra:
                errors.append((f"boards[{i}]", f"unknown keys {sorted(extra)}"))
                continue
            bk = {k: _number(k, v) for k, v in b.items()}
            if "authorized_hypercalls" in bk:
                bk["authorized_hypercalls"] = frozenset(bk["authorized_hypercalls"])
            boards.append(VirtualBoardSpec(**bk))
        kwargs["boards"] = boards
        if "hypercalls" in d:
            base = HypercallModel().costs
            for kind, spec in d["hypercalls"].items():
                spec = {k: _number(k, v) for k, v in spec.items()}
                prev = base.get(kind, HypercallCost(0))
                base[kind] = HypercallCost(
                    spec.get("base_cost", prev.base_cost),
                    spec.get("cache_flush_penalty", prev.cache_flush_penalty),
                    spec.get("critical_section", prev.critical_section),
                )
            kwargs["hypercalls"] = HypercallModel(base)
        if "jitter" in d:
            j = {k: _number(k, v) for k, v in d["jitter"].items()}
            extra = set(j) - {f.name for f in fields(JitterModel)}
            if extra:
                errors.append(("jitter", f"unknown keys {sorted(extra)}"))
            else:
                kwargs["jitter"] = JitterModel(**j)
    except (TypeError, ValueError) as exc:
        errors.append(("config", str(exc)))
    if errors:
        raise ConfigError(errors)
    return SimConfig(**kwargs)


def load_config(path) -> SimConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    return config_from_dict(data)


def save_config(config: SimConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_dict(config), sort_keys=False))
    return path


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Set dotted-path keys (``jitter.kind=none``, ``boards.1.role=sender``) on a config dict.

    Unknown keys raise ConfigError; values are parsed as YAML scalars.
    """
    errors = []
    for item in overrides:
        if "=" not in item:
            errors.append((item, "override must be key=value"))
            continue
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node: Any = data
        parts = key.strip().split(".")
        try:
            for p in parts[:-1]:
                node = node[int(p)] if isinstance(node, list) else node[p]
            last = parts[-1]
            if isinstance(node, list):
                node[int(last)] = value
            elif last in node or (last == "enforced_switch_duration" and "role" in node):
                node[last] = value
            else:
                raise KeyError(last)
        except (KeyError, IndexError, ValueError, TypeError):
            errors.append((key, "unknown config key"))
    if errors:
        raise ConfigError(errors)
    return data
