"""Key-value configuration files (INI syntax via configparser).

Keys may appear under ``[train]``, ``[ekf]``, ``[plant]`` or ``[exchange]``; a
file without section headers is treated as a single ``[train]`` section.
Example::

    [train]
    episodes = 200
    gamma = 0.95
    hidden = 64, 64
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .observer import EkfConfig
from .plant import PlantParams
from .rl import ENV_DEFAULTS, TrainConfig


def read_config(path) -> dict[str, dict[str, str]]:
    text = Path(path).read_text()
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError:
        cp.read_string("[train]\n" + text)
    return {name: dict(cp[name]) for name in cp.sections()}


def _coerce(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or default is None:
        return None if raw.strip().lower() == "none" else float(raw)
    if isinstance(default, tuple):
        parts = [v.strip() for v in raw.split(",") if v.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(v) for v in parts)
    return raw


def _build(cls, values: dict[str, str], **extra):
    base = cls(**extra)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: _coerce(v, getattr(base, k)) for k, v in values.items()}
    return dataclasses.replace(base, **kwargs)


def plant_params(cfg: dict) -> PlantParams:
    return _build(PlantParams, cfg.get("plant", {}))


def ekf_config(cfg: dict) -> EkfConfig:
    return _build(EkfConfig, cfg.get("ekf", {}))


def train_config(cfg: dict, env: str | None = None) -> TrainConfig:
    """``[train]`` keys layered over the per-environment defaults when ``env`` is given."""
    base = ENV_DEFAULTS[env] if env is not None else {}
    return _build(TrainConfig, cfg.get("train", {}), params=plant_params(cfg), **base)


def exchange_options(cfg: dict) -> dict:
    sec = cfg.get("exchange", {})
    unknown = set(sec) - {"poll", "budget"}
    if unknown:
        raise ValueError(f"unknown exchange keys: {sorted(unknown)}")
    return {"poll": float(sec.get("poll", 0.05)), "budget": float(sec.get("budget", 10.0))}


def write_sections(path, sections: dict[str, dict]) -> None:
    cp = configparser.ConfigParser()
    for name, values in sections.items():
        cp[name] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in values.items()}
    with open(path, "w") as fh:
        cp.write(fh)
