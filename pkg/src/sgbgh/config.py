"""Run configuration: ``key = value`` files merged with command-line overrides."""
from __future__ import annotations

import zlib
from dataclasses import fields
from typing import Dict

import numpy as np

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def derive_seed(seed: int, label: str) -> int:
    """Stable per-subsystem seed forked from the run seed."""
    rng = np.random.default_rng([int(seed), zlib.crc32(label.encode())])
    return int(rng.integers(2 ** 31))


def read_config(path) -> Dict[str, str]:
    out: Dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def write_config(values: Dict[str, object], path) -> None:
    with open(path, "w") as fh:
        for key in sorted(values):
            val = values[key]
            if val is None:
                continue
            if isinstance(val, (tuple, list)):
                val = ",".join(repr(v) for v in val)
            fh.write(f"{key} = {val}\n")


def _coerce(value, kind):
    if value is None or not isinstance(value, str):
        return value
    if kind is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    return kind(value)


_MODEL_TYPES = {"dim": int, "layers": int, "fourier_h": float, "fourier_n": int}
_TRAIN_TYPES = {"mode": str, "batch_size": int, "learning_rate": float, "epochs": int, "tau": float,
                "gamma": float, "beta0": float, "beta1": float, "reg": float, "centers": int,
                "kmeans_iters": int, "sampler": str, "eval_every": int, "patience": int,
                "reg_mean": bool}
RUN_TYPES = {"seed": int, "split_ratio": float, "edges": str, "out": str, "remap": bool,
             "exclude_train": bool}
KNOWN_KEYS = set(_MODEL_TYPES) | set(_TRAIN_TYPES) | set(RUN_TYPES) | {"layer_weights"}


def resolve(file_values: Dict[str, str], overrides: Dict[str, object]) -> Dict[str, object]:
    """Merge file values with overrides (overrides win) and type-check them."""
    merged: Dict[str, object] = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(merged) - KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    types = {**_MODEL_TYPES, **_TRAIN_TYPES, **RUN_TYPES}
    out: Dict[str, object] = {}
    try:
        for key, val in merged.items():
            if key == "layer_weights":
                if isinstance(val, str):
                    val = tuple(float(x) for x in val.split(",") if x.strip())
                out[key] = tuple(val) if val else None
            else:
                out[key] = _coerce(val, types[key])
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    out.setdefault("seed", 0)
    out.setdefault("split_ratio", 0.8)
    return out


def build_configs(values: Dict[str, object]):
    """Instantiate ``(ModelConfig, TrainConfig)``; returns them plus the fully resolved dict."""
    seed = int(values.get("seed", 0))
    model_kw = {k: values[k] for k in _MODEL_TYPES if k in values}
    if values.get("layer_weights"):
        model_kw["layer_weights"] = values["layer_weights"]
    train_kw = {k: values[k] for k in _TRAIN_TYPES if k in values}
    try:
        model_cfg = ModelConfig(seed=seed, **model_kw)
        train_cfg = TrainConfig(seed=seed, **train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    resolved = dict(values)
    resolved.update({f.name: getattr(model_cfg, f.name) for f in fields(model_cfg)})
    resolved.update({f.name: getattr(train_cfg, f.name) for f in fields(train_cfg)})
    return model_cfg, train_cfg, resolved
