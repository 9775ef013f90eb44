"""Flat ``key = value`` configuration files for training runs.

Keys are the fields of :class:`TrainConfig` plus those of
:class:`NetworkConfig`. Unknown keys are errors. ``init_seed`` defaults to
``seed`` when absent.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .network import NetworkConfig
from .training import TrainConfig

_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig) if f.name != "network"}
_NET_KEYS = {f.name: f for f in fields(NetworkConfig)}
VALID_KEYS = tuple(sorted({**_TRAIN_KEYS, **_NET_KEYS}))

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


def _convert(key: str, raw: str, annotation):
    # annotations are strings here (postponed evaluation in the dataclass modules)
    kind = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", str(annotation))
    try:
        if kind.startswith("tuple"):
            items = [t.strip() for t in raw.split(",") if t.strip()]
            return tuple(int(t) for t in items) if "int" in kind else tuple(items)
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r} (expected {kind})") from None


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    train_kw: dict = {}
    net_kw: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in _TRAIN_KEYS:
            train_kw[key] = _convert(key, raw, _TRAIN_KEYS[key].type)
        elif key in _NET_KEYS:
            net_kw[key] = _convert(key, raw, _NET_KEYS[key].type)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
    net_kw.setdefault("init_seed", train_kw.get("seed", 0))
    try:
        network = NetworkConfig(**net_kw)
        return TrainConfig(**train_kw, network=network)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: TrainConfig) -> str:
    """Serialise every key, so the text alone reproduces ``config``."""
    lines = [f"{name} = {_format(getattr(config, name))}" for name in _TRAIN_KEYS]
    lines += [f"{name} = {_format(getattr(config.network, name))}" for name in _NET_KEYS]
    return "\n".join(lines) + "\n"

