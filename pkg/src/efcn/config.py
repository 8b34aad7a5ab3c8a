"""TOML run configuration with a fixed schema.

Every key has a default; a config file and ``--set section.key=value``
overrides are layered on top.  Unknown keys and type mismatches raise
:class:`ConfigError` naming the offending key path.
"""
from __future__ import annotations

import copy
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SCHEMA = {
    "data": {
        "kind": "synthetic",          # synthetic | cifar10
        "dir": "",                    # CIFAR directory; empty means $EFCN_DATA_DIR or ./data
        "classes": 10,
        "canvas": 16,
        "pattern": 7,
        "channels": 3,
        "n_train": 5000,
        "n_test": 1000,
        "noise": 0.3,
        "standardize": True,
        "seed": 0,
    },
    "model": {
        "channels": 8,
        "dropout": 0.0,
    },
    "train": {
        "cnn_epochs": 30,
        "efcn_epochs": 20,
        "snapshots": 10,
        "cnn_lr": 0.1,
        "efcn_lr": 0.01,
        "batch_size": 250,
        "optimizer": "sgd",
        "seed": 0,
        "max_bytes": 2 * 1024 ** 3,
    },
    "probe": {
        "size": 2048,
        "power_iters": 20,
        "tol": 1e-3,
        "seed": 0,
        "hessian": True,
    },
    "interp": {
        "n": 11,
        "stiffness": 1.0,
        "steps": 100,
        "lr": 0.01,
        "batch_size": 250,
        "seed": 0,
        "tw": -1,                     # relax time of the eFCN endpoint; -1 = latest
    },
}

CHOICES = {
    ("data", "kind"): ("synthetic", "cifar10"),
    ("train", "optimizer"): ("sgd", "adam"),
}


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _check(section, key, value):
    path = f"{section}.{key}"
    if section not in SCHEMA:
        raise ConfigError(section, "unknown section")
    if key not in SCHEMA[section]:
        raise ConfigError(path, "unknown key")
    default = SCHEMA[section][key]
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(path, f"expected {type(default).__name__}, got {value!r}")
    allowed = CHOICES.get((section, key))
    if allowed and value not in allowed:
        raise ConfigError(path, f"must be one of {', '.join(allowed)}")
    return value


def merge(cfg, updates):
    for section, body in updates.items():
        if not isinstance(body, dict):
            raise ConfigError(section, "expected a table")
        for key, value in body.items():
            cfg.setdefault(section, {})
            cfg[section][key] = _check(section, key, value)
    return cfg


def parse_override(text):
    """``section.key=value`` with the value parsed as a TOML literal."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(text, "override must look like section.key=value")
    lhs, rhs = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {rhs.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()
    return {section: {key: value}}


def load_config(path=None, overrides=()):
    cfg = copy.deepcopy(SCHEMA)
    if path:
        try:
            with open(Path(path), "rb") as fh:
                merge(cfg, tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"not valid TOML ({exc})") from exc
    for text in overrides:
        merge(cfg, parse_override(text))
    return cfg


def dump_config(cfg):
    lines = []
    for section, body in cfg.items():
        lines.append(f"[{section}]")
        for key, value in body.items():
            if isinstance(value, bool):
                lit = "true" if value else "false"
            elif isinstance(value, str):
                lit = '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
            else:
                lit = repr(value)
            lines.append(f"{key} = {lit}")
        lines.append("")
    return "\n".join(lines)
