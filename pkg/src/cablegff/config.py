"""Experiment configuration: sectioned ``key = value`` text or JSON.

Every key is declared in :data:`SCHEMA` with a type and a default; unknown
sections or keys are rejected with the line where they appear. Values may
be overridden by environment variables ``CABLEGFF_<SECTION>_<KEY>`` (and the
shortcuts ``CABLEGFF_SEED``, ``CABLEGFF_REPLICAS``, ``CABLEGFF_OUT``,
``CABLEGFF_THREADS``), then by command-line flags.
"""
from __future__ import annotations

import configparser
import copy
import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .cable import TruncationConstants

ENV_PREFIX = "CABLEGFF_"
_TC = TruncationConstants()

KINDS = ("verify-iso", "estimate-hstar", "cable-contrast", "flip", "renorm-cert", "decouple",
         "connectivity", "psi-growth", "laplace-check")


def _ints(s):
    return [int(x) for x in _split(s)]


def _floats(s):
    return [float(x) for x in _split(s)]


def _split(s):
    if isinstance(s, (list, tuple)):
        return list(s)
    return [x for x in re.split(r"[,\s]+", str(s).strip()) if x]


# section -> key -> (parser, default)
SCHEMA = {
    "experiment": {
        "kind": (str, None),
        "d": (int, 3),
        "seed": (int, 0),
        "replicas": (int, 400),
        "threads": (int, 1),
        "out": (str, "out"),
    },
    "sizes": {
        "L": (_ints, [16, 32, 64]),
        "window": (int, 12),
        "R": (int, 8),
        "T": (_ints, [64, 256, 1024]),
        "thickness": (int, 4),
        "box_side": (int, 4),
        "separation": (int, 8),
    },
    "levels": {
        "h": (_floats, [round(0.02 * i, 2) for i in range(0, 41)]),
        "u": (_floats, [0.25, 1.0]),
        "eps": (_floats, [0.1, 0.2, 0.3]),
        "h_flip": (_floats, [0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5]),
    },
    "constants": {
        "C0": (float, _TC.C0),
        "c0": (float, _TC.c0),
        "C1": (float, _TC.C1),
        "c1": (float, _TC.c1),
        "C1p": (float, _TC.C1p),
        "c1p": (float, _TC.c1p),
        "delta": (float, 1.0 / 6.0),
        "halo_factor": (float, 2.0),
        "buffer": (float, 0.25),
    },
    "flip": {
        "boundary_samples": (int, 200),
        "inner_replicas": (int, 20000),
    },
    "iso": {
        "sign_replicas": (int, 20000),
        "sign_window": (int, 10),
    },
    "renorm": {
        "L0": (int, 1),
        "l0": (int, 2),
        "l": (int, 2),
        "n_max": (int, 2),
        "q": (float, 0.02),
        "K": (float, 2.0),
        "paths": (int, 20),
        "grids": (int, 200),
    },
    "decouple": {
        "eps": (float, 0.25),
        "u": (float, 1.0),
        "gff_replicas": (int, 20000),
    },
    "growth": {
        "u": (float, 0.25),
        "eps": (float, 1.0 / 3.0),
        "iterates": (int, 0),
    },
    "laplace": {
        "potentials": (int, 5),
        "normalization_replicas": (int, 1000),
    },
    "bootstrap": {
        "n_boot": (int, 1000),
    },
}

# keys that do not affect numbers and are left out of the hash
_UNHASHED = {("experiment", "out"), ("experiment", "threads")}


class ConfigError(ValueError):
    """Invalid configuration; the message names the file and line when known."""


@dataclass
class ExperimentConfig:
    values: dict
    source: Optional[str] = None
    overrides: dict = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def kind(self) -> str:
        return self.values["experiment"]["kind"]

    @property
    def seed(self) -> int:
        return self.values["experiment"]["seed"]

    @property
    def replicas(self) -> int:
        return self.values["experiment"]["replicas"]

    @property
    def d(self) -> int:
        return self.values["experiment"]["d"]

    def to_json(self) -> dict:
        return copy.deepcopy(self.values)

    def hash(self) -> str:
        v = {s: {k: x for k, x in kv.items() if (s, k) not in _UNHASHED} for s, kv in self.values.items()}
        return hashlib.sha256(json.dumps(v, sort_keys=True).encode()).hexdigest()[:16]


def defaults() -> dict:
    return {s: {k: copy.deepcopy(d) for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}


def _line_of(text: str, section: Optional[str], key: Optional[str]) -> Optional[int]:
    cur = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            cur = m.group(1).strip()
            if key is None and cur == section:
                return i
            continue
        if key is not None and cur == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return i
    return None


def _set(values: dict, section: str, key: str, raw, where: str):
    if section not in SCHEMA:
        raise ConfigError(f"{where}: unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{where}: unknown key '{key}' in section [{section}]")
    parser = SCHEMA[section][key][0]
    try:
        values[section][key] = parser(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: bad value for {section}.{key}: {exc}") from None


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse sectioned ``key = value`` text or JSON into validated values."""
    values = defaults()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: top level must be an object of sections")
        for sec, kv in data.items():
            if not isinstance(kv, dict):
                raise ConfigError(f"{source}: section '{sec}' must be an object")
            for k, raw in kv.items():
                _set(values, sec, k, raw, f"{source}: {sec}.{k}")
    else:
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        for sec in cp.sections():
            for k, raw in cp.items(sec):
                line = _line_of(text, sec, k) or _line_of(text, sec, None)
                _set(values, sec, k, raw, f"{source}:{line}")
    return values


def validate(values: dict, source: str = "<config>") -> None:
    kind = values["experiment"]["kind"]
    if kind is None:
        raise ConfigError(f"{source}: experiment.kind is required (one of {', '.join(KINDS)})")
    if kind not in KINDS:
        raise ConfigError(f"{source}: unknown experiment kind '{kind}' (expected one of {', '.join(KINDS)})")
    d = values["experiment"]["d"]
    if d < 3:
        raise ConfigError(f"{source}: d={d} rejected: the random walk must be transient, which needs d >= 3")
    if values["experiment"]["replicas"] < 1:
        raise ConfigError(f"{source}: replicas must be positive")
    if values["experiment"]["threads"] < 1:
        raise ConfigError(f"{source}: threads must be positive")
    for name in ("L", "T"):
        if any(x < 1 for x in values["sizes"][name]):
            raise ConfigError(f"{source}: sizes.{name} entries must be positive")
    if any(u <= 0 for u in values["levels"]["u"]):
        raise ConfigError(f"{source}: levels.u entries must be positive")


def env_overrides(environ=None) -> dict:
    """Collect ``CABLEGFF_*`` variables as ``{(section, key): raw}``."""
    environ = os.environ if environ is None else environ
    short = {"SEED": ("experiment", "seed"), "REPLICAS": ("experiment", "replicas"),
             "OUT": ("experiment", "out"), "THREADS": ("experiment", "threads"),
             "KIND": ("experiment", "kind"), "D": ("experiment", "d")}
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):]
        if rest in short:
            out[short[rest]] = raw
            continue
        for sec in SCHEMA:
            pre = sec.upper() + "_"
            if rest.startswith(pre):
                key = rest[len(pre):]
                match = [k for k in SCHEMA[sec] if k.upper() == key]
                if not match:
                    raise ConfigError(f"environment variable {name}: unknown key in section [{sec}]")
                out[(sec, match[0])] = raw
                break
        else:
            raise ConfigError(f"environment variable {name}: unknown section")
    return out


def load_config(path=None, text: Optional[str] = None, overrides: Optional[dict] = None,
                environ=None) -> ExperimentConfig:
    """Load, apply environment then explicit overrides, and validate.

    ``overrides`` maps ``(section, key)`` to raw values (command-line flags).
    """
    if text is None and path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"{path}: no such file")
        text = p.read_text()
    source = str(path) if path is not None else "<config>"
    values = parse_text(text or "", source)
    applied = {}
    for (sec, k), raw in env_overrides(environ).items():
        _set(values, sec, k, raw, f"environment {ENV_PREFIX}{sec.upper()}_{k.upper()}")
        applied[f"{sec}.{k}"] = raw
    for (sec, k), raw in (overrides or {}).items():
        if raw is None:
            continue
        _set(values, sec, k, raw, f"command line {sec}.{k}")
        applied[f"{sec}.{k}"] = raw
    validate(values, source)
    return ExperimentConfig(values, source, applied)
