"""Sectioned run configuration: INI file, then environment, then flags.

Every key has a typed default below. Unknown sections or keys are rejected
with the offending line number, and the merged result is written back out
next to the run's outputs.
"""
from __future__ import annotations

import configparser
import io
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError

OUTPUT_ENV = "M3FGM_OUTPUT_DIR"


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    return None if text.strip() == "" else float(text)


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    default: Any
    help: str


SCHEMA: dict[str, dict[str, Field]] = {
    "data": {
        "traces": Field(str, "", "trace CSV (timestamp,<sensor ids>)"),
        "distances": Field(str, "", "distance CSV (from,to,distance)"),
        "S": Field(int, 12, "history length"),
        "T": Field(int, 12, "forecast horizon"),
        "split": Field(_floats, (0.7, 0.1, 0.2), "train,val,test fractions in time order"),
        "per_sensor": Field(_bool, False, "standardize each sensor separately"),
    },
    "synth": {
        "n_clients": Field(int, 16, "synthetic sensors"),
        "length": Field(int, 600, "synthetic time steps"),
        "clusters": Field(int, 2, "planted clusters"),
        "noise": Field(float, 0.1, "observation noise relative to the signal"),
        "max_lag": Field(int, 2, "largest per-sensor lag behind the cluster signal"),
        "seed": Field(int, 0, "generator seed"),
    },
    "graph": {
        "kappa": Field(float, 0.1, "kernel weights below this are dropped"),
        "M": Field(int, 0, "cluster count; 0 means ceil(sqrt(N))"),
        "seed": Field(int, 0, "k-means seed"),
    },
    "model": {
        "H": Field(int, 64, "temporal embedding size"),
        "H_s": Field(int, 64, "spatial embedding size (must equal H)"),
        "D": Field(int, 1, "features per sensor"),
        "layers": Field(int, 1, "encoder GRU layers"),
    },
    "train": {
        "R_g": Field(int, 10, "global rounds"),
        "R_c": Field(int, 1, "client epochs per round"),
        "R_s": Field(int, 1, "server epochs per round"),
        "lr": Field(float, 1e-3, "Adam learning rate"),
        "batch": Field(int, 32, "windows per minibatch"),
        "mr": Field(float, 0.25, "training mask rate"),
        "seed": Field(int, 0, "training seed"),
        "weighted_fedavg": Field(_bool, False, "weight FedAvg by local window count"),
        "eval_every": Field(int, 0, "validation RMSE every k rounds; 0 disables"),
    },
    "eval": {
        "offline_rate": Field(_opt_float, 0.0, "fraction of clients offline at inference"),
        "offline_ids": Field(_ints, (), "explicit offline clients; overrides offline_rate"),
        "seeds": Field(_ints, (0,), "seeds for offline schedules and sweeps"),
        "split": Field(str, "test", "split to evaluate: val or test"),
        "mrs": Field(_floats, (0.1, 0.25, 0.4), "sweep mask rates"),
        "offline_rates": Field(_floats, (0.0, 0.25, 0.35), "sweep offline rates"),
    },
    "output": {
        "dir": Field(str, "runs/default", f"output directory (env {OUTPUT_ENV} overrides the file)"),
    },
}


class RunConfig:
    """Typed view over the merged configuration: ``cfg.train.lr``."""

    def __init__(self, values: dict[str, dict[str, Any]]):
        self._values = values

    def __getattr__(self, section: str):
        try:
            return _Section(self._values[section])
        except KeyError:
            raise AttributeError(section) from None

    def get(self, section: str, key: str) -> Any:
        return self._values[section][key]

    def as_dict(self) -> dict[str, dict[str, Any]]:
        return {s: dict(v) for s, v in self._values.items()}

    def dumps(self) -> str:
        lines = []
        for section, fields in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in fields:
                lines.append(f"{key} = {_fmt(self._values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    def validate(self) -> None:
        v = self._values
        if abs(sum(v["data"]["split"]) - 1.0) > 1e-9 or len(v["data"]["split"]) != 3:
            raise ConfigError("data.split needs three fractions summing to 1")
        for s, k in (("data", "S"), ("data", "T"), ("model", "H"), ("model", "D"), ("train", "R_g"),
                     ("train", "R_c"), ("train", "R_s"), ("train", "batch"), ("synth", "length")):
            if v[s][k] < 1:
                raise ConfigError(f"{s}.{k} must be >= 1")
        if v["model"]["H_s"] != v["model"]["H"]:
            raise ConfigError("model.H_s must equal model.H (residual server stream)")
        if not 0.0 <= v["train"]["mr"] <= 1.0:
            raise ConfigError("train.mr must lie in [0, 1]")
        rate = v["eval"]["offline_rate"]
        if rate is not None and not 0.0 <= rate <= 1.0:
            raise ConfigError("eval.offline_rate must lie in [0, 1]")
        if v["eval"]["split"] not in ("val", "test"):
            raise ConfigError("eval.split must be val or test")


class _Section:
    def __init__(self, values: dict[str, Any]):
        self._v = values

    def __getattr__(self, key: str):
        try:
            return self._v[key]
        except KeyError:
            raise AttributeError(key) from None


def defaults() -> dict[str, dict[str, Any]]:
    return {s: {k: f.default for k, f in fields.items()} for s, fields in SCHEMA.items()}


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
            return n
    return None


def _parse_value(section: str, key: str, raw: str, where: str) -> Any:
    try:
        return SCHEMA[section][key].parse(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {section}.{key}: {exc}") from None


def parse_text(text: str, source: str = "<config>") -> dict[str, dict[str, Any]]:
    """Values set by one INI document, validated against the schema."""
    cp = configparser.ConfigParser(interpolation=None, default_section="\0none")
    cp.optionxform = str  # keys are case-sensitive (S vs s)
    try:
        cp.read_file(io.StringIO(text), source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from None
    out: dict[str, dict[str, Any]] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}:{_line_of(text, section)}: unknown section [{section}]")
        for key, raw in cp.items(section):
            line = _line_of(text, section, key)
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}:{line}: unknown key {section}.{key}")
            out.setdefault(section, {})[key] = _parse_value(section, key, raw, f"{source}:{line}")
    return out


def load(path=None, overrides: dict[str, str] | None = None, env: dict[str, str] | None = None) -> RunConfig:
    """Merge defaults, the file at ``path``, the environment and ``overrides``.

    ``overrides`` maps ``"section.key"`` to the raw flag string.
    """
    values = defaults()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        for section, kv in parse_text(p.read_text(), str(p)).items():
            values[section].update(kv)
    env = os.environ if env is None else env
    if env.get(OUTPUT_ENV):
        values["output"]["dir"] = env[OUTPUT_ENV]
    for dotted, raw in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown option --{dotted}")
        values[section][key] = _parse_value(section, key, raw, f"--{dotted}")
    cfg = RunConfig(values)
    cfg.validate()
    return cfg


def flag_names() -> list[tuple[str, Field]]:
    return [(f"{s}.{k}", f) for s, fields in SCHEMA.items() for k, f in fields.items()]
