"""Run configuration: a flat ``key = value`` file plus command-line overrides.

Example file::

    # training demo
    epochs = 40
    lr = 0.003
    widths = 8,16,32
    mc_branches = 3x7,5x11,7x21

Unknown keys are errors. A JSON report written by the CLI is also accepted
as a config source; its embedded ``config`` object is used.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .detector.model import DetectorConfig
from .dfa import DfaConfig
from .mc import BRANCHES, McConfig

OUTDIR_ENV = "FRACDET_OUTDIR"
DEFAULT_OUTDIR = "fracdet-out"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    outdir: str = ""
    # detector
    widths: tuple[int, ...] = (8, 16, 32)
    in_channels: int = 1
    with_dfa: bool = True
    with_mc: bool = True
    # DFA
    dfa_heads: int = 1
    dfa_window: int = 8
    dfa_pool_ratio: int = 4
    dfa_mlp_hidden: int = 32
    dfa_dropout: float = 0.1
    dfa_eps: float = 1e-12
    dfa_ln_eps: float = 1e-5
    # MC
    mc_reduction: int = 16
    mc_min_hidden: int = 8
    mc_branches: tuple[tuple[int, int], ...] = BRANCHES
    # training demo
    scenes: int = 200
    image_size: int = 64
    epochs: int = 40
    lr: float = 0.003
    batch_size: int = 4
    heatmap_samples: int = 4
    # verification tolerances
    grad_step: float = 1e-5
    grad_tol: float = 1e-4
    grad_seeds: int = 10
    oracle_tol: float = 1e-12
    attention_oracle_tol: float = 1e-10
    softmax_tol: float = 1e-12
    norm_tol: float = 1e-10
    separability_tol: float = 1e-10

    TOLERANCE_KEYS = (
        "grad_step", "grad_tol", "grad_seeds", "oracle_tol", "attention_oracle_tol",
        "softmax_tol", "norm_tol", "separability_tol",
    )

    def __post_init__(self):
        if not self.outdir:
            self.outdir = os.environ.get(OUTDIR_ENV) or DEFAULT_OUTDIR
        for name, low in (("scenes", 1), ("image_size", 8), ("epochs", 1), ("batch_size", 1), ("grad_seeds", 1)):
            if getattr(self, name) < low:
                raise ConfigError(f"{name} must be >= {low}")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        try:
            self.detector_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # --- derived configs -------------------------------------------------

    def detector_config(self, **changes) -> DetectorConfig:
        cfg = DetectorConfig(
            widths=self.widths, with_dfa=self.with_dfa, with_mc=self.with_mc, in_channels=self.in_channels,
            dfa_heads=self.dfa_heads, dfa_window=self.dfa_window, dfa_pool_ratio=self.dfa_pool_ratio,
            dfa_mlp_hidden=self.dfa_mlp_hidden, dfa_dropout=self.dfa_dropout, dfa_eps=self.dfa_eps,
            dfa_ln_eps=self.dfa_ln_eps, mc_reduction=self.mc_reduction, mc_min_hidden=self.mc_min_hidden,
            mc_branches=self.mc_branches,
        )
        cfg.dfa_config()
        cfg.mc_config()
        return dataclasses.replace(cfg, **changes) if changes else cfg

    def dfa_config(self, channels: int) -> DfaConfig:
        return dataclasses.replace(self.detector_config().dfa_config(), channels=channels)

    def mc_config(self, channels: int) -> McConfig:
        return dataclasses.replace(self.detector_config().mc_config(), channels=channels)

    def tolerances(self) -> dict:
        return {k: getattr(self, k) for k in self.TOLERANCE_KEYS}

    # --- (de)serialisation ----------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "mc_branches":
                v = [list(b) for b in v]
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(f.name, getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_values(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = convert(key, known[key].type, raw)
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] | tuple = ()) -> "RunConfig":
        values: dict = {}
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            values.update(parse_text(text))
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            values[key.strip()] = value.strip()
        return cls.from_values(values)


def parse_text(text: str) -> dict:
    """Raw key/value pairs from a config file or a JSON report."""
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc
        doc = doc.get("config", doc)
        if not isinstance(doc, dict):
            raise ConfigError("JSON config must be an object")
        return dict(doc)
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


def _parse_bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    s = str(raw).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def convert(key: str, annotation: str, raw):
    """Coerce a raw string (or JSON value) to the field's type."""
    try:
        if key == "mc_branches":
            if isinstance(raw, str):
                pairs = [p.strip().lower().split("x") for p in raw.split(",") if p.strip()]
            else:
                pairs = raw
            out = tuple((int(k), int(n)) for k, n in pairs)
            if not out or min(min(p) for p in out) < 1:
                raise ValueError("branches need positive kernel sizes")
            return out
        if annotation.startswith("tuple"):
            items = raw.split(",") if isinstance(raw, str) else raw
            return tuple(int(v) for v in items)
        if annotation == "bool":
            return _parse_bool(raw)
        if annotation == "int":
            if isinstance(raw, float) or (isinstance(raw, str) and not raw.strip().lstrip("-").isdigit()):
                raise ValueError(f"not an integer: {raw!r}")
            return int(raw)
        if annotation == "float":
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def format_value(key: str, value) -> str:
    if key == "mc_branches":
        return ",".join(f"{k}x{n}" for k, n in value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)
