"""Experiment configuration: one INI file with [sim], [isp], [iit], [am], [experiment] sections.

Every key is optional; missing keys take the dataclass defaults documented in
``default_config_text()``.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..am import AmConfig
from ..iit import CqlConfig
from ..isp import IspConfig
from ..sim import ConfigError, SimConfig

SECTIONS = ("sim", "isp", "iit", "am", "experiment")


@dataclass
class ExperimentSettings:
    seeds: int = 10            # evaluation populations
    eval_seed_offset: int = 1000
    burn_in_days: int = 14     # last-exit days before any data window
    rct_days: int = 7          # randomised page-assignment window for the uplift model
    log_days: int = 7          # logging window for the intraday models
    logging_epsilon: float = 0.5  # share of logged entries given a uniformly random page
    eval_days: int = 7
    train_ratio: float = 0.8
    effective_seconds: float = 10.0

    def __post_init__(self):
        if self.seeds < 1 or self.eval_days < 1 or self.burn_in_days < 1:
            raise ConfigError("seeds, eval_days and burn_in_days must be positive")
        if not 0.0 <= self.logging_epsilon <= 1.0:
            raise ConfigError("logging_epsilon must lie in [0, 1]")


@dataclass
class PipelineConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    isp: IspConfig = field(default_factory=IspConfig)
    iit: CqlConfig = field(default_factory=CqlConfig)
    am: AmConfig = field(default_factory=AmConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    def to_dict(self) -> dict:
        return {s: dataclasses.asdict(getattr(self, s)) for s in SECTIONS}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Set every component seed; the simulator seed also fixes the training population."""
        return PipelineConfig(
            sim=dataclasses.replace(self.sim, seed=seed),
            isp=dataclasses.replace(self.isp, seed=seed),
            iit=dataclasses.replace(self.iit, seed=seed),
            am=dataclasses.replace(self.am, seed=seed),
            experiment=self.experiment,
        )


def _coerce(raw: str, typ):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(str(typ), str)
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {typ.__name__}") from exc


def _build(cls, items: dict[str, str], section: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for key, raw in items.items():
        if key not in fields:
            raise ConfigError(f"unknown key [{section}] {key}")
        kw[key] = _coerce(raw, fields[key].type)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


_CLASSES = {"sim": SimConfig, "isp": IspConfig, "iit": CqlConfig, "am": AmConfig, "experiment": ExperimentSettings}


def parse_config(text: str) -> PipelineConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    parts = {s: _build(_CLASSES[s], dict(cp[s]) if cp.has_section(s) else {}, s) for s in SECTIONS}
    return PipelineConfig(**parts)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def default_config_text() -> str:
    """The full default configuration as INI text."""
    cfg = PipelineConfig()
    lines = []
    for s in SECTIONS:
        lines.append(f"[{s}]")
        for k, v in dataclasses.asdict(getattr(cfg, s)).items():
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
