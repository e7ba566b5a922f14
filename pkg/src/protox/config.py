"""Pipeline configuration: TOML file + ``section.key=value`` overrides -> typed dataclasses."""

from __future__ import annotations

import hashlib
import json
import sys
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .corridor import CorridorConfig, ScriptedExpert, config_from_ascii
from .errors import ConfigurationError
from .pretrain import EncoderConfig, MinerConfig, PretrainConfig
from .training import ObjectiveWeights, TrainConfig


@dataclass(frozen=True)
class EnvSection:
    width: int = 96
    height: int = 8
    view_tiles: int = 8
    agent_column: int = 1
    render_size: tuple[int, int] = (64, 64)
    obstacle_kinds: tuple[str, ...] = ("hole", "pipe")
    first_obstacle: int = 6
    min_gap: int = 8
    max_gap: int = 40
    level: str = ""  # ASCII map; empty means procedural levels
    lookahead: int = 3


@dataclass(frozen=True)
class DataSection:
    n_pairs: int = 12500
    stack_depth: int = 4
    train_fraction: float = 0.8


@dataclass(frozen=True)
class PretrainSection:
    epochs: int = 6
    batch_size: int = 128
    learning_rate: float = 1e-3
    kl_weight: float = 1.0
    anchors_per_epoch: int = 0  # 0 means every state anchors once per epoch
    delta_time: int = 10
    m1: float = 1.0
    m2: float = 1.0
    widths: tuple[int, ...] = (16, 32, 32)
    latent_channels: int = 16


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    projection_period: int = 25
    initial_K: int = 25
    rep_sample_size: int = 4096
    beta: float = 0.05
    lambda_sep: float = 0.1
    lambda_clst: float = 0.1
    lambda_rep: float = 0.01
    lambda_iso: float = 1.0


@dataclass(frozen=True)
class ExplainSection:
    n_states: int = 4
    top_k: int = 5
    patch_size: int = 8
    stride: int = 4
    keep_fraction: float = 0.95
    mask_value: str = "mean"
    overlay_n: int = 30
    n_probes: int = 8


@dataclass(frozen=True)
class PathsSection:
    out: str = "runs/default"


@dataclass(frozen=True)
class PipelineConfig:
    env: EnvSection = field(default_factory=EnvSection)
    data: DataSection = field(default_factory=DataSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainSection = field(default_factory=TrainSection)
    explain: ExplainSection = field(default_factory=ExplainSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # derived objects ---------------------------------------------------------

    def corridor(self, seed: int = 0) -> CorridorConfig:
        e = self.env
        common = dict(
            height=e.height,
            view_tiles=e.view_tiles,
            agent_column=e.agent_column,
            render_size=tuple(e.render_size),
            seed=seed,
        )
        if e.level:
            cfg = config_from_ascii(e.level, **common)
        else:
            cfg = CorridorConfig(
                width=e.width,
                obstacle_kinds=tuple(e.obstacle_kinds),
                first_obstacle=e.first_obstacle,
                min_gap=e.min_gap,
                max_gap=e.max_gap,
                **common,
            )
        cfg.validate()
        return cfg

    def expert(self) -> ScriptedExpert:
        return ScriptedExpert(lookahead=self.env.lookahead)

    def encoder_config(self) -> EncoderConfig:
        h, w = self.env.render_size
        cfg = EncoderConfig(self.data.stack_depth, (h, w, 3), tuple(self.pretrain.widths), self.pretrain.latent_channels)
        cfg.validate()
        return cfg

    def miner_config(self) -> MinerConfig:
        p = self.pretrain
        cfg = MinerConfig(delta_time=p.delta_time, m1=p.m1, m2=p.m2)
        cfg.validate()
        return cfg

    def pretrain_config(self, seed: int) -> PretrainConfig:
        p = self.pretrain
        return PretrainConfig(p.epochs, p.batch_size, p.learning_rate, p.kl_weight, p.anchors_per_epoch or None, seed)

    def objective_weights(self) -> ObjectiveWeights:
        t = self.train
        return ObjectiveWeights(t.lambda_sep, t.lambda_clst, t.lambda_rep, t.lambda_iso)

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(t.epochs, t.batch_size, t.learning_rate, t.projection_period, seed, t.initial_K, t.rep_sample_size)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


SECTIONS = {f.name: f.default_factory for f in fields(PipelineConfig)}


def substream_seed(seed: int, name: str) -> int:
    """Independent seed for a named pipeline stage, derived from the global seed."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where} must be an array, got {value!r}")
        if default and any(type(v) is not type(default[0]) for v in value):
            raise ConfigurationError(f"{where} entries must be {type(default[0]).__name__}, got {value!r}")
        return tuple(value)
    raise ConfigurationError(f"cannot set {where}")  # pragma: no cover


def from_mapping(data: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base or PipelineConfig()
    updates = {}
    for section, values in data.items():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigurationError(f"config section {section!r} must be a table")
        current = getattr(cfg, section)
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        changes = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigurationError(f"unknown config key {section}.{key}")
            changes[key] = _coerce(section, key, value, known[key])
        updates[section] = replace(current, **changes)
    return replace(cfg, **updates)


def parse_toml(text: str, source: str = "<config>") -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # the decoder's message carries "(at line L, column C)"
        raise ConfigurationError(f"{source}: {exc}") from None


def load_config(path: str | Path | None = None, overrides: list[str] | tuple[str, ...] = ()) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        cfg = from_mapping(parse_toml(p.read_text(encoding="utf-8"), str(p)), cfg)
    for item in overrides:
        cfg = from_mapping(parse_override(item), cfg)
    return cfg


def parse_override(item: str) -> dict:
    """``section.key=value`` -> {section: {key: value}}; the value is read as TOML, else as a bare string."""
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
    lhs, raw = item.split("=", 1)
    parts = lhs.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigurationError(f"override key {lhs!r} must look like section.key")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return {parts[0]: {parts[1]: value}}


def describe_keys() -> str:
    """One line per configurable key with its default, for --help."""
    cfg = PipelineConfig()
    lines = []
    for section in SECTIONS:
        for f in fields(getattr(cfg, section)):
            value = getattr(getattr(cfg, section), f.name)
            shown = json.dumps(list(value) if isinstance(value, tuple) else value)
            lines.append(f"  {section}.{f.name} = {shown}")
    return "\n".join(lines)
