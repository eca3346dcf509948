"""Pipeline configuration: INI-style sections of typed key=value pairs.

Unknown sections or keys are rejected with their location so a typo in a
config file cannot silently fall back to a default. CLI flags override
config values; the config path comes from --config or DERMPIPE_CONFIG.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class PreprocessSection:
    threshold: float = 0.04
    p: float = 6.0
    target: int = 600
    inset: float = 1.0
    ratio_threshold: float = 2.0


@dataclass
class FoldsSection:
    m: int = 5
    seed: int = 0


@dataclass
class LossSection:
    k: float = 1.0


@dataclass
class HeadSection:
    f: int = 0          # 0 = take the feature dimension from the feature store
    h: int = 256
    d: int = 1024
    epochs: int = 50
    learning_rate: float = 1e-5
    batch_size: int = 20
    dropout_p: float = 0.4
    meta_dropout_p: float = 0.1
    eval_every: int = 5
    seed: int = 0


@dataclass
class TtaSection:
    mode: str = "ss"    # "ss" | "rr"
    crop: int = 224
    input_size: int = 224
    scales: str = "1.0,0.875,0.75,0.625"


@dataclass
class EnsembleSection:
    guard: int = 20
    scoring: str = "pooled"  # "pooled" | "perfold"


@dataclass
class PipelineConfig:
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    folds: FoldsSection = field(default_factory=FoldsSection)
    loss: LossSection = field(default_factory=LossSection)
    head: HeadSection = field(default_factory=HeadSection)
    tta: TtaSection = field(default_factory=TtaSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)


_SECTIONS = {f.name: f.default_factory for f in fields(PipelineConfig)}


def load_config(path) -> PipelineConfig:
    """Parse and validate a config file; raise ConfigError with location info."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    cfg = PipelineConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        target = getattr(cfg, section)
        known = {f.name: f.type for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{path}: unknown key [{section}] {key}")
            current = getattr(target, key)
            try:
                if isinstance(current, bool):
                    value = raw.strip().lower() in ("1", "true", "yes", "on")
                elif isinstance(current, int):
                    value = int(raw)
                elif isinstance(current, float):
                    value = float(raw)
                else:
                    value = raw.strip()
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for [{section}] {key}: {exc}") from exc
            setattr(target, key, value)
    _validate(cfg, path)
    return cfg


def _validate(cfg: PipelineConfig, path) -> None:
    pre = cfg.preprocess
    if not 0.0 < pre.threshold < 1.0:
        raise ConfigError(f"{path}: [preprocess] threshold must be in (0, 1)")
    if pre.p < 1.0:
        raise ConfigError(f"{path}: [preprocess] p must be >= 1")
    if not 0.0 < pre.inset <= 1.0:
        raise ConfigError(f"{path}: [preprocess] inset must be in (0, 1]")
    if pre.target < 1:
        raise ConfigError(f"{path}: [preprocess] target must be positive")
    if cfg.folds.m < 2:
        raise ConfigError(f"{path}: [folds] m must be at least 2")
    if cfg.loss.k < 0.0:
        raise ConfigError(f"{path}: [loss] k must be nonnegative")
    if cfg.tta.mode not in ("ss", "rr"):
        raise ConfigError(f"{path}: [tta] mode must be ss or rr")
    if cfg.ensemble.scoring not in ("pooled", "perfold"):
        raise ConfigError(f"{path}: [ensemble] scoring must be pooled or perfold")
    head = cfg.head
    if min(head.h, head.d, head.epochs, head.batch_size, head.eval_every) < 1:
        raise ConfigError(f"{path}: [head] sizes and schedule values must be positive")
    for key in ("dropout_p", "meta_dropout_p"):
        if not 0.0 <= getattr(head, key) <= 1.0:
            raise ConfigError(f"{path}: [head] {key} must be in [0, 1]")


def rr_scales(cfg: PipelineConfig) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in cfg.tta.scales.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad [tta] scales {cfg.tta.scales!r}: {exc}") from exc
