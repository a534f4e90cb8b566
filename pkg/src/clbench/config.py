"""Experiment configuration: INI-style ``key = value`` text with sections.

Example::

    [scenario]
    kind = class-il
    source = synthetic
    datasets = synth
    synth_classes = 8

    [strategy]
    name = icarl

    [run]
    seeds = 0,1,2,3,4
    out = results

Every key not given falls back to the defaults below; :func:`dump_config`
writes the fully-resolved configuration so runs can be reproduced.
"""
from __future__ import annotations

import configparser
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .errors import ConfigError
from .scenario import CLASS_IL, DEFAULT_DOMAIN_ORDER, KINDS, MEDMNIST_SUBSETS
from .strategies import STRATEGIES

logger = logging.getLogger(__name__)

SCENARIO_KINDS = KINDS + ("fine-grained",)


@dataclass
class ScenarioSection:
    kind: str = CLASS_IL
    source: str = "synthetic"
    datasets: Tuple[str, ...] = ("synth",)
    classes_per_task: Tuple[Tuple[int, ...], ...] = ((2, 2, 2, 2),)
    shuffle_classes: bool = False
    split_seed: int = 0
    data_dir: str = "data"
    synth_classes: Tuple[int, ...] = (8,)
    synth_train_per_class: int = 200
    synth_val_per_class: int = 20
    synth_test_per_class: int = 50
    synth_sigma: float = 12.0
    synth_image_shape: Tuple[int, ...] = (1, 8, 8)
    synth_seed: int = 1234


@dataclass
class StrategySection:
    name: Tuple[str, ...] = ("lb",)
    lam: Optional[float] = None
    temperature: float = 2.0
    exemplars_per_class: int = 20
    balanced_epochs: Optional[int] = None
    lr: float = 0.01
    momentum: float = 0.9
    fisher_samples: int = 2000
    nme: bool = True


@dataclass
class ModelSection:
    conv_filters: Tuple[int, ...] = (16, 32)
    feature_dim: int = 128
    head_hidden: int = 512


@dataclass
class TrainingSection:
    epochs: int = 20
    batch_size: int = 32
    patience: int = 5


@dataclass
class RunSection:
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    out: str = "results"
    record_timing: bool = False


@dataclass
class ExperimentConfig:
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    strategy: StrategySection = field(default_factory=StrategySection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "ExperimentConfig":
        s = self.scenario
        if s.kind not in SCENARIO_KINDS:
            raise ConfigError(f"scenario.kind: unknown kind {s.kind!r}; expected one of {SCENARIO_KINDS}")
        if s.source not in ("synthetic", "container"):
            raise ConfigError(f"scenario.source must be 'synthetic' or 'container', got {s.source!r}")
        if not s.datasets:
            raise ConfigError("scenario.datasets: at least one dataset is required")
        if s.source == "synthetic" and len(s.synth_classes) != len(s.datasets):
            raise ConfigError(f"scenario.synth_classes: {len(s.synth_classes)} entries for "
                              f"{len(s.datasets)} datasets")
        for name in self.strategy.name:
            if name not in STRATEGIES:
                raise ConfigError(f"strategy.name: unknown strategy {name!r}; expected one of {STRATEGIES}")
        if not self.run.seeds:
            raise ConfigError("run.seeds: at least one seed is required")
        if self.training.epochs < 1:
            raise ConfigError("training.epochs must be >= 1")
        if self.training.batch_size < 1:
            raise ConfigError("training.batch_size must be >= 1")
        return self

    def partitions(self) -> List[Tuple[int, ...]]:
        """Classes-per-task per dataset; published partitions fill in when omitted."""
        cpt = list(self.scenario.classes_per_task)
        if not cpt:
            return [published_partition(name) for name in self.scenario.datasets]
        if len(cpt) == len(self.scenario.datasets):
            return cpt
        if len(cpt) == 1 and len(self.scenario.datasets) > 1:
            return cpt * len(self.scenario.datasets)
        raise ConfigError(f"scenario.classes_per_task: {len(cpt)} partitions for "
                          f"{len(self.scenario.datasets)} datasets")


_SECTION_TYPES = {"scenario": ScenarioSection, "strategy": StrategySection, "model": ModelSection,
                  "training": TrainingSection, "run": RunSection}


def _parse_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(section: str, key: str, text: str, default):
    text = text.strip()
    try:
        if key == "classes_per_task":
            if text.lower() == "published":
                return ()
            return tuple(tuple(int(v) for v in part.split(",") if v.strip()) for part in text.split(";"))
        if key in ("name", "datasets"):
            return tuple(v.strip().lower() for v in text.split(",") if v.strip())
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        if key in ("lam",):
            return None if text.lower() in ("", "none", "default") else float(text)
        if key in ("balanced_epochs",):
            return None if text.lower() in ("", "none", "default") else int(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {text!r} ({exc})") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ";".join(",".join(str(v) for v in part) for part in value)
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        known = {f.name for f in dataclasses.fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown config key {key!r} in section [{section}]")
            setattr(target, key, _parse_value(section, key, raw, getattr(_SECTION_TYPES[section](), key)))
    return cfg.validate()


def parse_config(path=None, overrides: Optional[Dict[str, object]] = None) -> ExperimentConfig:
    """Load a config file (or defaults) and apply ``section.key`` overrides.

    Overrides come from command-line flags and win over file values; each
    conflict is logged.
    """
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = parse_config_text(text)
    else:
        cfg = ExperimentConfig()
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        target = getattr(cfg, section)
        if not hasattr(target, key):
            raise ConfigError(f"unknown config key {key!r} in section [{section}]")
        current = getattr(target, key)
        if isinstance(value, str):
            value = _parse_value(section, key, value, getattr(_SECTION_TYPES[section](), key))
        if path is not None and current != value:
            logger.info("flag overrides %s.%s: %r -> %r", section, key, current, value)
        setattr(target, key, value)
    return cfg.validate()


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section in _SECTION_TYPES:
        lines.append(f"[{section}]")
        for f in dataclasses.fields(getattr(cfg, section)):
            value = getattr(getattr(cfg, section), f.name)
            text = "published" if f.name == "classes_per_task" and value == () else _format_value(value)
            lines.append(f"{f.name} = {text}")
        lines.append("")
    return "\n".join(lines)


def published_partition(name: str) -> Tuple[int, ...]:
    try:
        return MEDMNIST_SUBSETS[name][4]
    except KeyError:
        raise ConfigError(f"no published partition for dataset {name!r}") from None


__all__ = ["ExperimentConfig", "ScenarioSection", "StrategySection", "ModelSection", "TrainingSection",
           "RunSection", "parse_config", "parse_config_text", "dump_config", "DEFAULT_DOMAIN_ORDER",
           "published_partition"]
