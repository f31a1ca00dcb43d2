"""Experiment configuration: a YAML document validated into dataclasses.

Top-level sections: ``paths``, ``stage_a``, ``stage_b``, ``ablation``,
``metrics`` and an optional ``synth`` (synthetic data to generate). Any
omitted key takes its default, and the defaults are the full-scale
training settings, so an empty file describes the reference setup.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .datakit import SyntheticSceneConfig, ValidationError
from .losses import StageAWeights, StageBWeights
from .nets import BACKBONES, K_MODES, RESIZERS
from .train_a import PLACEMENTS, StageAConfig
from .train_b import StageBConfig

OUTPUT_ROOT_ENV = "RESIDUALGAN_OUTPUT_ROOT"

# Owned by the ablation section, not settable under stage_a.
_ABLATION_KEYS = ("resize_placement", "resizer", "backbone", "residual", "k_mode")


class ConfigError(ValueError):
    """Schema or value error in an experiment configuration."""


@dataclass(frozen=True)
class Paths:
    output_dir: str = "runs/default"
    source_manifest: str | None = None
    target_manifest: str | None = None
    val_manifest: str | None = None
    test_manifest: str | None = None


@dataclass(frozen=True)
class Ablation:
    resize_placement: str = "in_network"
    resizer_fn: str = "bilinear"
    backbone: str = "unet"
    residual: str = "on"
    k_mode: str = "fixed"

    def __post_init__(self):
        checks = {
            "resize_placement": PLACEMENTS,
            "resizer_fn": tuple(r for r in RESIZERS if r != "none"),
            "backbone": BACKBONES,
            "residual": ("on", "off"),
            "k_mode": K_MODES,
        }
        for key, allowed in checks.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"ablation.{key} must be one of {allowed}, got {getattr(self, key)!r}")


@dataclass(frozen=True)
class MetricsOptions:
    strict: bool = False
    eval_split: str = "test"
    formats: tuple[str, ...] = ("paper_table", "json", "csv")


@dataclass(frozen=True)
class ExperimentConfig:
    paths: Paths = field(default_factory=Paths)
    stage_a: StageAConfig = field(default_factory=StageAConfig)
    stage_b: StageBConfig = field(default_factory=StageBConfig)
    ablation: Ablation = field(default_factory=Ablation)
    metrics: MetricsOptions = field(default_factory=MetricsOptions)
    synth: SyntheticSceneConfig | None = None
    sweep: dict | None = None

    def stage_a_config(self) -> StageAConfig:
        """Stage A settings with the ablation switches applied."""
        ab = self.ablation
        return dataclasses.replace(
            self.stage_a,
            resize_placement=ab.resize_placement,
            resizer=ab.resizer_fn,
            backbone=ab.backbone,
            residual=ab.residual == "on",
            k_mode=ab.k_mode,
        )

    def output_dir(self) -> Path:
        p = Path(self.paths.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in _ABLATION_KEYS:
            d["stage_a"].pop(key)
        d["metrics"]["formats"] = list(d["metrics"]["formats"])
        return _listify(d)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = copy.deepcopy(d or {})
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown top-level section(s): {sorted(unknown)}")
        try:
            sa = dict(d.get("stage_a") or {})
            clash = set(sa) & set(_ABLATION_KEYS)
            if clash:
                raise ConfigError(f"stage_a.{sorted(clash)[0]} is set through the ablation section")
            _check_keys("stage_a", sa, StageAConfig)
            if "weights" in sa:
                _check_keys("stage_a.weights", sa["weights"], StageAWeights)
            sb = dict(d.get("stage_b") or {})
            _check_keys("stage_b", sb, StageBConfig)
            if "weights" in sb:
                _check_keys("stage_b.weights", sb["weights"], StageBWeights)
            for name, typ in (("paths", Paths), ("ablation", Ablation), ("metrics", MetricsOptions)):
                _check_keys(name, d.get(name) or {}, typ)
            metrics = dict(d.get("metrics") or {})
            if "formats" in metrics:
                metrics["formats"] = tuple(metrics["formats"])
            synth = d.get("synth")
            return cls(
                paths=Paths(**(d.get("paths") or {})),
                stage_a=StageAConfig.from_dict(sa),
                stage_b=StageBConfig.from_dict(sb),
                ablation=Ablation(**(d.get("ablation") or {})),
                metrics=MetricsOptions(**metrics),
                synth=SyntheticSceneConfig.from_dict(synth) if synth else None,
                sweep=d.get("sweep"),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, ValidationError) as exc:
            raise ConfigError(str(exc)) from exc


def _check_keys(section: str, d: Any, typ) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{section} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(typ)}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")


def _listify(x):
    if isinstance(x, dict):
        return {k: _listify(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_listify(v) for v in x]
    return x


def render(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def parse(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def load(path: str | os.PathLike, overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return ExperimentConfig.from_dict(apply_overrides(data, overrides or []))


def set_dotted(data: dict, key: str, value: Any) -> dict:
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"{key}: {part} is not a section")
        node = nxt
    node[parts[-1]] = value
    return data


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        set_dotted(data, key.strip(), yaml.safe_load(raw))
    return data
