"""Experiment configuration: strict YAML parsing, named presets and dotted overrides."""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .discriminator import MlpConfig
from .policy import TrustRegionConfig
from .reward import METHODS, TrainConfig
from .tasks import GridWalkerTask, RandomGaussiansTask, task_from_spec


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 10_000
    every: int = 1
    normalizer_samples: int = 100_000
    mode_negatives: int = 100

    def __post_init__(self):
        if self.n_samples < 1000:
            raise ValueError("n_samples must be >= 1000")
        if self.every < 1:
            raise ValueError("every must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    task: dict
    method: str = "virl"
    n_components: int = 10
    iterations: int = 40
    policy_update_steps: int = 1
    n_experts: int = 8000
    bandwidth: float | str = "silverman"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    mlp: MlpConfig = field(default_factory=MlpConfig)
    trust_region: TrustRegionConfig = field(default_factory=TrustRegionConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    min_ess: float = 0.0
    holdout_fraction: float = 0.1
    prior_scale: float = 2.0
    geim_sampler: str = "fusion"
    name: str = "experiment"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {sorted(METHODS)}")
        if self.n_experts < 2:
            raise ValueError("n_experts must be >= 2")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if "kind" not in self.task:
            raise ValueError("task.kind is required")
        # validates the task spec eagerly
        task_from_spec({**self.task, **({"seed": 0} if self.task["kind"] == RandomGaussiansTask.kind else {})})
        self.train_config()

    @property
    def task_kind(self) -> str:
        return self.task["kind"]

    @property
    def task_size(self) -> int:
        return int(self.task["m"] if self.task_kind == RandomGaussiansTask.kind else self.task["d"])

    def make_task(self, seed: int):
        """Task instance for one trial; random Gaussians draw a fresh target per seed."""
        spec = dict(self.task)
        if spec["kind"] == RandomGaussiansTask.kind:
            spec.setdefault("seed", seed)
        return task_from_spec(spec)

    def train_config(self) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, n_components=self.n_components,
                           policy_update_steps=self.policy_update_steps, mlp=self.mlp,
                           trust_region=self.trust_region, bandwidth=self.bandwidth,
                           min_ess=self.min_ess, holdout_fraction=self.holdout_fraction,
                           prior_scale=self.prior_scale, geim_sampler=self.geim_sampler)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["seeds"] = list(self.seeds)
        return out


_NESTED = {"mlp": MlpConfig, "trust_region": TrustRegionConfig, "evaluation": EvalConfig}
_TASK_KEYS = {
    RandomGaussiansTask.kind: {"kind", "m", "seed", "mean_box", "eigenvalue_range", "weight_concentration", "scale"},
    GridWalkerTask.kind: {"kind", "d", "line_spacing", "waypoint_variance", "angle_prior_std"},
}


def _coerce(value):
    # YAML 1.1 reads "1e-3" as a string
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate a config; unknown keys anywhere raise ``ConfigError``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = copy.deepcopy(raw)
    unknown = set(raw) - _field_names(ExperimentConfig)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "task" not in raw:
        raise ConfigError("task: required")
    task = raw["task"]
    if not isinstance(task, dict) or task.get("kind") not in _TASK_KEYS:
        raise ConfigError(f"task.kind: must be one of {sorted(_TASK_KEYS)}")
    bad = set(task) - _TASK_KEYS[task["kind"]]
    if bad:
        raise ConfigError(f"unknown task keys: {sorted(bad)}")
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key in _NESTED:
            cls = _NESTED[key]
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: must be a mapping")
            extra = set(value) - _field_names(cls)
            if extra:
                raise ConfigError(f"unknown {key} keys: {sorted(extra)}")
            try:
                kwargs[key] = cls(**{k: _coerce(v) for k, v in value.items()})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from None
        elif key == "seeds":
            seeds = value if isinstance(value, (list, tuple)) else [value]
            kwargs[key] = tuple(int(s) for s in seeds)
        elif key in ("task", "name", "method", "geim_sampler"):
            kwargs[key] = value
        else:
            kwargs[key] = _coerce(value)
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_override(text: str) -> tuple[list[str], Any]:
    """``"mlp.epochs=20"`` -> ``(["mlp", "epochs"], 20)``; values are parsed as YAML scalars."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, value = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    return path, yaml.safe_load(value) if value.strip() else ""


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = copy.deepcopy(raw)
    for text in overrides:
        path, value = parse_override(text)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {part} is not a section")
        node[path[-1]] = value
    return raw


def preset_names() -> list[str]:
    folder = resources.files("virl") / "presets"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".yaml"))


def load_preset_dict(name: str) -> dict:
    path = resources.files("virl") / "presets" / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    data = yaml.safe_load(path.read_text())
    data.setdefault("name", name)
    return data


def _merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in top.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "task":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(preset: str | None = None, config_path: str | Path | None = None,
            overrides: list[str] | None = None) -> ExperimentConfig:
    """Preset, then config file on top, then ``key=value`` overrides."""
    raw: dict = {}
    if preset:
        raw = load_preset_dict(preset)
    if config_path:
        loaded = yaml.safe_load(Path(config_path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path}: top level must be a mapping")
        raw = _merge(raw, loaded)
        raw.setdefault("name", Path(config_path).stem)
    if not raw:
        raise ConfigError("either a preset or a config file is required")
    raw = apply_overrides(raw, overrides or [])
    return from_dict(raw)


def load(preset: str) -> ExperimentConfig:
    return resolve(preset=preset)
