"""Experiment configuration: one JSON file, dotted-flag overrides, two profiles.

Nested sections hold plain dicts whose keys mirror the typed config fields
verbatim (ModelConfig, TrainConfig, EvalConfig, SimConfig), so anything the
dataclasses accept can be set from the file or from ``--set section.key=value``.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field

from .evaluation import EvalConfig
from .model import ModelConfig
from .policies import PolicySpec
from .sim import REGIME_PRESETS, SimConfig
from .topology import RoadNetwork, grid_network, load_network
from .training import TrainConfig

OUTPUT_ROOT_ENV = "GREENWAVE_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    network: dict = field(default_factory=lambda: {"kind": "grid", "rows": 3, "cols": 3})
    demand_mix: dict = field(default_factory=lambda: {"low": 0.15, "nominal": 0.7,
                                                      "high": 0.15})
    policy: dict = field(default_factory=lambda: {"kind": "max_pressure"})
    episodes: int = 50
    dataset_path: str = "data/episodes.jsonl"
    checkpoint_path: str = "models/model.npz"
    report_dir: str = "reports"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        total = sum(self.demand_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"demand_mix fractions sum to {total}, need 1 +- 1e-9")
        unknown = set(self.demand_mix) - set(REGIME_PRESETS)
        if unknown:
            raise ConfigError(f"unknown demand regimes {sorted(unknown)}; "
                              f"known: {sorted(REGIME_PRESETS)}")
        if self.episodes < 1:
            raise ConfigError(f"episodes must be >= 1, got {self.episodes}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")

    def build_network(self) -> RoadNetwork:
        spec = dict(self.network)
        kind = spec.pop("kind", "grid")
        if kind == "grid":
            return grid_network(**spec)
        if kind == "file":
            return load_network(resolve_path(spec["path"]))
        raise ConfigError(f"unknown network kind {kind!r}")

    def policy_spec(self) -> PolicySpec:
        spec = dict(self.policy)
        if "cycle_plan" in spec:
            spec["cycle_plan"] = tuple(tuple(leg) for leg in spec["cycle_plan"])
        return PolicySpec(**spec)

    def model_config(self, network: RoadNetwork) -> ModelConfig:
        return ModelConfig(num_agents=network.num_intersections, **self.model)

    def train_config(self) -> TrainConfig:
        section = dict(self.train)
        if "betas" in section:
            section["betas"] = tuple(section["betas"])
        return TrainConfig(**section)

    def eval_config(self) -> EvalConfig:
        section = dict(self.eval)
        if "seeds" in section:
            section["seeds"] = tuple(section["seeds"])
        return EvalConfig(**section)

    def sim_config(self) -> SimConfig:
        section = dict(self.sim)
        if "turn_probs" in section:
            section["turn_probs"] = tuple(section["turn_probs"])
        return SimConfig(**section)

    def to_dict(self) -> dict:
        return {name: copy.deepcopy(getattr(self, name))
                for name in self.__dataclass_fields__}


def desk_profile() -> dict:
    """CPU-friendly defaults: small model, short context, 50 episodes."""
    return {
        "network": {"kind": "grid", "rows": 3, "cols": 3},
        "demand_mix": {"low": 0.15, "nominal": 0.7, "high": 0.15},
        "policy": {"kind": "max_pressure"},
        "episodes": 50,
        "dataset_path": "data/desk.jsonl",
        "checkpoint_path": "models/desk.npz",
        "report_dir": "reports/desk",
        "model": {"hidden_dim": 32, "heads": 4, "encoder_layers": 2,
                  "graph_layers": 1, "context": 10, "dropout": 0.1},
        "train": {"lr": 3e-4, "warmup_steps": 100, "epochs": 20, "batch_size": 64,
                  "window_stride": 10},
        "eval": {"episodes": 10, "seeds": [1], "target_fraction": 0.9},
        "sim": {},
        "seed": 0,
        "jobs": 1,
    }


def full_profile() -> dict:
    """Full-scale defaults: larger model, longer context, 1000 episodes."""
    return {
        "network": {"kind": "grid", "rows": 3, "cols": 3},
        "demand_mix": {"low": 0.15, "nominal": 0.7, "high": 0.15},
        "policy": {"kind": "max_pressure"},
        "episodes": 1000,
        "dataset_path": "data/full.jsonl",
        "checkpoint_path": "models/full.npz",
        "report_dir": "reports/full",
        "model": {"hidden_dim": 128, "heads": 4, "encoder_layers": 3,
                  "graph_layers": 2, "context": 20, "dropout": 0.1},
        "train": {"lr": 1e-4, "warmup_steps": 1000, "epochs": 100, "batch_size": 64,
                  "window_stride": 1},
        "eval": {"episodes": 50, "seeds": [0, 1, 2, 3, 4], "target_fraction": 0.9},
        "sim": {},
        "seed": 0,
        "jobs": 1,
    }


PROFILES = {"desk": desk_profile, "full": full_profile}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values parse as JSON, else strings."""
    out = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        dotted, text = item.split("=", 1)
        keys = dotted.split(".")
        node = out
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {dotted!r}: {key!r} is not a section")
        node[keys[-1]] = _parse_value(text)
    return out


def load_config(path: str | None = None, profile: str = "desk",
                overrides: list[str] | None = None) -> ExperimentConfig:
    """Profile defaults, then the config file, then dotted flag overrides."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; known: {sorted(PROFILES)}")
    data = PROFILES[profile]()
    if path is not None:
        with open(path) as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        unknown = set(loaded) - set(ExperimentConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"{path}: unknown config fields {sorted(unknown)}")
        for key, value in loaded.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key].update(value)
            else:
                data[key] = value
    data = apply_overrides(data, overrides or [])
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def resolve_path(path: str) -> str:
    """Relative paths land under the output root (env var, default cwd)."""
    if os.path.isabs(path):
        return path
    return os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "."), path)
