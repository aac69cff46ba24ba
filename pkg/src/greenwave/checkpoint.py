"""Single-file model checkpoints with enough metadata to rerun them safely."""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from .autodiff import Tensor
from .evaluation import ModelBundle
from .model import ModelConfig
from .topology import RoadNetwork

CHECKPOINT_FORMAT_VERSION = 1
_META_KEYS = ("__format_version__", "__config__", "__variant__", "__r_max__")


class CheckpointError(ValueError):
    pass


def save_bundle(path: str, bundle: ModelBundle) -> None:
    """Write parameters plus config/variant/return-scale metadata atomically."""
    arrays = {name: tensor.data for name, tensor in bundle.params.items()}
    for key in _META_KEYS:
        if key in arrays:
            raise CheckpointError(f"parameter name {key!r} collides with metadata")
    arrays["__format_version__"] = np.array(CHECKPOINT_FORMAT_VERSION)
    arrays["__config__"] = np.array(json.dumps(dataclasses.asdict(bundle.config)))
    arrays["__variant__"] = np.array(bundle.variant)
    arrays["__r_max__"] = np.array(bundle.r_max)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_bundle(path: str) -> ModelBundle:
    with np.load(path, allow_pickle=False) as archive:
        missing = [key for key in _META_KEYS if key not in archive]
        if missing:
            raise CheckpointError(f"{path}: not a model checkpoint, missing {missing}")
        version = int(archive["__format_version__"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {version}, "
                                  f"expected {CHECKPOINT_FORMAT_VERSION}")
        config = ModelConfig(**json.loads(str(archive["__config__"])))
        params = {name: Tensor(archive[name], requires_grad=True)
                  for name in archive.files if name not in _META_KEYS}
        return ModelBundle(params=params, config=config,
                           r_max=float(archive["__r_max__"]),
                           variant=str(archive["__variant__"]))


def compatibility_diff(config: ModelConfig, network: RoadNetwork,
                       obs_dim: int, num_phases: int) -> list[str]:
    """Human-readable field mismatches between a checkpoint and a run setup."""
    expected = {"num_agents": network.num_intersections, "obs_dim": obs_dim,
                "num_phases": num_phases}
    return [f"{field}: checkpoint has {getattr(config, field)}, run needs {want}"
            for field, want in expected.items() if getattr(config, field) != want]


def require_compatible(bundle: ModelBundle, network: RoadNetwork,
                       obs_dim: int, num_phases: int) -> None:
    diff = compatibility_diff(bundle.config, network, obs_dim, num_phases)
    if diff:
        raise CheckpointError("checkpoint does not fit this run:\n  "
                              + "\n  ".join(diff))
