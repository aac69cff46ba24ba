"""Offline trajectory collection, return-to-go, windowing, and dataset files.

Datasets are stored as line-delimited JSON: one header record, one record per
episode, one record per decision step. Floats survive the round trip exactly
(shortest-repr encoding), so a re-collected seeded dataset is byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from typing import Iterator, Sequence

import numpy as np

from .topology import RoadNetwork, topology_hash
from .sim import (OBS_DIM, PHASES, REGIME_MIX, REGIME_PRESETS, DemandProfile,
                  SimConfig, observe, reset, step)
from .policies import PolicySpec, sample_action

DATASET_FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Malformed dataset file or incompatible format version."""


def compute_rtg(rewards: np.ndarray) -> np.ndarray:
    """Suffix sums of the shared reward: rtg[t] = rewards[t] + rtg[t+1]."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or rewards.size == 0:
        raise ValueError("rewards must be a nonempty 1-d array")
    return np.cumsum(rewards[::-1])[::-1]


@dataclass
class Trajectory:
    """One closed-loop episode recorded at decision resolution.

    ``rtg`` is derived from ``rewards`` at construction so the suffix-sum
    recurrence holds exactly for every stored trajectory.
    """

    observations: np.ndarray   # (T, N, OBS_DIM) float64
    actions: np.ndarray        # (T, N) int64 phase indices
    rewards: np.ndarray        # (T,) float64, nonpositive
    demand_tag: str = "nominal"
    seed: int = 0
    rtg: np.ndarray = field(init=False)

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        t = len(self.rewards)
        if self.observations.ndim != 3 or self.observations.shape[2] != OBS_DIM:
            raise ValueError(f"observations must be (T, N, {OBS_DIM}), "
                             f"got {self.observations.shape}")
        if self.observations.shape[0] != t or self.actions.shape != self.observations.shape[:2]:
            raise ValueError("observations, actions and rewards must share T")
        if np.any(self.rewards > 0):
            raise ValueError("rewards are queue penalties and must be <= 0")
        if np.any(self.actions < 0) or np.any(self.actions >= PHASES):
            raise ValueError(f"actions must lie in [0, {PHASES})")
        self.rtg = compute_rtg(self.rewards)

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def num_agents(self) -> int:
        return self.observations.shape[1]


@dataclass(frozen=True)
class DatasetStats:
    """Normalization constants fitted on a collected dataset."""

    r_max: float               # max |episode return|, >= guard of 1
    obs_mean: np.ndarray       # (OBS_DIM,)
    obs_scale: np.ndarray      # (OBS_DIM,), zero-variance features fall back to 1
    num_episodes: int
    num_decisions: int

    def __post_init__(self):
        if not self.r_max > 0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")


@dataclass
class SequenceBatch:
    """B context windows of K decision steps each, left-padded and masked."""

    observations: np.ndarray   # (B, K, N, OBS_DIM)
    actions: np.ndarray        # (B, K, N) int64
    rtg: np.ndarray            # (B, K)
    mask: np.ndarray           # (B, K), 1.0 on real steps, 0.0 on padding

    def __post_init__(self):
        b, k = self.mask.shape
        if self.rtg.shape != (b, k) or self.observations.shape[:2] != (b, k) \
                or self.actions.shape != self.observations.shape[:3]:
            raise ValueError("batch arrays disagree on (B, K, N)")

    def __len__(self) -> int:
        return self.mask.shape[0]

    @property
    def context(self) -> int:
        return self.mask.shape[1]

    @property
    def num_agents(self) -> int:
        return self.observations.shape[2]


def _resolve_profile(entry) -> DemandProfile:
    if isinstance(entry, DemandProfile):
        return entry
    try:
        return REGIME_PRESETS[entry]()
    except KeyError:
        raise ValueError(f"unknown demand regime {entry!r}, "
                         f"expected one of {sorted(REGIME_PRESETS)}") from None


def episode_seed(seed: int, index: int) -> int:
    """Derived per-episode seed, stable regardless of collection order."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def collect(network: RoadNetwork, policy: PolicySpec, episodes: int, seed: int,
            config: SimConfig | None = None,
            demand_mix: Sequence[tuple] = REGIME_MIX) -> list[Trajectory]:
    """Run ``episodes`` closed-loop episodes and record per-decision tuples.

    The demand regime is drawn per episode from ``demand_mix``, a sequence of
    (regime, fraction) pairs where regime is a preset tag or a DemandProfile.
    """
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    profiles = [(_resolve_profile(entry), float(frac)) for entry, frac in demand_mix]
    total = sum(frac for _, frac in profiles)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"demand_mix fractions must sum to 1, got {total}")
    cfg = config or SimConfig()
    cumulative = np.cumsum([frac for _, frac in profiles])
    out = []
    for e in range(episodes):
        draw = np.random.default_rng([seed, e]).random()
        pick = min(int(np.searchsorted(cumulative, draw, side="right")), len(profiles) - 1)
        out.append(run_episode(network, policy, profiles[pick][0],
                               episode_seed(seed, e), cfg))
    return out


def run_episode(network: RoadNetwork, policy: PolicySpec, demand: DemandProfile,
                seed: int, config: SimConfig | None = None) -> Trajectory:
    """One recorded episode under ``policy``; observations precede actions."""
    cfg = config or SimConfig()
    state = reset(network, demand, seed, cfg)
    rng = np.random.default_rng([seed, policy.seed, 1])
    obs, acts, rews = [], [], []
    done = False
    while not done:
        obs.append(observe(state))
        action = sample_action(policy, state, network, rng)
        state, reward, done = step(state, action)
        acts.append(action)
        rews.append(reward)
    return Trajectory(np.stack(obs), np.stack(acts), np.array(rews),
                      demand_tag=demand.tag, seed=seed)


def fit_stats(trajectories: Sequence[Trajectory]) -> DatasetStats:
    """R_max is the largest-magnitude episode return; all-zero datasets get 1."""
    if not trajectories:
        raise ValueError("cannot fit stats on an empty dataset")
    r_max = max(abs(float(traj.rtg[0])) for traj in trajectories)
    flat = np.concatenate([traj.observations.reshape(-1, OBS_DIM) for traj in trajectories])
    std = flat.std(axis=0)
    return DatasetStats(
        r_max=r_max if r_max > 0 else 1.0,
        obs_mean=flat.mean(axis=0),
        obs_scale=np.where(std > 1e-8, std, 1.0),
        num_episodes=len(trajectories),
        num_decisions=sum(len(traj) for traj in trajectories),
    )


def window_index(trajectories: Sequence[Trajectory], context: int,
                 stride: int = 1) -> np.ndarray:
    """(W, 2) rows of (episode, end step) covering every stride-th window.

    Window ends are aligned so the final decision of each episode is always
    included; with stride 1 every step ends one window, so an episode of T
    steps yields exactly T windows.
    """
    if context < 1:
        raise ValueError(f"context must be >= 1, got {context}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    rows = [(e, t)
            for e, traj in enumerate(trajectories)
            for t in range((len(traj) - 1) % stride, len(traj), stride)]
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def gather_windows(trajectories: Sequence[Trajectory], rows: np.ndarray,
                   context: int) -> SequenceBatch:
    """Materialize left-padded windows for the given (episode, end) rows."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
    b, k = len(rows), context
    n = trajectories[rows[0, 0]].num_agents if b else 0
    obs = np.zeros((b, k, n, OBS_DIM))
    acts = np.zeros((b, k, n), dtype=np.int64)
    rtg = np.zeros((b, k))
    mask = np.zeros((b, k))
    for row, (e, end) in enumerate(rows):
        traj = trajectories[e]
        lo = end - k + 1
        pad = max(0, -lo)
        obs[row, pad:] = traj.observations[max(lo, 0):end + 1]
        acts[row, pad:] = traj.actions[max(lo, 0):end + 1]
        rtg[row, pad:] = traj.rtg[max(lo, 0):end + 1]
        mask[row, pad:] = 1.0
    return SequenceBatch(obs, acts, rtg, mask)


def window(trajectories: Sequence[Trajectory], context: int,
           stride: int = 1) -> Iterator[SequenceBatch]:
    """All length-``context`` windows, one batch per episode, never mixing two."""
    for traj in trajectories:
        rows = window_index([traj], context, stride)
        yield gather_windows([traj], rows, context)


def _dump(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"))


def save_trajectories(path: str, trajectories: Sequence[Trajectory],
                      network: RoadNetwork | None = None,
                      extra: dict | None = None) -> None:
    """Write a dataset file; the header carries network hash and caller metadata."""
    header = {"record": "header", "format_version": DATASET_FORMAT_VERSION,
              "obs_dim": OBS_DIM, "episodes": len(trajectories),
              "num_agents": trajectories[0].num_agents if trajectories else 0,
              "network_hash": topology_hash(network) if network is not None else None}
    header.update(extra or {})
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(_dump(header) + "\n")
        for e, traj in enumerate(trajectories):
            fh.write(_dump({"record": "episode", "index": e, "length": len(traj),
                            "demand_tag": traj.demand_tag, "seed": traj.seed}) + "\n")
            for t in range(len(traj)):
                fh.write(_dump({"record": "step", "episode": e, "t": t,
                                "reward": float(traj.rewards[t]),
                                "actions": traj.actions[t].tolist(),
                                "obs": traj.observations[t].tolist()}) + "\n")
    os.replace(tmp, path)


def load_trajectories(path: str) -> tuple[list[Trajectory], dict]:
    """Parse a dataset file back into trajectories plus its header record."""
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("record") != "header":
        raise DatasetError(f"{path}: missing dataset header record")
    header = lines[0]
    if header.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetError(f"{path}: format version {header.get('format_version')} "
                           f"not supported (expected {DATASET_FORMAT_VERSION})")
    episodes: dict[int, dict] = {}
    for record in lines[1:]:
        if record["record"] == "episode":
            episodes[record["index"]] = {"meta": record, "steps": []}
        elif record["record"] == "step":
            episodes[record["episode"]]["steps"].append(record)
        else:
            raise DatasetError(f"{path}: unknown record kind {record['record']!r}")
    out = []
    for index in sorted(episodes):
        meta, steps = episodes[index]["meta"], episodes[index]["steps"]
        if len(steps) != meta["length"] or [s["t"] for s in steps] != list(range(meta["length"])):
            raise DatasetError(f"{path}: episode {index} has missing or reordered steps")
        out.append(Trajectory(
            np.array([s["obs"] for s in steps]),
            np.array([s["actions"] for s in steps]),
            np.array([s["reward"] for s in steps]),
            demand_tag=meta["demand_tag"], seed=meta["seed"]))
    return out, header


def save_stats(path: str, stats: DatasetStats) -> None:
    record = asdict(stats)
    record.update(record_kind="dataset_stats", format_version=DATASET_FORMAT_VERSION,
                  obs_mean=stats.obs_mean.tolist(), obs_scale=stats.obs_scale.tolist())
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(json.dumps(record, indent=2) + "\n")
    os.replace(tmp, path)


def load_stats(path: str) -> DatasetStats:
    with open(path) as fh:
        record = json.load(fh)
    if record.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported stats format version")
    return DatasetStats(r_max=record["r_max"],
                        obs_mean=np.array(record["obs_mean"]),
                        obs_scale=np.array(record["obs_scale"]),
                        num_episodes=record["num_episodes"],
                        num_decisions=record["num_decisions"])
