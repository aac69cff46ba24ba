"""Closed-loop evaluation: RTG-conditioned rollouts, coordination, reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import Trajectory, episode_seed
from .model import ModelConfig, forward
from .policies import PolicySpec, sample_action
from .sim import (OBS_DIM, PHASES, REGIME_PRESETS, DemandProfile, EpisodeMetrics,
                  SimConfig, episode_metrics, observe, reset, step)
from .topology import RoadNetwork, hop_distances


@dataclass(frozen=True)
class EvalConfig:
    target_fraction: float = 0.9   # of R_max, negated into the target return
    episodes: int = 50
    seeds: tuple = (0, 1, 2, 3, 4)
    demand: str = "nominal"
    epsilon: float = 1.0           # alignment tolerance, decision intervals
    sample_actions: bool = False

    def __post_init__(self):
        if self.target_fraction <= 0:
            raise ValueError(f"target_fraction must be > 0, got {self.target_fraction}")
        if self.episodes < 1 or not self.seeds:
            raise ValueError("need at least one episode and one seed")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class ModelBundle:
    """A trained model plus everything needed to run it closed-loop."""

    params: dict
    config: ModelConfig
    r_max: float
    variant: str = "full"

    def __post_init__(self):
        if not self.r_max > 0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")


class PolicyController:
    """Adapter running a fixed policy through the controller interface."""

    def __init__(self, spec: PolicySpec, seed: int):
        self.spec = spec
        self.rng = np.random.default_rng([seed, spec.seed, 2])

    def act(self, state, network) -> np.ndarray:
        return sample_action(self.spec, state, network, self.rng)

    def record_reward(self, reward: float) -> None:
        pass


class ModelController:
    """Sliding-window decision-transformer controller with RTG bookkeeping.

    The return-to-go starts at ``target_return`` and decreases by each
    observed reward, so rtg_trace[t] = target - sum(rewards[:t]) exactly.
    """

    def __init__(self, bundle: ModelBundle, target_return: float, seed: int,
                 sample: bool = False):
        if not math.isfinite(target_return):
            raise ValueError(f"target_return must be finite, got {target_return}")
        self.bundle = bundle
        self.target = float(target_return)
        self.cum_reward = 0.0
        self.obs_hist: list[np.ndarray] = []
        self.act_hist: list[np.ndarray] = []
        self.rtg_trace: list[float] = []
        self.rng = np.random.default_rng([seed, 3]) if sample else None
        self.sample = sample

    def act(self, state, network) -> np.ndarray:
        cfg = self.bundle.config
        obs = observe(state)
        rtg_now = self.target - self.cum_reward
        self.obs_hist.append(obs)
        self.rtg_trace.append(rtg_now)
        k, n = cfg.context, cfg.num_agents
        window_obs = np.zeros((k, n, OBS_DIM))
        window_act = np.zeros((k, n), dtype=np.int64)
        window_rtg = np.zeros(k)
        tail_obs = self.obs_hist[-k:]
        tail_rtg = self.rtg_trace[-k:]
        tail_act = self.act_hist[-(len(tail_obs) - 1):] if len(tail_obs) > 1 else []
        pad = k - len(tail_obs)
        window_obs[pad:] = tail_obs
        window_rtg[pad:] = tail_rtg
        if tail_act:
            window_act[pad:-1] = tail_act
        logits = forward(self.bundle.params, cfg, window_obs, window_act,
                         window_rtg / self.bundle.r_max, network.adjacency).data
        final = logits[-1]
        if not np.all(np.isfinite(final)):
            raise RuntimeError("model produced non-finite logits; aborting rollout")
        if self.sample:
            shifted = final - final.max(axis=-1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=-1, keepdims=True)
            action = np.array([self.rng.choice(PHASES, p=row) for row in probs])
        else:
            action = np.argmax(final, axis=-1)
        self.act_hist.append(action.astype(np.int64))
        return action.astype(np.int64)

    def record_reward(self, reward: float) -> None:
        self.cum_reward += reward


@dataclass
class RolloutResult:
    trajectory: Trajectory
    metrics: EpisodeMetrics
    edge_flow: np.ndarray          # (N, N) vehicles moved i -> j
    rtg_trace: np.ndarray | None   # model controllers only


def rollout(controller, network: RoadNetwork, demand: DemandProfile, seed: int,
            config: SimConfig | None = None) -> RolloutResult:
    """One closed-loop episode under any controller; deterministic per seed."""
    cfg = config or SimConfig()
    state = reset(network, demand, seed, cfg)
    obs, acts, rews = [], [], []
    done = False
    while not done:
        obs.append(observe(state))
        action = controller.act(state, network)
        state, reward, done = step(state, action)
        controller.record_reward(reward)
        acts.append(action)
        rews.append(reward)
    trace = getattr(controller, "rtg_trace", None)
    return RolloutResult(
        Trajectory(np.stack(obs), np.stack(acts), np.array(rews),
                   demand_tag=demand.tag, seed=seed),
        episode_metrics(state), state.edge_flow.copy(),
        np.array(trace) if trace is not None else None)


def model_rollout(bundle: ModelBundle, network: RoadNetwork, demand: DemandProfile,
                  target_return: float, seed: int,
                  config: SimConfig | None = None,
                  sample: bool = False) -> RolloutResult:
    controller = ModelController(bundle, target_return, seed, sample=sample)
    return rollout(controller, network, demand, seed, config)


def phase_trace(trajectory: Trajectory) -> np.ndarray:
    """(T, N) actual phase indices recovered from the observation one-hots."""
    onehot_start = 2 * 4  # after per-lane queue and wait blocks
    return np.argmax(trajectory.observations[:, :, onehot_start:onehot_start + PHASES],
                     axis=-1)


def last_change_times(trace: np.ndarray) -> np.ndarray:
    """(T, N) decision index of the most recent phase change, 0 before any."""
    t_len, n = trace.shape
    out = np.zeros((t_len, n), dtype=np.int64)
    last = np.zeros(n, dtype=np.int64)
    for t in range(1, t_len):
        changed = trace[t] != trace[t - 1]
        last[changed] = t
        out[t] = last
    return out


def coordination_index(trace: np.ndarray, network: RoadNetwork,
                       epsilon: float = 1.0, decision_interval: int = 5) -> float:
    """Share of decision steps where adjacent pairs hold the free-flow offset.

    The pairwise offset is the difference of most-recent phase-change times;
    alignment compares its magnitude against round(free_flow/interval).
    Networks without edges (a single intersection) return NaN.
    """
    trace = np.asarray(trace)
    if trace.ndim != 2 or trace.shape[0] == 0:
        raise ValueError(f"phase trace must be (T, N), got {trace.shape}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    pairs = [(i, j) for i in range(network.num_intersections)
             for j in range(i + 1, network.num_intersections)
             if network.adjacency[i, j]]
    if not pairs:
        return float("nan")
    changes = last_change_times(trace)
    score = 0.0
    for i, j in pairs:
        target = round(network.free_flow_time[i, j] / decision_interval)
        offset = np.abs(changes[:, i] - changes[:, j])
        score += float(np.mean(np.abs(offset - target) < epsilon))
    return score / len(pairs)


@dataclass
class AttentionStats:
    rows: list                    # dicts: class, mean, std, pairs
    max_row_sum_error: float      # worst |sum(alpha) - 1| over all rows seen

    def by_class(self) -> dict:
        return {row["class"]: row for row in self.rows}


HOP_CLASSES = ("self", "1-hop", "2-hop", "3+hop")


def attention_stats(bundle: ModelBundle, network: RoadNetwork,
                    trajectory: Trajectory, edge_flow: np.ndarray) -> AttentionStats:
    """Graph-attention mass by topological relationship, teacher-forced.

    Replays the trajectory through the model in context windows, captures
    every graph-attention matrix, and averages over layers, heads, windows
    and timesteps. Hop classes partition each attention row, so their means
    weighted by pair counts add up to 1/N per row family.
    """
    cfg = bundle.config
    if not cfg.use_graph_attention:
        raise RuntimeError("attention stats need a model with graph attention enabled")
    k, n = cfg.context, cfg.num_agents
    hops = hop_distances(network)
    captured: list[np.ndarray] = []
    starts = list(range(0, max(len(trajectory) - k + 1, 1), k))
    for start in starts:
        obs = np.zeros((k, n, OBS_DIM))
        acts = np.zeros((k, n), dtype=np.int64)
        rtg = np.zeros(k)
        chunk = slice(start, min(start + k, len(trajectory)))
        size = chunk.stop - chunk.start
        obs[:size] = trajectory.observations[chunk]
        acts[:size] = trajectory.actions[chunk]
        rtg[:size] = trajectory.rtg[chunk]
        forward(bundle.params, cfg, obs, acts, rtg / bundle.r_max,
                network.adjacency, capture=captured)
    alpha = np.concatenate([a.reshape(-1, n, n) for a in captured])
    max_err = float(np.max(np.abs(alpha.sum(axis=-1) - 1.0)))

    rows = []
    hop_masks = {"self": hops == 0, "1-hop": hops == 1, "2-hop": hops == 2,
                 "3+hop": hops >= 3}
    inbound = edge_flow.T  # inbound[i, j] = vehicles that flowed j -> i
    upstream = (inbound > edge_flow) & network.adjacency & (hops == 1)
    downstream = (inbound < edge_flow) & network.adjacency & (hops == 1)
    for name, mask in {**hop_masks, "upstream": upstream,
                       "downstream": downstream}.items():
        pairs = int(mask.sum())
        if pairs == 0:
            continue
        values = alpha[:, mask]
        rows.append({"class": name, "mean": float(values.mean()),
                     "std": float(values.std()), "pairs": pairs})
    return AttentionStats(rows, max_err)


@dataclass
class EvalReport:
    methods: list                                   # ordered method names
    per_seed: dict = field(default_factory=dict)    # (method, seed) -> metrics dict
    aggregates: dict = field(default_factory=dict)  # method -> {metric: (mean, std)}
    deltas: dict = field(default_factory=dict)      # (a, b) -> mean ATT difference
    coordination: dict = field(default_factory=dict)

    def rows(self) -> list:
        out = []
        for method in self.methods:
            agg = self.aggregates[method]
            row = {"method": method}
            for metric, (mean, std) in agg.items():
                row[metric] = mean
                row[f"{metric}_std"] = std
            out.append(row)
        return out


METRIC_KEYS = ("avg_travel_time", "avg_wait_time", "throughput",
               "coordination", "episode_return")


def _make_controller(method, seed: int, eval_config: EvalConfig, r_max_target):
    if isinstance(method, PolicySpec):
        return PolicyController(method, seed)
    if isinstance(method, ModelBundle):
        return ModelController(method, r_max_target(method), seed,
                               sample=eval_config.sample_actions)
    raise TypeError(f"methods must be PolicySpec or ModelBundle, got {type(method)}")


def compare(methods: dict, network: RoadNetwork, eval_config: EvalConfig,
            sim_config: SimConfig | None = None) -> EvalReport:
    """Paired evaluation: every method sees identical (seed, episode) streams."""
    if not methods:
        raise ValueError("need at least one method to evaluate")
    cfg = sim_config or SimConfig()
    demand = REGIME_PRESETS[eval_config.demand]() \
        if isinstance(eval_config.demand, str) else eval_config.demand

    def target_for(bundle: ModelBundle) -> float:
        return -eval_config.target_fraction * bundle.r_max

    report = EvalReport(list(methods))
    for name, method in methods.items():
        for seed in eval_config.seeds:
            episode_rows = []
            for e in range(eval_config.episodes):
                ep_seed = episode_seed(seed, e)
                controller = _make_controller(method, ep_seed, eval_config, target_for)
                result = rollout(controller, network, demand, ep_seed, cfg)
                episode_rows.append({
                    "avg_travel_time": result.metrics.avg_travel_time,
                    "avg_wait_time": result.metrics.avg_wait_time,
                    "throughput": result.metrics.throughput,
                    "coordination": coordination_index(
                        phase_trace(result.trajectory), network,
                        eval_config.epsilon, cfg.decision_interval),
                    "episode_return": float(result.trajectory.rtg[0]),
                })
            report.per_seed[(name, seed)] = {
                key: float(np.mean([row[key] for row in episode_rows]))
                for key in METRIC_KEYS}
        per_seed = [report.per_seed[(name, seed)] for seed in eval_config.seeds]
        report.aggregates[name] = {
            key: (float(np.mean([row[key] for row in per_seed])),
                  float(np.std([row[key] for row in per_seed], ddof=1))
                  if len(per_seed) > 1 else 0.0)
            for key in METRIC_KEYS}
    for a in report.methods:
        for b in report.methods:
            if a != b:
                report.deltas[(a, b)] = (report.aggregates[a]["avg_travel_time"][0]
                                         - report.aggregates[b]["avg_travel_time"][0])
    return report
