"""Deterministic queue-model traffic simulation on a road network.

One-second ticks inside fixed decision intervals.  Each intersection runs a
four-phase signal using arterial movement labels: the NS phases (0, 1) grant
green to both north/south approach lanes and the EW phases (2, 3) to both
east/west lanes.  Through and protected-left phases of a pair release the
same approaches here because turns resolve at discharge; keeping both keeps
the standard four-way action space.  Any change of phase index inserts a
yellow period during which nothing discharges at that intersection.

Vehicles are point queues: they enter at boundary lanes via per-lane Poisson
arrivals, wait for green, discharge at the saturation rate, pick a turn with
fixed probabilities, traverse the connecting road at free-flow speed, and join
the next queue (or leave the network at a boundary).  Every lane draws
arrivals and turns from its own generator keyed by the lane's stream id, so
runs are reproducible and relabeling intersections relabels the results.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .topology import LANES, RoadNetwork

PHASES = 4
PHASE_LABELS = ("NS-through", "NS-left", "EW-through", "EW-left")
# Incoming lanes released by each phase (approach-pair scheme).
PHASE_LANES = ((0, 1), (0, 1), (2, 3), (2, 3))

TURN_STRAIGHT, TURN_LEFT, TURN_RIGHT = 0, 1, 2


class SimStateError(RuntimeError):
    """Raised when an operation is applied to a state that cannot accept it."""


@dataclass(frozen=True)
class SimConfig:
    decision_interval: int = 5       # seconds between joint actions
    yellow_time: int = 3             # seconds of no discharge on a phase change
    episode_length: int = 3600      # seconds
    saturation_rate: float = 0.5     # vehicles/second discharged on green
    lane_capacity: int = 40          # vehicles; observation normalizer only
    wait_normalizer: float = 300.0   # seconds
    timer_normalizer: float = 120.0  # seconds
    turn_probs: tuple = (0.6, 0.2, 0.2)  # straight, left, right

    def __post_init__(self):
        if self.decision_interval < 1 or self.episode_length < self.decision_interval:
            raise ValueError("need decision_interval >= 1 and a non-empty episode")
        if self.episode_length % self.decision_interval != 0:
            raise ValueError(f"episode_length {self.episode_length} must be a multiple "
                             f"of decision_interval {self.decision_interval}")
        if not 0 <= self.yellow_time < self.decision_interval:
            raise ValueError("yellow_time must fit inside one decision interval")
        if self.saturation_rate <= 0:
            raise ValueError("saturation_rate must be positive")
        if len(self.turn_probs) != 3 or abs(1.0 - float(np.sum(self.turn_probs))) > 1e-9 \
                or min(self.turn_probs) < 0:
            raise ValueError(f"turn_probs must be 3 non-negative shares summing to 1, got {self.turn_probs}")

    @property
    def decisions_per_episode(self) -> int:
        return self.episode_length // self.decision_interval


@dataclass(frozen=True)
class DemandProfile:
    """Boundary arrival intensity, in vehicles/hour per entry lane."""

    arrival_rate: float
    tag: str = "nominal"
    seed: int = 0

    def __post_init__(self):
        if self.arrival_rate < 0:
            raise ValueError(f"arrival_rate must be >= 0, got {self.arrival_rate}")

    @classmethod
    def low(cls, seed: int = 0) -> "DemandProfile":
        return cls(200.0, "low", seed)

    @classmethod
    def nominal(cls, seed: int = 0) -> "DemandProfile":
        return cls(300.0, "nominal", seed)

    @classmethod
    def high(cls, seed: int = 0) -> "DemandProfile":
        return cls(400.0, "high", seed)


REGIME_PRESETS = {"low": DemandProfile.low, "nominal": DemandProfile.nominal,
                  "high": DemandProfile.high}
# Share of episodes per regime when sampling mixed-demand datasets.
REGIME_MIX = (("nominal", 0.7), ("high", 0.2), ("low", 0.1))


class SimState:
    """Mutable simulation state; ``step`` advances it in place."""

    def __init__(self, network: RoadNetwork, demand: DemandProfile,
                 config: SimConfig, seed: int):
        n = network.num_intersections
        self.network = network
        self.demand = demand
        self.config = config
        self.seed = seed
        self.clock = 0
        self.phase = np.zeros(n, dtype=np.int64)
        self.phase_timer = np.zeros(n, dtype=np.int64)
        self.yellow_remaining = np.zeros(n, dtype=np.int64)
        self.pending_phase = np.zeros(n, dtype=np.int64)
        # (entry_time, queue_join_time) per vehicle, FIFO per lane
        self.queues = [deque() for _ in range(n * LANES)]
        self.queue_len = np.zeros((n, LANES), dtype=np.int64)
        self.join_sum = np.zeros((n, LANES), dtype=np.float64)
        self.wait_accum = np.zeros((n, LANES), dtype=np.float64)
        self.service_credit = np.zeros((n, LANES), dtype=np.float64)
        self.in_transit: dict[int, list] = {}
        self.transit_incoming = np.zeros((n, LANES), dtype=np.int64)
        self.transit_count = 0
        self.vehicle_log: list[tuple[int, int]] = []
        self.injected = 0
        self.edge_flow = np.zeros((n, n), dtype=np.int64)
        self.done = False

        fft = network.free_flow_time
        self.transit_ticks = np.maximum(1, np.rint(fft)).astype(np.int64)
        self._lane_rngs = [
            np.random.default_rng([seed & 0x7FFFFFFF, demand.seed & 0x7FFFFFFF,
                                   int(network.stream_ids[i, s, 0]),
                                   int(network.stream_ids[i, s, 1])])
            for i in range(n) for s in range(LANES)
        ]
        # Pre-drawn Poisson arrival counts per boundary lane and second; the
        # lane generator then continues with turn draws, so the stream layout
        # is independent of intersection labels.
        self.boundary = network.boundary_lanes
        rate_per_sec = demand.arrival_rate / 3600.0
        self.arrival_counts = np.zeros((config.episode_length, len(self.boundary)), dtype=np.int64)
        for k, (i, s) in enumerate(self.boundary):
            self.arrival_counts[:, k] = self._lane_rngs[i * LANES + s].poisson(
                rate_per_sec, config.episode_length)

    @property
    def num_agents(self) -> int:
        return self.network.num_intersections

    def vehicles_queued(self) -> int:
        return int(self.queue_len.sum())

    def conservation_holds(self) -> bool:
        """Injected vehicles are queued, travelling, or logged as complete."""
        return self.injected == self.vehicles_queued() + self.transit_count + len(self.vehicle_log)


def reset(network: RoadNetwork, demand: DemandProfile, seed: int,
          config: Optional[SimConfig] = None) -> SimState:
    """Fresh episode state: empty lanes, all signals on phase 0."""
    return SimState(network, demand, config or SimConfig(), seed)


def inject(state: SimState, intersection: int, slot: int, count: int = 1) -> None:
    """Queue vehicles directly (synthetic scenarios and tests)."""
    if state.done:
        raise SimStateError("cannot inject into a finished episode")
    for _ in range(count):
        state.queues[intersection * LANES + slot].append((state.clock, state.clock))
        state.join_sum[intersection, slot] += state.clock
    state.queue_len[intersection, slot] += count
    state.injected += count


def _draw_turn(rng: np.random.Generator, probs) -> int:
    u = rng.random()
    if u < probs[0]:
        return TURN_STRAIGHT
    if u < probs[0] + probs[1]:
        return TURN_LEFT
    return TURN_RIGHT


def step(state: SimState, actions: np.ndarray) -> tuple[SimState, float, bool]:
    """Apply one joint action and advance one decision interval.

    Returns ``(state, reward, done)`` where the reward is the negated mean
    per-intersection waiting accrued during the interval.  The state is
    mutated in place.
    """
    if state.done:
        raise SimStateError("episode is finished; call reset for a new one")
    net, cfg = state.network, state.config
    n = net.num_intersections
    actions = np.asarray(actions)
    if actions.shape != (n,):
        raise ValueError(f"actions must have shape ({n},), got {actions.shape}")
    if not np.issubdtype(actions.dtype, np.integer):
        raise ValueError(f"actions must be integers, got dtype {actions.dtype}")
    if actions.min() < 0 or actions.max() >= PHASES:
        raise ValueError(f"phase indices must be in [0, {PHASES}), got {actions.tolist()}")
    assert (state.yellow_remaining == 0).all(), "yellow must not span decision boundaries"

    switching = actions != state.phase
    state.yellow_remaining[switching] = cfg.yellow_time
    state.pending_phase[switching] = actions[switching]

    probs = cfg.turn_probs
    interval_wait = 0.0
    for _ in range(cfg.decision_interval):
        clock = state.clock
        in_yellow = state.yellow_remaining > 0

        bucket = state.in_transit.pop(clock, None)
        if bucket is not None:
            bucket.sort(key=lambda rec: rec[2])  # label-independent lane order
            for j, slot, entry in bucket:
                state.queues[j * LANES + slot].append((entry, clock))
                state.queue_len[j, slot] += 1
                state.join_sum[j, slot] += clock
                state.transit_incoming[j, slot] -= 1
            state.transit_count -= len(bucket)

        for k, (i, s) in enumerate(state.boundary):
            c = int(state.arrival_counts[clock, k])
            if c:
                q = state.queues[i * LANES + s]
                for _ in range(c):
                    q.append((clock, clock))
                state.queue_len[i, s] += c
                state.join_sum[i, s] += c * clock
                state.injected += c

        for i in range(n):
            if in_yellow[i]:
                state.service_credit[i, :] = 0.0
                continue
            served = PHASE_LANES[state.phase[i]]
            for s in range(LANES):
                if s not in served:
                    state.service_credit[i, s] = 0.0
            for lane in served:
                credit = state.service_credit[i, lane] + cfg.saturation_rate
                q = state.queues[i * LANES + lane]
                rng = state._lane_rngs[i * LANES + lane]
                while credit >= 1.0 and q:
                    entry, join = q.popleft()
                    state.queue_len[i, lane] -= 1
                    state.join_sum[i, lane] -= join
                    credit -= 1.0
                    turn = _draw_turn(rng, probs)
                    j, slot = net.turn_target(i, lane, turn)
                    if j < 0:
                        state.vehicle_log.append((entry, clock + 1))
                    else:
                        due = clock + int(state.transit_ticks[i, j])
                        state.in_transit.setdefault(due, []).append((j, slot, entry))
                        state.transit_incoming[j, slot] += 1
                        state.transit_count += 1
                        state.edge_flow[i, j] += 1
                if not q:
                    credit = 0.0  # an empty green lane does not bank capacity
                state.service_credit[i, lane] = credit

        # Every vehicle still queued at the end of the tick waits one second.
        state.wait_accum += state.queue_len
        interval_wait += float(state.queue_len.sum())

        state.clock += 1
        expired = in_yellow & (state.yellow_remaining == 1)
        state.yellow_remaining[in_yellow] -= 1
        state.phase[expired] = state.pending_phase[expired]
        state.phase_timer[expired] = 0
        state.phase_timer[~expired] += 1

    reward = -interval_wait / n
    state.done = state.clock >= cfg.episode_length
    return state, reward, state.done


def observe(state: SimState) -> np.ndarray:
    """Per-intersection observation, shape (N, 17), all features in [0, 1].

    Layout: 4 queue lengths, 4 mean waits of queued vehicles, 4-way phase
    one-hot, 1 phase timer, 4 lane vehicle counts (queued plus en route to
    the lane), normalized by the config constants.
    """
    cfg = state.config
    n = state.num_agents
    qlen = state.queue_len
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_wait = np.where(qlen > 0, state.clock - state.join_sum / np.maximum(qlen, 1), 0.0)
    onehot = np.zeros((n, PHASES))
    onehot[np.arange(n), state.phase] = 1.0
    counts = qlen + state.transit_incoming
    obs = np.concatenate([
        np.clip(qlen / cfg.lane_capacity, 0.0, 1.0),
        np.clip(mean_wait / cfg.wait_normalizer, 0.0, 1.0),
        onehot,
        np.clip(state.phase_timer[:, None] / cfg.timer_normalizer, 0.0, 1.0),
        np.clip(counts / cfg.lane_capacity, 0.0, 1.0),
    ], axis=1)
    return obs


OBS_DIM = 17


@dataclass(frozen=True)
class EpisodeMetrics:
    avg_travel_time: float     # seconds, completed trips only; nan if none
    avg_wait_time: float       # total accrued waiting / completed trips
    throughput: float          # completed trips per simulated hour
    completed: int
    injected: int
    in_network: int


def episode_metrics(state: SimState) -> EpisodeMetrics:
    if not state.done:
        raise SimStateError("episode metrics need a finished episode")
    completed = len(state.vehicle_log)
    if completed:
        att = float(np.mean([exit_t - entry for entry, exit_t in state.vehicle_log]))
        awt = float(state.wait_accum.sum()) / completed
        throughput = completed / (state.clock / 3600.0)
    else:
        att, awt, throughput = float("nan"), float("nan"), 0.0
    return EpisodeMetrics(att, awt, throughput, completed, state.injected,
                          state.vehicles_queued() + state.transit_count)
