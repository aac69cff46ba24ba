"""Classical signal controllers used for data collection and benchmarks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .sim import PHASE_LANES, PHASES, TURN_STRAIGHT, SimState
from .topology import LANES, RoadNetwork

DEFAULT_CYCLE_PLAN = tuple((p, 30) for p in range(PHASES))

POLICY_KINDS = ("fixed_time", "max_pressure", "random", "mixture")


@dataclass(frozen=True)
class PolicySpec:
    """Which controller to run and its knobs.

    ``epsilon`` only matters for the mixture policy: each intersection
    independently acts uniformly at random with probability epsilon and
    greedily by pressure otherwise.
    """

    kind: str = "max_pressure"
    cycle_plan: tuple = DEFAULT_CYCLE_PLAN
    epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}, expected one of {POLICY_KINDS}")
        if not self.cycle_plan or any(len(item) != 2 for item in self.cycle_plan):
            raise ValueError("cycle_plan must be a sequence of (phase, duration) pairs")
        for phase, duration in self.cycle_plan:
            if not 0 <= phase < PHASES:
                raise ValueError(f"cycle_plan phase {phase} out of range")
            if duration <= 0:
                raise ValueError(f"cycle_plan duration must be positive, got {duration}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")


def fixed_time_action(clock: int, plan=DEFAULT_CYCLE_PLAN) -> int:
    """Phase scheduled at ``clock`` seconds by a cyclic (phase, duration) plan."""
    cycle = sum(d for _, d in plan)
    t = clock % cycle
    for phase, duration in plan:
        if t < duration:
            return phase
        t -= duration
    raise AssertionError("unreachable: plan durations cover the cycle")


def max_pressure_action(state: SimState, network: RoadNetwork, i: int) -> int:
    """Phase whose released lanes have the largest summed queue difference.

    Pressure of a phase is the sum over its released lanes of the lane's
    queue minus the queue of its straight-continuation downstream lane;
    boundary exits count as empty.  Ties pick the lowest phase index.
    """
    best_phase, best_pressure = 0, -np.inf
    for phase in range(PHASES):
        pressure = 0
        for lane in PHASE_LANES[phase]:
            upstream = int(state.queue_len[i, lane])
            j, slot = network.turn_target(i, lane, TURN_STRAIGHT)
            downstream = int(state.queue_len[j, slot]) if j >= 0 else 0
            pressure += upstream - downstream
        if pressure > best_pressure:
            best_phase, best_pressure = phase, pressure
    return best_phase


def sample_action(spec: PolicySpec, state: SimState, network: RoadNetwork,
                  rng: np.random.Generator) -> np.ndarray:
    """Joint action for all intersections under ``spec``."""
    n = network.num_intersections
    if spec.kind == "fixed_time":
        return np.full(n, fixed_time_action(state.clock, spec.cycle_plan), dtype=np.int64)
    if spec.kind == "max_pressure":
        return np.array([max_pressure_action(state, network, i) for i in range(n)],
                        dtype=np.int64)
    if spec.kind == "random":
        return rng.integers(0, PHASES, size=n)
    # mixture: per-intersection epsilon-greedy over pressure
    greedy = np.array([max_pressure_action(state, network, i) for i in range(n)],
                      dtype=np.int64)
    explore = rng.random(n) < spec.epsilon
    noise = rng.integers(0, PHASES, size=n)
    return np.where(explore, noise, greedy)
