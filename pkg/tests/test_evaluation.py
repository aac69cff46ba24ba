"""Rollout bookkeeping, coordination metric, attention stats, comparisons."""

import math

import numpy as np
import pytest

from greenwave.autodiff import Tensor
from greenwave.dataset import Trajectory
from greenwave.evaluation import (AttentionStats, EvalConfig, ModelBundle,
                                  ModelController, PolicyController, attention_stats,
                                  compare, coordination_index, last_change_times,
                                  model_rollout, phase_trace, rollout)
from greenwave.model import ModelConfig, init_params
from greenwave.policies import PolicySpec
from greenwave.sim import OBS_DIM, DemandProfile, SimConfig
from greenwave.topology import grid_network

SHORT = SimConfig(episode_length=200)


def tiny_bundle(num_agents=4, seed=0, **overrides):
    base = dict(num_agents=num_agents, hidden_dim=8, heads=2, encoder_layers=1,
                graph_layers=1, context=3, dropout=0.0)
    base.update(overrides)
    cfg = ModelConfig(**base)
    return ModelBundle(init_params(cfg, seed=seed), cfg, r_max=100.0)


def coordination_oracle(trace, network, epsilon=1.0, interval=5):
    t_len, n = trace.shape

    def last_change(t, i):
        for s in range(t, 0, -1):
            if trace[s, i] != trace[s - 1, i]:
                return s
        return 0

    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)
             if network.adjacency[i, j]]
    if not pairs:
        return float("nan")
    total = 0.0
    for i, j in pairs:
        target = round(network.free_flow_time[i, j] / interval)
        hits = sum(abs(abs(last_change(t, i) - last_change(t, j)) - target) < epsilon
                   for t in range(t_len))
        total += hits / t_len
    return total / len(pairs)


def test_rtg_update_rule_and_exact_identity():
    net = grid_network(2, 2)
    bundle = tiny_bundle()
    result = model_rollout(bundle, net, DemandProfile.nominal(), target_return=-100.0,
                           seed=4, config=SHORT)
    trace = result.rtg_trace
    rewards = result.trajectory.rewards
    assert trace[0] == -100.0
    assert trace[1] == -100.0 - rewards[0]
    prefix = np.concatenate([[0.0], np.cumsum(rewards)[:-1]])
    np.testing.assert_array_equal(trace, -100.0 - prefix)


def test_model_rollout_is_deterministic_per_seed():
    net = grid_network(2, 2)
    bundle = tiny_bundle(seed=1)
    one = model_rollout(bundle, net, DemandProfile.nominal(), -50.0, seed=7, config=SHORT)
    two = model_rollout(bundle, net, DemandProfile.nominal(), -50.0, seed=7, config=SHORT)
    np.testing.assert_array_equal(one.trajectory.observations,
                                  two.trajectory.observations)
    np.testing.assert_array_equal(one.trajectory.actions, two.trajectory.actions)
    np.testing.assert_array_equal(one.trajectory.rewards, two.trajectory.rewards)
    other = model_rollout(bundle, net, DemandProfile.nominal(), -50.0, seed=8, config=SHORT)
    assert not np.array_equal(one.trajectory.rewards, other.trajectory.rewards)


def test_rollout_aborts_on_non_finite_logits():
    net = grid_network(2, 2)
    bundle = tiny_bundle(seed=2)
    bundle.params["head.b"].data[0] = float("inf")
    with pytest.raises(RuntimeError, match="non-finite"):
        model_rollout(bundle, net, DemandProfile.nominal(), -10.0, seed=0, config=SHORT)


def test_target_return_must_be_finite():
    with pytest.raises(ValueError):
        ModelController(tiny_bundle(), float("inf"), seed=0)


def test_phase_trace_reads_the_one_hot_block():
    obs = np.zeros((3, 2, OBS_DIM))
    phases = np.array([[0, 3], [1, 3], [2, 0]])
    for t in range(3):
        for i in range(2):
            obs[t, i, 8 + phases[t, i]] = 1.0
    traj = Trajectory(obs, np.zeros((3, 2), dtype=int), np.zeros(3))
    np.testing.assert_array_equal(phase_trace(traj), phases)


def test_last_change_times_hand_example():
    trace = np.array([[0], [0], [1], [1], [2]])
    np.testing.assert_array_equal(last_change_times(trace),
                                  [[0], [0], [2], [2], [4]])


def test_coordination_simultaneous_changes_with_zero_offset():
    net = grid_network(1, 2, segment_length=10.0)  # free-flow under half interval
    trace = np.array([[0, 0], [1, 1], [1, 1], [2, 2], [3, 3]])
    assert coordination_index(trace, net) == 1.0


def test_coordination_frozen_phases_depends_on_target_offset():
    still = np.zeros((10, 2), dtype=int)
    near = grid_network(1, 2, segment_length=10.0)
    far = grid_network(1, 2)  # default 400 m, target offset 6 intervals
    assert coordination_index(still, near) == 1.0
    assert coordination_index(still, far) == 0.0


def test_coordination_matches_brute_force_oracle():
    net = grid_network(1, 2, segment_length=140.0)  # target offset 2 intervals
    rng = np.random.default_rng(5)
    for _ in range(5):
        trace = rng.integers(0, 4, (40, 2))
        got = coordination_index(trace, net)
        assert got == coordination_oracle(trace, net)
        assert 0.0 <= got <= 1.0


def test_coordination_no_edges_is_nan_and_validates():
    single = grid_network(1, 1)
    assert math.isnan(coordination_index(np.zeros((5, 1), dtype=int), single))
    net = grid_network(1, 2)
    with pytest.raises(ValueError):
        coordination_index(np.zeros((5, 2), dtype=int), net, epsilon=0.0)
    with pytest.raises(ValueError):
        coordination_index(np.zeros(5, dtype=int), net)


def test_policy_rollout_records_trajectory_and_flows():
    net = grid_network(2, 2)
    controller = PolicyController(PolicySpec("max_pressure"), seed=3)
    result = rollout(controller, net, DemandProfile.high(), seed=3, config=SHORT)
    assert len(result.trajectory) == SHORT.decisions_per_episode
    assert result.rtg_trace is None
    assert result.edge_flow.shape == (4, 4)
    assert result.edge_flow.sum() >= 0
    assert result.metrics.injected > 0


def test_attention_stats_partition_and_masked_classes():
    net = grid_network(3, 3)
    bundle = tiny_bundle(num_agents=9, seed=4)
    controller = PolicyController(PolicySpec("max_pressure"), seed=5)
    result = rollout(controller, net, DemandProfile.nominal(), seed=5, config=SHORT)
    stats = attention_stats(bundle, net, result.trajectory, result.edge_flow)
    classes = stats.by_class()
    assert stats.max_row_sum_error < 1e-12
    for name in ("self", "1-hop", "2-hop", "3+hop"):
        assert name in classes
    assert classes["2-hop"]["mean"] == 0.0
    assert classes["3+hop"]["mean"] == 0.0
    hop_total = sum(classes[c]["mean"] * classes[c]["pairs"]
                    for c in ("self", "1-hop", "2-hop", "3+hop"))
    assert abs(hop_total - 9.0) < 1e-9
    assert classes["upstream"]["pairs"] + classes["downstream"]["pairs"] \
        <= classes["1-hop"]["pairs"]


def test_attention_stats_single_node_is_pure_self():
    net = grid_network(1, 1)
    bundle = tiny_bundle(num_agents=1, seed=6)
    controller = PolicyController(PolicySpec("fixed_time"), seed=0)
    result = rollout(controller, net, DemandProfile.nominal(), seed=0, config=SHORT)
    stats = attention_stats(bundle, net, result.trajectory, result.edge_flow)
    classes = stats.by_class()
    assert classes["self"]["mean"] == 1.0
    assert "2-hop" not in classes and "1-hop" not in classes


def test_attention_stats_requires_graph_attention():
    net = grid_network(2, 2)
    bundle = tiny_bundle(use_graph_attention=False, seed=7)
    traj = Trajectory(np.zeros((3, 4, OBS_DIM)), np.zeros((3, 4), dtype=int),
                      np.zeros(3))
    with pytest.raises(RuntimeError):
        attention_stats(bundle, net, traj, np.zeros((4, 4)))


def test_compare_pairs_streams_and_reports_zero_spread():
    net = grid_network(2, 2)
    report = compare({"a": PolicySpec("max_pressure"), "b": PolicySpec("max_pressure")},
                     net, EvalConfig(episodes=2, seeds=(0,)), SHORT)
    assert report.per_seed[("a", 0)] == report.per_seed[("b", 0)]
    assert report.deltas[("a", "b")] == 0.0
    for metric, (mean, std) in report.aggregates["a"].items():
        assert std == 0.0
    rows = report.rows()
    assert rows[0]["method"] == "a" and "avg_travel_time" in rows[0]


def test_compare_orders_max_pressure_below_fixed_time():
    net = grid_network(3, 3)
    report = compare({"fixed": PolicySpec("fixed_time"),
                      "mp": PolicySpec("max_pressure")},
                     net, EvalConfig(episodes=2, seeds=(0,)),
                     SimConfig(episode_length=1800))
    fixed = report.aggregates["fixed"]["avg_travel_time"][0]
    mp = report.aggregates["mp"]["avg_travel_time"][0]
    assert mp < fixed


def test_compare_validates_methods():
    net = grid_network(1, 1)
    with pytest.raises(ValueError):
        compare({}, net, EvalConfig(episodes=1, seeds=(0,)), SHORT)
    with pytest.raises(TypeError):
        compare({"bad": object()}, net, EvalConfig(episodes=1, seeds=(0,)), SHORT)


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(target_fraction=0.0)
    with pytest.raises(ValueError):
        EvalConfig(episodes=0)
    with pytest.raises(ValueError):
        EvalConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        ModelBundle({}, ModelConfig(num_agents=1), r_max=0.0)
