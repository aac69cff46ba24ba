"""Self-contained correctness suites, shared by `greenwave check` and the tests.

Each suite returns CheckResult records instead of asserting, so the CLI can
print a timed pass/fail table and tests can assert on the same outcomes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad

GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def finite_difference_gradients(fn: Callable[[Sequence[np.ndarray]], float],
                                inputs: Sequence[np.ndarray],
                                step: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradients of a scalar function, one per input array.

    ``fn`` must be a pure function of the input values; it is called
    2 * sum(x.size) times, so keep the arrays small.
    """
    grads = []
    work = [np.array(x, dtype=np.float64) for x in inputs]
    for x in work:
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = fn(work)
            flat[j] = orig - step
            lo = fn(work)
            flat[j] = orig
            gflat[j] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def gradient_check(build: Callable[[Sequence[ad.Tensor]], ad.Tensor],
                   inputs: Sequence[np.ndarray],
                   rtol: float = GRAD_RTOL,
                   atol: float = GRAD_ATOL,
                   step: float = 1e-6) -> tuple[bool, float]:
    """Compare tape gradients of ``build`` against central differences.

    ``build`` maps leaf Tensors to a scalar Tensor and must be deterministic.
    Returns (ok, worst absolute discrepancy beyond tolerance band).
    """
    leaves = [ad.Tensor(x, requires_grad=True) for x in inputs]
    with ad.Tape() as tape:
        out = build(leaves)
        tape.backward(out)
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad for l in leaves]

    def value(arrays: Sequence[np.ndarray]) -> float:
        probe = [ad.Tensor(a) for a in arrays]
        return float(build(probe).data)

    numeric = finite_difference_gradients(value, inputs, step=step)
    worst = 0.0
    ok = True
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n) - (atol + rtol * np.abs(n))
        worst = max(worst, float(err.max(initial=0.0)))
        if not np.allclose(a, n, rtol=rtol, atol=atol):
            ok = False
    return ok, worst


def _away_from_kinks(rng: np.random.Generator, shape, margin: float = 1e-3) -> np.ndarray:
    """Random values kept away from 0 so relu-style kinks don't break FD."""
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, margin, x)
    return x


def op_gradient_cases(seed: int = 0) -> list[tuple[str, Callable, list[np.ndarray]]]:
    """One named scalar-valued case per differentiable op."""
    rng = np.random.default_rng(seed)
    a23 = rng.standard_normal((2, 3))
    b23 = rng.standard_normal((2, 3))
    m34 = rng.standard_normal((3, 4))
    batch = rng.standard_normal((2, 3, 4))
    bmat = rng.standard_normal((2, 4, 5))
    gain = rng.standard_normal(4) * 0.5 + 1.0
    bias = rng.standard_normal(4) * 0.1
    table = rng.standard_normal((5, 3))
    idx = np.array([[0, 4], [2, 2]])
    mask = rng.random((2, 3, 4)) < 0.3
    targets = np.array([[1, 0, 3], [2, 2, 1]])
    drop_mask_rng_seed = 7

    def scalar(t):
        return ad.sum(t)

    cases: list[tuple[str, Callable, list[np.ndarray]]] = [
        ("add", lambda xs: scalar(ad.add(xs[0], xs[1])), [a23, b23]),
        ("add_broadcast", lambda xs: scalar(ad.add(xs[0], xs[1])), [batch, rng.standard_normal(4)]),
        ("sub", lambda xs: scalar(ad.sub(xs[0], xs[1])), [a23, b23]),
        ("mul", lambda xs: scalar(ad.mul(xs[0], xs[1])), [a23, b23]),
        ("neg", lambda xs: scalar(ad.neg(xs[0])), [a23]),
        ("matmul", lambda xs: scalar(ad.matmul(xs[0], xs[1])), [a23, m34]),
        ("matmul_batched", lambda xs: scalar(ad.matmul(xs[0], xs[1])), [batch, bmat]),
        ("relu", lambda xs: scalar(ad.relu(xs[0])), [_away_from_kinks(rng, (3, 4))]),
        ("leaky_relu", lambda xs: scalar(ad.leaky_relu(xs[0])), [_away_from_kinks(rng, (3, 4))]),
        ("softmax", lambda xs: scalar(ad.mul(ad.softmax(xs[0], axis=-1), b23)), [a23 * 2.0]),
        ("log_softmax", lambda xs: scalar(ad.mul(ad.log_softmax(xs[0], axis=-1), b23)), [a23 * 2.0]),
        ("layer_norm", lambda xs: scalar(ad.layer_norm(xs[0], xs[1], xs[2])), [batch, gain, bias]),
        ("dropout", lambda xs: scalar(ad.dropout(xs[0], 0.4, np.random.default_rng(drop_mask_rng_seed))), [batch]),
        ("embedding_lookup", lambda xs: scalar(ad.embedding_lookup(xs[0], idx)), [table]),
        ("concat", lambda xs: scalar(ad.concat([xs[0], xs[1]], axis=1)), [a23, b23]),
        ("stack", lambda xs: scalar(ad.stack([xs[0], xs[1]], axis=0)), [a23, b23]),
        ("masked_fill", lambda xs: scalar(ad.softmax(ad.masked_fill(xs[0], mask), axis=-1)), [batch]),
        ("sum_axis", lambda xs: scalar(ad.mul(ad.sum(xs[0], axis=1), 0.5)), [batch]),
        ("sum_keepdims", lambda xs: scalar(ad.mul(ad.sum(xs[0], axis=-1, keepdims=True), b23[:, :1])), [a23]),
        ("mean", lambda xs: scalar(ad.mul(ad.mean(xs[0], axis=0), 2.0)), [batch]),
        ("reshape", lambda xs: scalar(ad.mul(ad.reshape(xs[0], (4, 6)), 1.5)), [batch]),
        ("transpose", lambda xs: scalar(ad.mul(ad.transpose(xs[0], (2, 0, 1)), 0.7)), [batch]),
        ("take", lambda xs: scalar(ad.take(xs[0], np.array([2, 0, 2]), axis=1)), [batch]),
        ("cross_entropy", lambda xs: scalar(ad.cross_entropy(xs[0], targets)), [a23[..., None] * np.ones(4) + batch]),
    ]
    return cases


def check_op_gradients(seed: int = 0) -> list[CheckResult]:
    """Finite-difference check for every differentiable op."""
    results = []
    for name, build, inputs in op_gradient_cases(seed):
        t0 = time.perf_counter()
        ok, worst = gradient_check(build, inputs)
        results.append(CheckResult(f"grad/{name}", ok, f"worst excess {worst:.2e}", time.perf_counter() - t0))
    return results


def _tiny_model_setup(seed: int = 0):
    from .model import ModelConfig, init_params
    from .topology import grid_network

    network = grid_network(2, 2)
    config = ModelConfig(num_agents=4, hidden_dim=16, heads=2, encoder_layers=1,
                         graph_layers=1, context=4, dropout=0.0)
    return network, config, init_params(config, seed=seed)


def check_full_model_gradient(seed: int = 0) -> CheckResult:
    """Central differences through the whole network on a tiny configuration."""
    from .model import forward
    from .training import masked_mean_ce

    t0 = time.perf_counter()
    network, config, params = _tiny_model_setup(seed)
    rng = np.random.default_rng(seed + 1)
    obs = rng.random((1, config.context, config.num_agents, config.obs_dim))
    actions = rng.integers(0, config.num_phases, (1, config.context, config.num_agents))
    rtg = -rng.random((1, config.context))
    mask = np.ones((1, config.context))
    names = sorted(params)

    def build(leaves):
        probe = dict(zip(names, leaves))
        logits = forward(probe, config, obs, actions, rtg, network.adjacency)
        return masked_mean_ce(logits, actions, mask)

    inputs = [params[name].data for name in names]
    ok, worst = gradient_check(build, inputs)
    return CheckResult("grad/full_model", ok,
                       f"{sum(x.size for x in inputs)} partials, worst excess {worst:.2e}",
                       time.perf_counter() - t0)


def check_equivariance(permutations: int = 20, seed: int = 0) -> list[CheckResult]:
    """Relabeling agents commutes with the forward pass on Grid 3x3."""
    from .model import ModelConfig, equivariance_check, init_params
    from .topology import AgentPermutation, grid_network

    t0 = time.perf_counter()
    network = grid_network(3, 3)
    config = ModelConfig(num_agents=9, hidden_dim=16, heads=2, encoder_layers=1,
                         graph_layers=1, context=4, dropout=0.0)
    params = init_params(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for trial in range(permutations):
        sigma = AgentPermutation.random(9, rng)
        worst = max(worst, equivariance_check(params, config, network.adjacency,
                                              sigma, seed=trial))
    results = [CheckResult("equivariance/permutations", worst < 1e-9,
                           f"max deviation {worst:.2e} over {permutations} permutations",
                           time.perf_counter() - t0)]
    t0 = time.perf_counter()
    swap = np.arange(9)
    swap[[0, 4]] = (4, 0)  # corner vs center: degrees differ, not an automorphism
    control = equivariance_check(params, config, network.adjacency,
                                 AgentPermutation(swap), seed=0,
                                 permute_adjacency=False)
    results.append(CheckResult("equivariance/negative_control", control > 1e-3,
                               f"control deviation {control:.2e}",
                               time.perf_counter() - t0))
    return results


def check_causality(pairs: int = 10, seed: int = 0) -> CheckResult:
    """Perturbing steps after t must leave step-t logits bit-identical."""
    from .model import ModelConfig, forward, init_params
    from .topology import grid_network

    t0 = time.perf_counter()
    network = grid_network(2, 2)
    config = ModelConfig(num_agents=4, hidden_dim=16, heads=2, encoder_layers=2,
                         graph_layers=1, context=6, dropout=0.0)
    params = init_params(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    obs = rng.random((config.context, config.num_agents, config.obs_dim))
    actions = rng.integers(0, config.num_phases, (config.context, config.num_agents))
    rtg = -rng.random(config.context)
    base = forward(params, config, obs, actions, rtg, network.adjacency).data
    exact = 0
    for _ in range(pairs):
        cut = int(rng.integers(0, config.context - 1))
        kind = rng.choice(("obs", "action", "rtg", "all"))
        obs2, actions2, rtg2 = obs.copy(), actions.copy(), rtg.copy()
        if kind in ("obs", "all"):
            obs2[cut + 1:] = rng.random(obs2[cut + 1:].shape)
        if kind in ("action", "all"):
            actions2[cut + 1:] = rng.integers(0, 4, actions2[cut + 1:].shape)
        if kind in ("rtg", "all"):
            rtg2[cut + 1:] = -rng.random(rtg2[cut + 1:].shape)
        moved = forward(params, config, obs2, actions2, rtg2, network.adjacency).data
        if np.array_equal(base[:cut + 1], moved[:cut + 1]):
            exact += 1
    return CheckResult("causality/bit_exact", exact == pairs,
                       f"{exact}/{pairs} perturbation pairs bit-identical",
                       time.perf_counter() - t0)


def check_rtg_bookkeeping(seed: int = 0) -> list[CheckResult]:
    """Rollout RTG identity, and rtg-input invariance of the ablated model."""
    from .evaluation import ModelBundle, model_rollout
    from .model import ModelConfig, forward, init_params
    from .sim import DemandProfile, SimConfig
    from .topology import grid_network

    t0 = time.perf_counter()
    network = grid_network(2, 2)
    config = ModelConfig(num_agents=4, hidden_dim=16, heads=2, encoder_layers=1,
                         graph_layers=1, context=4, dropout=0.0)
    bundle = ModelBundle(init_params(config, seed=seed), config, r_max=50.0)
    result = model_rollout(bundle, network, DemandProfile.nominal(), -45.0,
                           seed=seed, config=SimConfig(episode_length=300))
    prefix = np.concatenate([[0.0], np.cumsum(result.trajectory.rewards)[:-1]])
    exact = np.array_equal(result.rtg_trace, -45.0 - prefix)
    results = [CheckResult("rtg/rollout_identity", bool(exact),
                           "target minus reward prefix, bitwise",
                           time.perf_counter() - t0)]
    t0 = time.perf_counter()
    ablated = ModelConfig(num_agents=4, hidden_dim=16, heads=2, encoder_layers=1,
                          graph_layers=1, context=4, dropout=0.0, use_rtg=False)
    params = init_params(ablated, seed=seed)
    rng = np.random.default_rng(seed + 2)
    obs = rng.random((ablated.context, 4, ablated.obs_dim))
    actions = rng.integers(0, 4, (ablated.context, 4))
    one = forward(params, ablated, obs, actions, -rng.random(4), network.adjacency).data
    two = forward(params, ablated, obs, actions, -90.0 * rng.random(4), network.adjacency).data
    results.append(CheckResult("rtg/ablation_invariance", np.array_equal(one, two),
                               "logits identical for different rtg inputs",
                               time.perf_counter() - t0))
    return results


def check_conservation(episodes: int = 100, seed: int = 0) -> list[CheckResult]:
    """Vehicle accounting holds every step; seeded episodes serialize identically."""
    from .dataset import collect, save_trajectories
    from .policies import PolicySpec, sample_action
    from .sim import REGIME_PRESETS, SimConfig, reset, step
    from .topology import grid_network

    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    network = grid_network(3, 3)
    config = SimConfig()
    violations = 0
    for episode in range(episodes):
        tag = ("low", "nominal", "high")[int(rng.integers(0, 3))]
        spec = PolicySpec("mixture", epsilon=float(rng.random()), seed=episode)
        state = reset(network, REGIME_PRESETS[tag](), int(rng.integers(0, 2 ** 31)),
                      config)
        policy_rng = np.random.default_rng([seed, episode])
        done = False
        while not done:
            state, _, done = step(state, sample_action(spec, state, network, policy_rng))
            if not state.conservation_holds():
                violations += 1
                break
    results = [CheckResult("sim/conservation", violations == 0,
                           f"{episodes} episodes, {violations} violations",
                           time.perf_counter() - t0)]

    t0 = time.perf_counter()
    import os
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        paths = [os.path.join(tmp, name) for name in ("a.jsonl", "b.jsonl")]
        for path in paths:
            trajs = collect(network, PolicySpec("mixture", epsilon=0.2), 2, seed=seed,
                            config=SimConfig(episode_length=600))
            save_trajectories(path, trajs, network=network)
        with open(paths[0], "rb") as fa, open(paths[1], "rb") as fb:
            identical = fa.read() == fb.read()
    results.append(CheckResult("sim/deterministic_serialization", identical,
                               "re-collected seeded dataset is byte-identical",
                               time.perf_counter() - t0))
    return results


def _coordination_oracle(trace: np.ndarray, network, epsilon: float,
                         interval: int) -> float:
    t_len, n = trace.shape
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)
             if network.adjacency[i, j]]
    if not pairs:
        return float("nan")

    def last_change(t, i):
        for s in range(t, 0, -1):
            if trace[s, i] != trace[s - 1, i]:
                return s
        return 0

    total = 0.0
    for i, j in pairs:
        target = round(network.free_flow_time[i, j] / interval)
        hits = sum(abs(abs(last_change(t, i) - last_change(t, j)) - target) < epsilon
                   for t in range(t_len))
        total += hits / t_len
    return total / len(pairs)


def check_coordination_oracle(traces: int = 50, seed: int = 0) -> CheckResult:
    """Vectorized coordination index equals the brute-force scan exactly."""
    from .evaluation import coordination_index
    from .topology import grid_network

    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    shapes = [grid_network(1, 2, segment_length=60.0), grid_network(1, 3),
              grid_network(2, 2, segment_length=140.0)]
    mismatches = 0
    bounded = True
    for trial in range(traces):
        network = shapes[trial % len(shapes)]
        t_len = int(rng.integers(1, 51))
        trace = rng.integers(0, 4, (t_len, network.num_intersections))
        got = coordination_index(trace, network)
        want = _coordination_oracle(trace, network, epsilon=1.0, interval=5)
        if got != want:
            mismatches += 1
        if not 0.0 <= got <= 1.0:
            bounded = False
    return CheckResult("coordination/oracle", mismatches == 0 and bounded,
                       f"{traces} synthetic traces, {mismatches} mismatches",
                       time.perf_counter() - t0)


def run_all_checks(fast: bool = False, seed: int = 0) -> list[CheckResult]:
    """Every property suite, in dependency order. ``fast`` trims episode counts."""
    results = list(check_op_gradients(seed))
    results.append(check_full_model_gradient(seed))
    results.extend(check_equivariance(permutations=5 if fast else 20, seed=seed))
    results.append(check_causality(pairs=10, seed=seed))
    results.extend(check_rtg_bookkeeping(seed))
    results.extend(check_conservation(episodes=10 if fast else 100, seed=seed))
    results.append(check_coordination_oracle(traces=50, seed=seed))
    return results
