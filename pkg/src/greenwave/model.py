"""Graph-attention decision transformer over intersection agents.

The network encodes per-intersection observations, mixes them across the road
graph with masked multi-head attention, pools each timestep into three tokens
(return-to-go, state, action), runs a causal transformer over the interleaved
token sequence, and decodes per-agent phase logits in parallel. Both the graph
stage and the return conditioning can be switched off for ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    num_agents: int
    hidden_dim: int = 128
    heads: int = 4
    encoder_layers: int = 3      # temporal transformer depth
    graph_layers: int = 2
    context: int = 20
    dropout: float = 0.1
    obs_dim: int = 17
    num_phases: int = 4
    use_graph_attention: bool = True
    use_rtg: bool = True

    def __post_init__(self):
        if self.num_agents < 1 or self.hidden_dim < 1 or self.context < 1:
            raise ValueError("num_agents, hidden_dim and context must be >= 1")
        if self.encoder_layers < 1 or self.graph_layers < 0:
            raise ValueError("encoder_layers must be >= 1 and graph_layers >= 0")
        if self.hidden_dim % self.heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by "
                             f"{self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads


def _linear_init(rng, fan_in, fan_out):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)


def _bias_init(rng, fan_in, size):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size), requires_grad=True)


def _embed_init(rng, rows, dim):
    return Tensor(rng.normal(0.0, 0.02, (rows, dim)), requires_grad=True)


def _ln_init(dim):
    return (Tensor(np.ones(dim), requires_grad=True),
            Tensor(np.zeros(dim), requires_grad=True))


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameter dict; linear layers uniform +-1/sqrt(fan_in), embeddings N(0, 0.02)."""
    rng = np.random.default_rng(seed)
    d, p = config.hidden_dim, config.num_phases
    params: dict[str, Tensor] = {
        "enc.w1": _linear_init(rng, config.obs_dim, d),
        "enc.b1": _bias_init(rng, config.obs_dim, d),
        "enc.w2": _linear_init(rng, d, d),
        "enc.b2": _bias_init(rng, d, d),
        "agent_embed": _embed_init(rng, config.num_agents, d),
        "pos_embed": _embed_init(rng, config.context, d),
        "rtg.w": _linear_init(rng, 1, d),
        "rtg.b": _bias_init(rng, 1, d),
        "action_embed": _embed_init(rng, p, d),
        "action_placeholder": _embed_init(rng, 1, d),
    }
    for g in range(config.graph_layers):
        for name in ("wq", "wk", "wv", "wo"):
            params[f"gat{g}.{name}"] = _linear_init(rng, d, d)
        for name in ("bq", "bk", "bv", "bo"):
            params[f"gat{g}.{name}"] = Tensor(np.zeros(d), requires_grad=True)
        params[f"gat{g}.ln_gain"], params[f"gat{g}.ln_bias"] = _ln_init(d)
    for layer in range(config.encoder_layers):
        blk = f"blk{layer}"
        params[f"{blk}.ln1_gain"], params[f"{blk}.ln1_bias"] = _ln_init(d)
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{blk}.{name}"] = _linear_init(rng, d, d)
        for name in ("bq", "bk", "bv", "bo"):
            params[f"{blk}.{name}"] = Tensor(np.zeros(d), requires_grad=True)
        params[f"{blk}.ln2_gain"], params[f"{blk}.ln2_bias"] = _ln_init(d)
        params[f"{blk}.ff_w1"] = _linear_init(rng, d, 4 * d)
        params[f"{blk}.ff_b1"] = Tensor(np.zeros(4 * d), requires_grad=True)
        params[f"{blk}.ff_w2"] = _linear_init(rng, 4 * d, d)
        params[f"{blk}.ff_b2"] = Tensor(np.zeros(d), requires_grad=True)
    params["ln_f_gain"], params["ln_f_bias"] = _ln_init(d)
    params["head.w"] = _linear_init(rng, d, p)
    params["head.b"] = Tensor(np.zeros(p), requires_grad=True)
    return params


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., T, d) -> (..., heads, T, d/heads)."""
    *lead, t, d = x.data.shape
    x = ad.reshape(x, (*lead, t, heads, d // heads))
    axes = list(range(x.data.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return ad.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., heads, T, d/heads) -> (..., T, d)."""
    axes = list(range(x.data.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = ad.transpose(x, axes)
    *lead, t, heads, hd = x.data.shape
    return ad.reshape(x, (*lead, t, heads * hd))


def _attention(params: dict, prefix: str, x: Tensor, blocked: np.ndarray,
               heads: int, capture: list | None = None) -> Tensor:
    """Masked multi-head scaled dot-product self-attention over the -2 axis.

    ``blocked`` is a boolean (T, T) matrix, True where position i must not
    attend to position j; those weights are exactly zero after the softmax.
    """
    q = _split_heads(ad.add(ad.matmul(x, params[f"{prefix}.wq"]), params[f"{prefix}.bq"]), heads)
    k = _split_heads(ad.add(ad.matmul(x, params[f"{prefix}.wk"]), params[f"{prefix}.bk"]), heads)
    v = _split_heads(ad.add(ad.matmul(x, params[f"{prefix}.wv"]), params[f"{prefix}.bv"]), heads)
    axes = list(range(k.data.ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    scores = ad.mul(ad.matmul(q, ad.transpose(k, axes)), 1.0 / math.sqrt(q.data.shape[-1]))
    weights = ad.softmax(ad.masked_fill(scores, blocked), axis=-1)
    if capture is not None:
        capture.append(weights.data.copy())
    mixed = _merge_heads(ad.matmul(weights, v))
    return ad.add(ad.matmul(mixed, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def encode_observations(params: dict, config: ModelConfig, obs) -> Tensor:
    """MLP(o) + agent embedding + positional encoding; (B, K, N, d)."""
    obs = np.asarray(obs, dtype=np.float64)
    k, n = obs.shape[-3], obs.shape[-2]
    if obs.shape[-1] != config.obs_dim or k != config.context or n != config.num_agents:
        raise ValueError(f"observations must end in ({config.context}, "
                         f"{config.num_agents}, {config.obs_dim}), got {obs.shape}")
    h = ad.relu(ad.add(ad.matmul(obs, params["enc.w1"]), params["enc.b1"]))
    h = ad.add(ad.matmul(h, params["enc.w2"]), params["enc.b2"])
    h = ad.add(h, params["agent_embed"])
    pos = ad.reshape(params["pos_embed"], (k, 1, config.hidden_dim))
    return ad.add(h, pos)


def graph_attention(params: dict, config: ModelConfig, h: Tensor,
                    adjacency: np.ndarray, capture: list | None = None,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Per-timestep attention over road neighbors; identity when ablated."""
    if not config.use_graph_attention:
        return h
    n = config.num_agents
    adjacency = np.asarray(adjacency, dtype=bool)
    if adjacency.shape != (n, n):
        raise ValueError(f"adjacency must be ({n}, {n}), got {adjacency.shape}")
    if not np.all(adjacency.diagonal()):
        raise ValueError("adjacency needs self-loops for attention")
    blocked = ~adjacency
    for g in range(config.graph_layers):
        mixed = _attention(params, f"gat{g}", h, blocked, config.heads, capture)
        if rng is not None and config.dropout > 0:
            mixed = ad.dropout(mixed, config.dropout, rng)
        h = ad.layer_norm(ad.add(h, mixed),
                          params[f"gat{g}.ln_gain"], params[f"gat{g}.ln_bias"])
    return h


def _broadcast_rows(row: Tensor, lead_shape: tuple) -> Tensor:
    """Expand a (d,)-like tensor to (*lead_shape, d) inside the graph."""
    target = (*lead_shape, row.data.shape[-1])
    return ad.add(Tensor(np.zeros(target)), ad.reshape(row, (1,) * len(lead_shape) + row.data.shape))


def build_sequence(params: dict, config: ModelConfig, rtg, h: Tensor, actions) -> Tensor:
    """Interleave [RTG_t, S_t, A_t] per step into a (B, 3K, d) token sequence.

    ``rtg`` is already normalized by R_max. The final step's action token is
    a learned placeholder, since that action is what the model predicts.
    """
    b, k, n, d = h.data.shape
    rtg = np.asarray(rtg, dtype=np.float64).reshape(b, k, 1)
    actions = np.asarray(actions)
    if actions.shape != (b, k, n):
        raise ValueError(f"actions must be ({b}, {k}, {n}), got {actions.shape}")
    if config.use_rtg:
        rtg_tok = ad.add(ad.matmul(rtg, params["rtg.w"]), params["rtg.b"])
    else:
        rtg_tok = Tensor(np.zeros((b, k, d)))
    state_tok = ad.mean(h, axis=2)
    action_tok = ad.mean(ad.embedding_lookup(params["action_embed"], actions), axis=2)
    tail = _broadcast_rows(ad.reshape(params["action_placeholder"], (d,)), (b, 1))
    if k > 1:
        action_tok = ad.concat(
            [ad.take(action_tok, np.arange(k - 1), axis=1), tail], axis=1)
    else:
        action_tok = tail
    tokens = ad.stack([rtg_tok, state_tok, action_tok], axis=2)
    return ad.reshape(tokens, (b, 3 * k, d))


def causal_mask(tokens: int) -> np.ndarray:
    """Boolean (T, T), True above the diagonal (those attends are blocked)."""
    return ~np.tril(np.ones((tokens, tokens), dtype=bool))


def temporal_forward(params: dict, config: ModelConfig, tokens: Tensor,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Pre-norm causal transformer over the 3K token positions, then a final norm."""
    t = tokens.data.shape[-2]
    if t != 3 * config.context:
        raise ValueError(f"expected {3 * config.context} tokens, got {t}")
    blocked = causal_mask(t)
    z = tokens
    train = rng is not None and config.dropout > 0
    for layer in range(config.encoder_layers):
        blk = f"blk{layer}"
        normed = ad.layer_norm(z, params[f"{blk}.ln1_gain"], params[f"{blk}.ln1_bias"])
        mixed = _attention(params, blk, normed, blocked, config.heads)
        if train:
            mixed = ad.dropout(mixed, config.dropout, rng)
        z = ad.add(z, mixed)
        normed = ad.layer_norm(z, params[f"{blk}.ln2_gain"], params[f"{blk}.ln2_bias"])
        ff = ad.relu(ad.add(ad.matmul(normed, params[f"{blk}.ff_w1"]), params[f"{blk}.ff_b1"]))
        ff = ad.add(ad.matmul(ff, params[f"{blk}.ff_w2"]), params[f"{blk}.ff_b2"])
        if train:
            ff = ad.dropout(ff, config.dropout, rng)
        z = ad.add(z, ff)
    return ad.layer_norm(z, params["ln_f_gain"], params["ln_f_bias"])


def predict_actions(params: dict, config: ModelConfig, z: Tensor, h: Tensor) -> Tensor:
    """Per-agent phase logits from the state-token stream: (B, K, N, phases)."""
    b, k, n, d = h.data.shape
    state_positions = 3 * np.arange(k) + 1
    z_state = ad.take(z, state_positions, axis=1)
    x = ad.add(ad.add(ad.reshape(z_state, (b, k, 1, d)), h), params["agent_embed"])
    return ad.add(ad.matmul(x, params["head.w"]), params["head.b"])


def forward(params: dict, config: ModelConfig, obs, actions, rtg,
            adjacency: np.ndarray, rng: np.random.Generator | None = None,
            capture: list | None = None) -> Tensor:
    """Full batched pass: observations to per-agent logits (B, K, N, phases).

    Unbatched (K, N, ...) inputs are accepted and yield (K, N, phases).
    """
    obs = np.asarray(obs, dtype=np.float64)
    squeeze = obs.ndim == 3
    if squeeze:
        obs = obs[None]
        actions = np.asarray(actions)[None]
        rtg = np.asarray(rtg, dtype=np.float64)[None]
    h = encode_observations(params, config, obs)
    h = graph_attention(params, config, h, adjacency, capture=capture, rng=rng)
    tokens = build_sequence(params, config, rtg, h, actions)
    z = temporal_forward(params, config, tokens, rng=rng)
    logits = predict_actions(params, config, z, h)
    return ad.reshape(logits, logits.data.shape[1:]) if squeeze else logits


def equivariance_check(params: dict, config: ModelConfig, adjacency: np.ndarray,
                       sigma, seed: int = 0, permute_adjacency: bool = True) -> float:
    """Max |logit drift| between permuted-forward and forward-of-permuted.

    Agent embeddings are relabeled together with the agents. Passing
    ``permute_adjacency=False`` deliberately breaks the correspondence and
    serves as the negative control.
    """
    rng = np.random.default_rng(seed)
    n, k = config.num_agents, config.context
    obs = rng.random((k, n, config.obs_dim))
    actions = rng.integers(0, config.num_phases, (k, n))
    rtg = -rng.random(k)
    inverse = sigma.inverse

    base = forward(params, config, obs, actions, rtg, adjacency).data
    relabeled = dict(params)
    relabeled["agent_embed"] = Tensor(params["agent_embed"].data[inverse])
    adj = adjacency[np.ix_(inverse, inverse)] if permute_adjacency else adjacency
    moved = forward(relabeled, config, obs[:, inverse], actions[:, inverse],
                    rtg, adj).data
    return float(np.max(np.abs(base[:, inverse] - moved)))
