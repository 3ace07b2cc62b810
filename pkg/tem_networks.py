#!/usr/bin/env python3
"""
TEM Networks Module
Shared actor (action network + transformer message network) and centralized critic
built on autodiff_core. Actor parameter shapes depend only on the observation length,
the network dims and the neighbor slot count, never on the number of agents.
"""

import hashlib
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from autodiff_core import (
    DimensionError,
    Tensor,
    clip,
    concat,
    exp,
    gru_cell,
    layer_norm,
    linear,
    log,
    matmul,
    multiply,
    no_grad,
    parameter,
    relu,
    reshape,
    softmax,
    stop_gradient,
    tensor_sum,
    transpose,
    where,
)
from comm_protocol import CommRequest, MessageBuffer, pick_choice
from particle_env import NUM_ACTIONS

logger = logging.getLogger(__name__)

# Parameter groups: "act." belongs to the action network, "msg." to the message network
ACTION_PREFIX = "act."
MESSAGE_PREFIX = "msg."

# Scores are clamped before the optional second exp so exp(scores) stays finite
DOUBLE_EXP_SCORE_LIMIT = 30.0


@dataclass
class NetworkDims:
    """Actor/critic sizes and attention variants"""
    d_h: int = 64
    d_model: int = 32
    n_encoders: int = 1
    n_decoders: int = 1
    d_ff: int = 64
    critic_hidden: int = 64
    attention_double_exp: bool = False
    swapped_decoder_kqv: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class ParamSet:
    """Ordered collection of named parameter tensors"""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def group(self, prefix: str) -> Dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def sub(self, prefix: str) -> Dict[str, Tensor]:
        """Tensors under `prefix`, keyed by the remaining name"""
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    @property
    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def manifest(self) -> List[Tuple[str, Tuple[int, ...], int]]:
        return [(name, t.shape, t.size) for name, t in self.tensors.items()]

    def manifest_text(self) -> str:
        lines = [f"{name}\t{'x'.join(str(d) for d in shape) or 'scalar'}\t{count}"
                 for name, shape, count in self.manifest()]
        lines.append(f"total\t-\t{self.parameter_count}")
        return "\n".join(lines) + "\n"

    def manifest_hash(self) -> str:
        return hashlib.sha256(self.manifest_text().encode("utf-8")).hexdigest()

    def export_manifest(self, filename: str):
        with open(filename, "w", encoding="utf-8") as f:
            f.write(self.manifest_text())

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self.tensors.items())

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        for name, tensor in self.tensors.items():
            if name not in arrays:
                raise DimensionError(f"Missing parameter {name}")
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise DimensionError(f"Parameter {name}: stored shape {value.shape} != expected {tensor.shape}")
            tensor.data = value.copy()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


class ActorParams(ParamSet):
    """Shared actor parameters (action network + message network)"""

    def __init__(self, tensors, obs_len: int, k_neighbors: int, dims: NetworkDims):
        super().__init__(tensors)
        self.obs_len = obs_len
        self.k_neighbors = k_neighbors
        self.dims = dims

    @classmethod
    def build(cls, obs_len: int, k_neighbors: int, dims: NetworkDims, seed: int = 0) -> "ActorParams":
        rng = np.random.default_rng(seed)
        d_h, d_model, d_ff = dims.d_h, dims.d_model, dims.d_ff
        t: "OrderedDict[str, Tensor]" = OrderedDict()

        def add(name, shape, **kwargs):
            t[name] = parameter(shape, rng, name=name, **kwargs)

        def add_ones(name, size):
            t[name] = Tensor(np.ones(size), requires_grad=True, name=name)

        # action network
        add("act.obs.w1", (obs_len, d_h))
        add("act.obs.b1", (d_h,), zero=True)
        add("act.obs.w2", (d_h, d_h))
        add("act.obs.b2", (d_h,), zero=True)
        add("act.gru.w_x", (d_h + d_model, 3 * d_h))
        add("act.gru.w_h", (d_h, 3 * d_h))
        add("act.gru.b_x", (3 * d_h,), zero=True)
        add("act.gru.b_h", (3 * d_h,), zero=True)
        add("act.head.w1", (d_h, d_h))
        add("act.head.b1", (d_h,), zero=True)
        add("act.head.w2", (d_h, NUM_ACTIONS), scale=0.01)
        add("act.head.b2", (NUM_ACTIONS,), zero=True)

        # message network
        add("msg.emb.w", (obs_len, d_model))
        add("msg.emb.b", (d_model,), zero=True)
        add("msg.null_token", (d_model,), scale=0.1)
        add("msg.proj.w", (d_h, d_model))
        add("msg.proj.b", (d_model,), zero=True)
        blocks = [f"msg.enc{i}" for i in range(dims.n_encoders)] + \
                 [f"msg.dec{i}" for i in range(dims.n_decoders)]
        for block in blocks:
            for w in ("w_q", "w_k", "w_v", "w_out"):
                add(f"{block}.attn.{w}", (d_model, d_model))
            add(f"{block}.attn.b_out", (d_model,), zero=True)
            add(f"{block}.mlp.w1", (d_model, d_ff))
            add(f"{block}.mlp.b1", (d_ff,), zero=True)
            add(f"{block}.mlp.w2", (d_ff, d_model))
            add(f"{block}.mlp.b2", (d_model,), zero=True)
            add_ones(f"{block}.ln1.gain", d_model)
            add(f"{block}.ln1.bias", (d_model,), zero=True)
            add_ones(f"{block}.ln2.gain", d_model)
            add(f"{block}.ln2.bias", (d_model,), zero=True)
        add("msg.comm.w1", (d_model, d_model))
        add("msg.comm.b1", (d_model,), zero=True)
        add("msg.comm.w2", (d_model, k_neighbors + 1), scale=0.01)
        add("msg.comm.b2", (k_neighbors + 1,), zero=True)

        return cls(t, obs_len, k_neighbors, dims)


class CriticParams(ParamSet):
    """Centralized value network V(s); input size fixed per training scenario"""

    def __init__(self, tensors, state_dim: int):
        super().__init__(tensors)
        self.state_dim = state_dim

    @classmethod
    def build(cls, state_dim: int, hidden: int = 64, seed: int = 0, zero: bool = False) -> "CriticParams":
        rng = np.random.default_rng(seed)
        t: "OrderedDict[str, Tensor]" = OrderedDict()
        sizes = [state_dim, hidden, hidden, 1]
        for i in range(3):
            t[f"critic.w{i}"] = parameter((sizes[i], sizes[i + 1]), rng, name=f"critic.w{i}", zero=zero)
            t[f"critic.b{i}"] = parameter((sizes[i + 1],), rng, name=f"critic.b{i}", zero=True)
        return cls(t, state_dim)


class HiddenState:
    """Recurrent state h for every agent of one environment"""

    def __init__(self, n_agents: int, d_h: int):
        self.h = np.zeros((n_agents, d_h))

    def reset(self):
        self.h[:] = 0.0


@dataclass
class ActorOutput:
    action_probs: Tensor
    hidden: Tensor
    comm_probs: Optional[Tensor]
    m_f: Tensor
    key_mask: np.ndarray
    attention: List[np.ndarray]


# Batching helpers

def pad_buffers(buffers: Sequence[Union[np.ndarray, MessageBuffer]], obs_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stack variable-length buffers into (B, L, obs_len) with L >= 1"""
    rows = [b.snapshot() if isinstance(b, MessageBuffer) else np.asarray(b, dtype=np.float64).reshape(-1, obs_len)
            for b in buffers]
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    width = max(1, int(lengths.max()) if len(lengths) else 1)
    padded = np.zeros((len(rows), width, obs_len))
    for i, r in enumerate(rows):
        padded[i, :len(r)] = r
    return padded, lengths


def _mlp(x: Tensor, params: ParamSet, prefix: str) -> Tensor:
    hidden = relu(linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def attention(params: ActorParams, prefix: str, query_src: Tensor, kv_src: Tensor,
              key_mask: np.ndarray, literal: bool = False) -> Tuple[Tensor, np.ndarray]:
    """
    Single-head scaled dot-product attention over masked keys
    Standard wiring: q from query_src, k and v from kv_src
    Literal wiring (decoder only): k and v from query_src, q from kv_src
    """
    dims = params.dims
    w_q, w_k, w_v = params[f"{prefix}.w_q"], params[f"{prefix}.w_k"], params[f"{prefix}.w_v"]
    scale = 1.0 / np.sqrt(dims.d_model)
    if literal:
        k = matmul(query_src, w_k)                     # (B, 1, d)
        q = matmul(kv_src, w_q)                        # (B, L, d)
        v = matmul(query_src, w_v)                     # (B, 1, d)
        scores = matmul(k, transpose(q)) * scale       # (B, 1, L)
        values = multiply(Tensor(np.ones(kv_src.shape[:-1] + (1,))), v)
    else:
        q = matmul(query_src, w_q)
        k = matmul(kv_src, w_k)
        values = matmul(kv_src, w_v)
        scores = matmul(q, transpose(k)) * scale
    if dims.attention_double_exp:
        scores = exp(clip(scores, -DOUBLE_EXP_SCORE_LIMIT, DOUBLE_EXP_SCORE_LIMIT))
    alpha = softmax(scores, axis=-1, mask=key_mask[:, None, :])
    out = linear(matmul(alpha, values), params[f"{prefix}.w_out"], params[f"{prefix}.b_out"])
    return out, alpha.data


def _residual_block(params: ActorParams, prefix: str, x: Tensor, memory: Tensor,
                    key_mask: np.ndarray, literal: bool = False) -> Tuple[Tensor, np.ndarray]:
    attended, alpha = attention(params, f"{prefix}.attn", x, memory, key_mask, literal)
    x = layer_norm(x + attended, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    x = layer_norm(x + _mlp(x, params, f"{prefix}.mlp"), params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    return x, alpha


def encode_batch(params: ActorParams, padded: np.ndarray, lengths: np.ndarray) -> Tuple[Tensor, np.ndarray, List[np.ndarray]]:
    """Embed + N_e self-attention blocks; empty buffers become one null token"""
    batch, width, _ = padded.shape
    x = linear(Tensor(padded), params["msg.emb.w"], params["msg.emb.b"])
    empty = lengths == 0
    null_slot = np.zeros((batch, width, 1), dtype=bool)
    null_slot[empty, 0, 0] = True
    x = where(null_slot, params["msg.null_token"], x)
    key_mask = np.arange(width)[None, :] < lengths[:, None]
    key_mask[empty, 0] = True

    weights = []
    for i in range(params.dims.n_encoders):
        x, alpha = _residual_block(params, f"msg.enc{i}", x, x, key_mask)
        weights.append(alpha)
    return x, key_mask, weights


def encode_messages(buffer: Union[MessageBuffer, np.ndarray], params: ActorParams,
                    return_attention: bool = False):
    """m_f for a single buffer: (len, d_model), or (1, d_model) for an empty buffer"""
    padded, lengths = pad_buffers([buffer], params.obs_len)
    m_f, key_mask, weights = encode_batch(params, padded, lengths)
    rows = max(int(lengths[0]), 1)
    m_f = m_f[0, :rows]
    if return_attention:
        return m_f, [w[0, :rows, :rows] for w in weights]
    return m_f


def decode_batch(params: ActorParams, o_f: Tensor, m_f: Tensor, key_mask: np.ndarray) -> Tuple[Tensor, List[np.ndarray]]:
    """N_d cross-attention blocks starting from m_dec0 = proj(o_f)"""
    batch = o_f.shape[0]
    # the message loss must not reach the action network through o_f
    x = linear(stop_gradient(o_f), params["msg.proj.w"], params["msg.proj.b"])
    x = reshape(x, (batch, 1, params.dims.d_model))
    weights = []
    for i in range(params.dims.n_decoders):
        x, alpha = _residual_block(params, f"msg.dec{i}", x, m_f, key_mask,
                                   literal=params.dims.swapped_decoder_kqv)
        weights.append(alpha)
    return reshape(x, (batch, params.dims.d_model)), weights


def decode(o_f: Tensor, m_f: Tensor, params: ActorParams, key_mask: Optional[np.ndarray] = None,
           return_attention: bool = False):
    """Single-agent decoder: o_f (d_h,), m_f (L, d_model) -> m_dec (d_model,)"""
    rows = m_f.shape[0]
    mask = np.ones((1, rows), dtype=bool) if key_mask is None else np.asarray(key_mask, dtype=bool).reshape(1, rows)
    m_dec, weights = decode_batch(params, reshape(o_f, (1, o_f.shape[-1])),
                                  reshape(m_f, (1, rows, m_f.shape[-1])), mask)
    m_dec = reshape(m_dec, (params.dims.d_model,))
    if return_attention:
        return m_dec, [w[0] for w in weights]
    return m_dec


def comm_policy(m_dec: Tensor, valid_mask: np.ndarray, params: ActorParams) -> Tensor:
    """Categorical over {no-send} + neighbor slots; empty slots get probability 0"""
    logits = _mlp(m_dec, params, "msg.comm")
    valid = np.asarray(valid_mask, dtype=bool)
    mask = np.concatenate([np.ones(valid.shape[:-1] + (1,), dtype=bool), valid], axis=-1)
    return softmax(logits, axis=-1, mask=mask)


def observation_features(obs: Tensor, params: ActorParams) -> Tensor:
    hidden = relu(linear(obs, params["act.obs.w1"], params["act.obs.b1"]))
    return relu(linear(hidden, params["act.obs.w2"], params["act.obs.b2"]))


def pool_messages(m_f: Tensor, key_mask: np.ndarray) -> Tensor:
    """Mean over valid message rows: (B, L, d) -> (B, d)"""
    weights = key_mask.astype(np.float64)
    weights = weights / weights.sum(axis=1, keepdims=True)
    return tensor_sum(m_f * weights[:, :, None], axis=1)


def action_step(params: ActorParams, o_f: Tensor, pooled: Tensor, h: Tensor) -> Tuple[Tensor, Tensor]:
    """GRU(o_f ⊕ pool(m_f), h) -> (action probs, new h)"""
    h_new = gru_cell(concat([o_f, pooled], axis=-1), h, params.sub("act.gru."))
    probs = softmax(_mlp(h_new, params, "act.head"), axis=-1)
    return probs, h_new


def actor_forward(params: ActorParams, obs: np.ndarray, buffers: Sequence, hidden: np.ndarray,
                  valid_masks: Optional[np.ndarray] = None, with_comm: bool = True) -> ActorOutput:
    """Batched actor: obs (B, obs_len), buffers (B ragged), hidden (B, d_h)"""
    obs = np.asarray(obs, dtype=np.float64).reshape(-1, params.obs_len)
    padded, lengths = pad_buffers(buffers, params.obs_len)
    m_f, key_mask, enc_weights = encode_batch(params, padded, lengths)
    o_f = observation_features(Tensor(obs), params)
    probs, h_new = action_step(params, o_f, pool_messages(m_f, key_mask), Tensor(hidden))
    comm_probs = None
    weights = list(enc_weights)
    if with_comm:
        if valid_masks is None:
            raise ValueError("valid_masks required when with_comm=True")
        m_dec, dec_weights = decode_batch(params, o_f, m_f, key_mask)
        comm_probs = comm_policy(m_dec, valid_masks, params)
        weights.extend(dec_weights)
    return ActorOutput(probs, h_new, comm_probs, m_f, key_mask, weights)


def comm_distribution(params: ActorParams, obs: np.ndarray, buffers: Sequence, valid_masks: np.ndarray) -> Tensor:
    """Message-network path only: (B, k_neighbors + 1) send probabilities"""
    obs = np.asarray(obs, dtype=np.float64).reshape(-1, params.obs_len)
    padded, lengths = pad_buffers(buffers, params.obs_len)
    m_f, key_mask, _ = encode_batch(params, padded, lengths)
    o_f = observation_features(Tensor(obs), params)
    m_dec, _ = decode_batch(params, o_f, m_f, key_mask)
    return comm_policy(m_dec, valid_masks, params)


def action_distribution(params: ActorParams, obs: np.ndarray, buffers: Sequence, hidden: np.ndarray) -> Tensor:
    return actor_forward(params, obs, buffers, hidden, with_comm=False).action_probs


def act(o: np.ndarray, m_f: Tensor, h: np.ndarray, params: ActorParams, mode: str = "sample",
        rng: Optional[np.random.Generator] = None,
        key_mask: Optional[np.ndarray] = None) -> Tuple[int, float, np.ndarray, np.ndarray]:
    """Single agent: (action, log_prob, action_dist, new h)"""
    rows = m_f.shape[0]
    mask = np.ones((1, rows), dtype=bool) if key_mask is None else np.asarray(key_mask, dtype=bool).reshape(1, rows)
    with no_grad():
        o_f = observation_features(Tensor(np.asarray(o, dtype=np.float64).reshape(1, -1)), params)
        pooled = pool_messages(reshape(m_f, (1, rows, m_f.shape[-1])), mask)
        probs, h_new = action_step(params, o_f, pooled, Tensor(np.asarray(h).reshape(1, -1)))
    dist = probs.data[0]
    action = pick_choice(dist, mode, rng if rng is not None else np.random.default_rng(0))
    return action, float(np.log(max(dist[action], 1e-10))), dist, h_new.data[0]


def critic_value(s: Union[np.ndarray, Tensor], params: CriticParams) -> Tensor:
    """V(s) for a single state (scalar) or a batch (B,)"""
    s = s if isinstance(s, Tensor) else Tensor(s)
    if s.shape[-1] != params.state_dim:
        raise DimensionError(f"Critic expects state dim {params.state_dim}, got {s.shape[-1]}")
    single = s.ndim == 1
    x = reshape(s, (1, s.shape[0])) if single else s
    x = relu(linear(x, params["critic.w0"], params["critic.b0"]))
    x = relu(linear(x, params["critic.w1"], params["critic.b1"]))
    v = linear(x, params["critic.w2"], params["critic.b2"])
    return reshape(v, ()) if single else reshape(v, (v.shape[0],))


class NetworkCommPolicy:
    """Comm decisions from the learned message network"""

    def __init__(self, params: ActorParams):
        self.params = params

    def decide(self, request: CommRequest) -> Tuple[np.ndarray, np.ndarray]:
        obs = np.stack([o.vector for o in request.observations])
        valid = np.stack([o.valid_mask for o in request.observations])
        with no_grad():
            dists = comm_distribution(self.params, obs, request.buffer_snapshots, valid).data
        choices = np.array([pick_choice(d, request.mode, request.rng) for d in dists], dtype=np.int64)
        return choices, dists


def log_prob_of(probs: Tensor, actions: np.ndarray) -> Tensor:
    """log pi(a) for a batch of categorical rows"""
    rows = np.arange(len(actions))
    return log(probs[rows, np.asarray(actions, dtype=np.int64)])
