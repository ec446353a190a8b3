"""Pre-norm decoder-only transformer with RMS normalisation, rotary attention,
SwiGLU (or GELU) MLPs and an optional top-k mixture-of-experts MLP."""
import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from core.config import ActivationEnum, ModelConfig
from core.libs import assertions, helpers
from core.tensor import Tensor, flop_scope, ops

logger = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass
class MLPParams:
    w_up: Tensor
    w_down: Tensor
    w_gate: Optional[Tensor] = None


@dataclass
class MoEParams:
    gate: Tensor
    experts: List[Optional[MLPParams]]
    alive: np.ndarray
    top_k: int
    renormalize: bool = False

    @property
    def n_experts(self):
        return len(self.experts)


def _mlp_shapes(prefix, config, hidden):
    d = config.d_model
    shapes = {}
    if config.activation == ActivationEnum.SWIGLU:
        shapes[prefix + '.w_gate'] = (d, hidden)
    shapes[prefix + '.w_up'] = (d, hidden)
    shapes[prefix + '.w_down'] = (hidden, d)
    return shapes


def param_shapes(config: ModelConfig):
    """Canonical parameter names and shapes, in manifest order."""
    d = config.d_model
    shapes = {'embed.weight': (config.vocab_size, d)}
    for i in range(config.n_layers):
        p = 'layers.{0}'.format(i)
        shapes[p + '.attn_norm.weight'] = (d,)
        for name in ('wq', 'wk', 'wv', 'wo'):
            shapes['{0}.attn.{1}'.format(p, name)] = (d, d)
        shapes[p + '.mlp_norm.weight'] = (d,)
        if config.moe is None:
            shapes.update(_mlp_shapes(p + '.mlp', config, config.mlp_hidden))
        else:
            shapes[p + '.moe.gate'] = (d, config.moe.n_experts)
            for e in range(config.moe.n_experts):
                shapes.update(_mlp_shapes('{0}.moe.experts.{1}'.format(p, e), config, config.moe.expert_hidden))
    shapes['final_norm.weight'] = (d,)
    shapes['lm_head.weight'] = (d, config.vocab_size)
    return shapes


class ModelState:
    """Named parameter store of the backbone."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor], dropped_experts=()):
        self.config = config.validate()
        self.params = params
        self.dropped_experts = set(tuple(x) for x in dropped_experts)

    def __repr__(self):
        return '<ModelState layers=%d params=%d>' % (self.config.n_layers, self.n_params())

    @classmethod
    def init(cls, config: ModelConfig, seed=0):
        rng = helpers.new_rng(seed)
        out_std = INIT_STD / math.sqrt(2 * config.n_layers)
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith('norm.weight'):
                value = np.ones(shape)
            elif name.endswith('.wo') or name.endswith('.w_down'):
                value = rng.normal(0.0, out_std, size=shape)
            else:
                value = rng.normal(0.0, INIT_STD, size=shape)
            params[name] = Tensor(value, name=name)
        return cls(config, params).freeze()

    @classmethod
    def zeros(cls, config: ModelConfig):
        params = {name: Tensor(np.zeros(shape), name=name) for name, shape in param_shapes(config).items()}
        return cls(config, params).freeze()

    def __getitem__(self, name):
        assertions.assert_found(self.params.get(name), 'no parameter named {0}'.format(name))
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def trainable(self, name):
        return self[name].requires_grad

    def n_params(self):
        return sum(t.size for t in self.params.values())

    def freeze(self):
        for t in self.params.values():
            t.freeze()
        return self

    def unfreeze(self):
        for t in self.params.values():
            t.data = t.data.copy()
            t.requires_grad = True
        return self

    def checksum(self):
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return digest.hexdigest()

    def copy(self):
        params = {name: Tensor(t.data, requires_grad=t.requires_grad, name=name) for name, t in self.params.items()}
        state = ModelState(self.config, params, self.dropped_experts)
        for name, t in self.params.items():
            if not t.requires_grad:
                params[name].freeze()
        return state

    def attention(self, layer):
        p = 'layers.{0}.attn.'.format(layer)
        return AttentionParams(self[p + 'wq'], self[p + 'wk'], self[p + 'wv'], self[p + 'wo'])

    def _mlp(self, prefix):
        return MLPParams(w_up=self[prefix + '.w_up'], w_down=self[prefix + '.w_down'],
                         w_gate=self.params.get(prefix + '.w_gate'))

    def mlp(self, layer):
        return self._mlp('layers.{0}.mlp'.format(layer))

    def moe(self, layer):
        moe = self.config.moe
        assertions.assert_config(moe is not None, 'model has no mixture-of-experts layers')
        alive = np.array([(layer, e) not in self.dropped_experts for e in range(moe.n_experts)])
        experts = [self._mlp('layers.{0}.moe.experts.{1}'.format(layer, e)) if alive[e] else None
                   for e in range(moe.n_experts)]
        return MoEParams(gate=self['layers.{0}.moe.gate'.format(layer)], experts=experts, alive=alive,
                         top_k=moe.top_k, renormalize=moe.renormalize)


def attention_layer(h, params: AttentionParams, config: ModelConfig, positions, cache=None, layer=0):
    """Causal multi-head attention over normalised input h [n, d].

    With a cache, the new keys/values are appended to the layer's entry and the
    queries attend to every cached position not after their own.
    """
    n = h.shape[0]
    heads, head_dim = config.n_heads, config.head_dim
    positions = np.asarray(positions)

    def split(t):
        return ops.transpose(ops.reshape(t, (n, heads, head_dim)), (1, 0, 2))

    q = ops.rope(split(h @ params.wq), positions, config.rope_base)
    k = ops.rope(split(h @ params.wk), positions, config.rope_base)
    v = split(h @ params.wv)
    key_positions = positions
    if cache is not None:
        keys, values, key_positions = cache.write(layer, k.data, v.data, positions)
        k, v = Tensor.wrap(keys), Tensor.wrap(values)
    scores = ops.mul(q @ ops.transpose(k, (0, 2, 1)), 1.0 / math.sqrt(head_dim))
    visible = key_positions[None, :] <= positions[:, None]
    probs = ops.softmax(ops.where(visible, scores, -np.inf), axis=-1)
    out = ops.reshape(ops.transpose(probs @ v, (1, 0, 2)), (n, config.d_model))
    return out @ params.wo


def mlp_layer(h, params: MLPParams):
    if params.w_gate is not None:
        act = ops.mul(ops.silu(h @ params.w_gate), h @ params.w_up)
    else:
        act = ops.gelu(h @ params.w_up)
    return act @ params.w_down


def moe_route(h, params: MoEParams):
    """Gate probabilities, mixing weights and top-k expert indices per token."""
    logits = h @ params.gate
    if not params.alive.all():
        logits = ops.where(params.alive[None, :], logits, -np.inf)
    probs = ops.softmax(logits, axis=-1)
    k = min(params.top_k, int(params.alive.sum()))
    topk = np.argsort(-probs.data, axis=-1, kind='stable')[:, :k]
    weights = probs
    if params.renormalize:
        selected = np.zeros(probs.data.shape, dtype=probs.data.dtype)
        np.put_along_axis(selected, topk, 1.0, axis=-1)
        weights = ops.div(probs, ops.sum(ops.mul(probs, selected), axis=-1, keepdims=True))
    return probs, weights, topk


ExpertFilter = Callable[[int, np.ndarray, Tensor], tuple]


def moe_mix(h, params: MoEParams, expert_filter: Optional[ExpertFilter] = None):
    """y = sum over selected experts of weight * expert output.

    `expert_filter(e, rows, h)` may narrow the rows an expert executes and/or
    return a [rows, 1] gate multiplying its output; it returns (rows, gate).
    """
    _, weights, topk = moe_route(h, params)
    out = Tensor.zeros(h.shape)
    for e in range(params.n_experts):
        if not params.alive[e]:
            continue
        rows = np.nonzero((topk == e).any(axis=-1))[0]
        gate = None
        if expert_filter is not None:
            rows, gate = expert_filter(e, rows, h)
        if rows.size == 0:
            continue
        y = mlp_layer(ops.gather_rows(h, rows), params.experts[e])
        if gate is not None:
            y = ops.mul(gate, y)
        w = ops.gather_rows(ops.column(weights, e), rows)
        out = ops.index_add(out, rows, ops.mul(w, y))
    return out


def moe_layer_dense(h, params: MoEParams):
    return moe_mix(h, params)


def attention_branch(state: ModelState, layer, x, positions, cache=None):
    with flop_scope('layers.{0}.attention'.format(layer)):
        h = ops.rmsnorm(x, state['layers.{0}.attn_norm.weight'.format(layer)], state.config.norm_eps)
        return attention_layer(h, state.attention(layer), state.config, positions, cache, layer)


def mlp_branch(state: ModelState, layer, x, expert_filter=None):
    with flop_scope('layers.{0}.mlp'.format(layer)):
        h = ops.rmsnorm(x, state['layers.{0}.mlp_norm.weight'.format(layer)], state.config.norm_eps)
        if state.config.moe is not None:
            return moe_mix(h, state.moe(layer), expert_filter)
        return mlp_layer(h, state.mlp(layer))


def embed(state: ModelState, tokens):
    return ops.embedding_lookup(state['embed.weight'], tokens)


def lm_head(state: ModelState, x):
    with flop_scope('lm_head'):
        h = ops.rmsnorm(x, state['final_norm.weight'], state.config.norm_eps)
        return h @ state['lm_head.weight']


def sequence_positions(config: ModelConfig, n_tokens, cache=None):
    if cache is not None:
        cache.check_room(n_tokens)
        return cache.positions(n_tokens)
    assertions.assert_capacity(n_tokens <= config.max_seq_len,
                               'sequence of {0} positions exceeds max_seq_len {1}'.format(
                                   n_tokens, config.max_seq_len))
    return np.arange(n_tokens)


def forward_dense(state: ModelState, tokens, cache=None):
    """Logits [L, vocab] for `tokens`; with a cache, positions continue after the cached ones."""
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = sequence_positions(state.config, tokens.shape[0], cache)
    x = embed(state, tokens)
    for i in range(state.config.n_layers):
        x = ops.add(x, attention_branch(state, i, x, positions, cache))
        x = ops.add(x, mlp_branch(state, i, x))
    if cache is not None:
        cache.advance(tokens.shape[0])
    return lm_head(state, x)
