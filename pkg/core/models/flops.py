"""Closed-form matrix-product FLOP accounting.

Counts use the same scope labels as the instrumented `FlopCounter`, so for
an inference forward without a cache the two agree exactly.
"""
from dataclasses import dataclass
from typing import Dict, Iterable, Optional

from core.config import ModelConfig
from core.libs import assertions
from core.models.routers import POOL_FORCED, POOL_MEAN, POOL_PREFIX, POOL_TOKEN, SkipMask

EXPERT_TARGET = 'expert'


@dataclass
class LayerLoad:
    attention_tokens: int
    mlp_tokens: int
    router_flops: int = 0
    expert_pairs: Optional[int] = None


def _router_flops(decision, d, seq_len):
    if decision.pooling == POOL_FORCED:
        return 0
    if decision.pooling == POOL_TOKEN:
        return 2 * decision.n_decisions * d
    if decision.pooling == POOL_PREFIX:
        return 2 * seq_len * seq_len * d + 2 * seq_len * d
    return 2 * d


def _kept_tokens(decision, seq_len):
    if decision.pooling == POOL_MEAN or (decision.pooling == POOL_FORCED and decision.positions is None):
        return seq_len if decision.keep.all() else 0
    return decision.n_kept


def layer_loads(config: ModelConfig, seq_len, skip_mask: Optional[SkipMask] = None) -> Dict[int, LayerLoad]:
    """Tokens entering each layer's attention and MLP after routing."""
    loads = {i: LayerLoad(seq_len, seq_len) for i in range(config.n_layers)}
    if skip_mask is None:
        return loads
    sequences = {d.sequence for d in skip_mask}
    assertions.assert_data(len(sequences) <= 1, 'flop count expects decisions of a single sequence')
    for decision in skip_mask:
        load = loads[decision.layer]
        load.router_flops += _router_flops(decision, config.d_model, seq_len)
        if decision.target == EXPERT_TARGET:
            load.expert_pairs = (load.expert_pairs or 0) + decision.n_kept
            continue
        kept = _kept_tokens(decision, seq_len)
        if decision.target in ('attention', 'block'):
            load.attention_tokens = kept
        if decision.target in ('mlp', 'block'):
            load.mlp_tokens = kept
    return loads


def attention_flops(config: ModelConfig, n_tokens, n_keys=None):
    n_keys = n_tokens if n_keys is None else n_keys
    d = config.d_model
    return 8 * n_tokens * d * d + 4 * n_tokens * n_keys * d


def mlp_flops(config: ModelConfig, n_tokens, expert_pairs=None, alive_experts=None):
    d = config.d_model
    if config.moe is None:
        return config.mlp_matrices() * 2 * n_tokens * d * config.mlp_hidden
    alive = config.moe.n_experts if alive_experts is None else alive_experts
    if expert_pairs is None:
        expert_pairs = n_tokens * min(config.moe.top_k, alive)
    gate = 2 * n_tokens * d * config.moe.n_experts
    return gate + config.mlp_matrices() * 2 * expert_pairs * d * config.moe.expert_hidden


class FlopReport:
    """FLOPs per scope label (`layers.{i}.attention`, `layers.{i}.mlp`, `layers.{i}.router`, `lm_head`)."""

    def __init__(self, by_scope):
        self.by_scope = dict(by_scope)

    def __repr__(self):
        return '<FlopReport total=%d>' % self.total

    def __getitem__(self, scope):
        return self.by_scope.get(scope, 0)

    @property
    def total(self):
        return sum(self.by_scope.values())

    def kind_total(self, kind):
        return sum(v for k, v in self.by_scope.items() if k.endswith('.' + kind))

    def per_layer(self, kind):
        return {int(k.split('.')[1]): v for k, v in self.by_scope.items() if k.endswith('.' + kind)}

    def as_dict(self):
        return {k: v for k, v in sorted(self.by_scope.items()) if v}

    def summary(self):
        return {
            'total': self.total,
            'attention': self.kind_total('attention'),
            'mlp': self.kind_total('mlp'),
            'router': self.kind_total('router'),
            'lm_head': self['lm_head'],
        }


def _report(config: ModelConfig, seq_len, loads, dropped_experts=()):
    by_scope = {}
    for i, load in loads.items():
        alive = None
        if config.moe is not None:
            alive = sum((i, e) not in dropped_experts for e in range(config.moe.n_experts))
        by_scope['layers.{0}.attention'.format(i)] = attention_flops(config, load.attention_tokens)
        by_scope['layers.{0}.mlp'.format(i)] = mlp_flops(config, load.mlp_tokens, load.expert_pairs, alive)
        by_scope['layers.{0}.router'.format(i)] = load.router_flops
    by_scope['lm_head'] = 2 * seq_len * config.d_model * config.vocab_size
    return FlopReport(by_scope)


def count_flops(config: ModelConfig, seq_len, skip_mask: Optional[SkipMask] = None, dropped_experts=()):
    """FLOPs of one inference forward over `seq_len` tokens; skipped units contribute zero."""
    assertions.assert_capacity(seq_len <= config.max_seq_len,
                               'sequence of {0} positions exceeds max_seq_len {1}'.format(
                                   seq_len, config.max_seq_len))
    return _report(config, seq_len, layer_loads(config, seq_len, skip_mask), set(dropped_experts))


def batch_flops(config: ModelConfig, seq_len, masks: Iterable[SkipMask], dropped_experts=()):
    """Ragged (each sequence its own kept set) and padded (every sequence padded
    to the batch's largest kept set per layer) FLOPs of a batch."""
    masks = list(masks)
    assertions.assert_data(len(masks) > 0, 'empty batch')
    dropped = set(dropped_experts)
    per_seq = [layer_loads(config, seq_len, m) for m in masks]
    ragged = sum(_report(config, seq_len, loads, dropped).total for loads in per_seq)
    padded_loads = {}
    for i in range(config.n_layers):
        pairs = [loads[i].expert_pairs for loads in per_seq]
        padded_loads[i] = LayerLoad(
            attention_tokens=max(loads[i].attention_tokens for loads in per_seq),
            mlp_tokens=max(loads[i].mlp_tokens for loads in per_seq),
            router_flops=max(loads[i].router_flops for loads in per_seq),
            expert_pairs=None if any(p is None for p in pairs) else max(pairs),
        )
    padded = len(masks) * _report(config, seq_len, padded_loads, dropped).total
    return {'ragged': ragged, 'padded': padded}
