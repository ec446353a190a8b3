"""Per-layer skip routers.

A router scores its input with sigmoid(x . W), keeps the wrapped layer F where
the score reaches the threshold, and either masks F's output (training, with a
straight-through gradient to the score) or bypasses F entirely (inference).
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from core.config import DEFAULT_TAU, MAX_ROUTED_LAYERS, GranularityEnum, ModelConfig, PlanConfig, TargetEnum
from core.libs import assertions
from core.tensor import Tensor, active_tape, flop_scope, ops

logger = logging.getLogger(__name__)

TRAIN = 'train'
INFER = 'infer'

GATE_STE = 'ste'
GATE_SOFT = 'soft'

POOL_TOKEN = 'token'
POOL_MEAN = 'mean'
POOL_PREFIX = 'prefix'
POOL_FORCED = 'forced'


@dataclass
class RouterState:
    W: Tensor
    layer_index: int
    target: TargetEnum = TargetEnum.ATTENTION
    granularity: GranularityEnum = GranularityEnum.SEQUENCE
    tau: float = DEFAULT_TAU
    causal_prefix: bool = False
    forced: Optional[bool] = None
    gate_mode: str = GATE_STE

    @classmethod
    def zero_init(cls, d_model, layer_index, target=TargetEnum.ATTENTION,
                  granularity=GranularityEnum.SEQUENCE, tau=DEFAULT_TAU, causal_prefix=False):
        W = Tensor(np.zeros((d_model, 1)), requires_grad=True, name='router.{0}.W'.format(layer_index))
        return cls(W=W, layer_index=layer_index, target=TargetEnum(target),
                   granularity=GranularityEnum(granularity), tau=tau, causal_prefix=causal_prefix)

    @property
    def name(self):
        return 'router.{0}.W'.format(self.layer_index)

    @property
    def unit(self):
        return str(self.layer_index)

    @property
    def per_position(self):
        return self.granularity == GranularityEnum.TOKEN or self.causal_prefix

    @property
    def pooling(self):
        if self.forced is not None:
            return POOL_FORCED
        if self.granularity == GranularityEnum.TOKEN:
            return POOL_TOKEN
        return POOL_PREFIX if self.causal_prefix else POOL_MEAN

    def n_params(self):
        return self.W.size


@dataclass
class Decision:
    """Keep/skip decisions of one routing unit for one sequence."""
    unit: str
    layer: int
    target: str
    granularity: str
    keep: np.ndarray
    scores: np.ndarray
    sequence: int = 0
    pooling: str = POOL_MEAN
    positions: Optional[np.ndarray] = None
    expert: Optional[int] = None
    gate: Optional[Tensor] = None

    @property
    def n_kept(self):
        return int(np.count_nonzero(self.keep))

    @property
    def n_decisions(self):
        return int(self.keep.size)


class SkipMask:
    """Collection of routing decisions; capacity is the kept fraction over all of them."""

    def __init__(self, decisions=None):
        self.decisions: List[Decision] = list(decisions or [])

    def __iter__(self):
        return iter(self.decisions)

    def __len__(self):
        return len(self.decisions)

    def __repr__(self):
        return '<SkipMask decisions=%d capacity=%.3f>' % (self.n_decisions(), self.capacity())

    def add(self, decision: Decision):
        self.decisions.append(decision)

    def merge(self, other: 'SkipMask'):
        return SkipMask(self.decisions + other.decisions)

    def for_sequence(self, sequence):
        return SkipMask([d for d in self.decisions if d.sequence == sequence])

    def n_decisions(self):
        return sum(d.n_decisions for d in self.decisions)

    def n_kept(self):
        return sum(d.n_kept for d in self.decisions)

    def capacity(self):
        total = self.n_decisions()
        return 1.0 if total == 0 else self.n_kept() / total

    def unit_capacity(self):
        kept, total = {}, {}
        for d in self.decisions:
            kept[d.unit] = kept.get(d.unit, 0) + d.n_kept
            total[d.unit] = total.get(d.unit, 0) + d.n_decisions
        units = sorted(total, key=unit_sort_key)
        return {unit: (kept[unit] / total[unit] if total[unit] else 1.0) for unit in units}

    def layer_capacity(self):
        kept, total = {}, {}
        for d in self.decisions:
            kept[d.layer] = kept.get(d.layer, 0) + d.n_kept
            total[d.layer] = total.get(d.layer, 0) + d.n_decisions
        return {layer: (kept[layer] / total[layer] if total[layer] else 1.0) for layer in sorted(total)}

    def gates(self):
        return [d.gate for d in self.decisions if d.gate is not None]


@dataclass
class MoDLayerPlan:
    layers: List[int]
    target: TargetEnum = TargetEnum.ATTENTION
    granularity: GranularityEnum = GranularityEnum.SEQUENCE
    tau: float = DEFAULT_TAU
    causal_prefix: bool = False
    allow_last: bool = False
    forced: Dict[int, bool] = field(default_factory=dict)

    @classmethod
    def default(cls, config: ModelConfig, target=TargetEnum.ATTENTION,
                granularity=GranularityEnum.SEQUENCE, tau=DEFAULT_TAU):
        """Deepest half of the layers, the final layer excluded."""
        n = config.n_layers
        layers = list(range(n // 2, n - 1))[-MAX_ROUTED_LAYERS:]
        return cls(layers=layers, target=TargetEnum(target), granularity=GranularityEnum(granularity), tau=tau)

    @classmethod
    def deepest(cls, config: ModelConfig, count, target=TargetEnum.ATTENTION,
                granularity=GranularityEnum.SEQUENCE, tau=DEFAULT_TAU):
        n = config.n_layers
        assertions.assert_plan(0 < count <= n - 1, 'cannot route {0} of {1} layers'.format(count, n))
        return cls(layers=list(range(n - 1 - count, n - 1)), target=TargetEnum(target),
                   granularity=GranularityEnum(granularity), tau=tau)

    @classmethod
    def from_config(cls, config: ModelConfig, plan: PlanConfig):
        if plan.layers is not None:
            built = cls(layers=sorted(plan.layers), target=plan.target, granularity=plan.granularity,
                        tau=plan.tau, allow_last=plan.allow_last)
        elif plan.n_routed is not None:
            built = cls.deepest(config, plan.n_routed, plan.target, plan.granularity, plan.tau)
        else:
            built = cls.default(config, plan.target, plan.granularity, plan.tau)
        built.causal_prefix = plan.causal_prefix
        return built.validate(config)

    def validate(self, config: ModelConfig):
        n = config.n_layers
        assertions.assert_plan(len(self.layers) > 0, 'routing plan has no layers')
        assertions.assert_plan(len(set(self.layers)) == len(self.layers), 'routing plan repeats a layer')
        assertions.assert_plan(all(0 <= i < n for i in self.layers),
                               'routing plan layers {0} outside a {1}-layer model'.format(self.layers, n))
        assertions.assert_plan(self.allow_last or (n - 1) not in self.layers,
                               'routing plan includes the final layer {0}'.format(n - 1))
        return self

    def to_dict(self):
        return {
            'layers': list(self.layers),
            'target': TargetEnum(self.target).value,
            'granularity': GranularityEnum(self.granularity).value,
            'tau': self.tau,
            'causal_prefix': self.causal_prefix,
            'allow_last': self.allow_last,
            'forced': {str(k): v for k, v in sorted(self.forced.items())},
        }

    @classmethod
    def from_dict(cls, data):
        return cls(layers=list(data['layers']), target=TargetEnum(data['target']),
                   granularity=GranularityEnum(data['granularity']), tau=data['tau'],
                   causal_prefix=data.get('causal_prefix', False), allow_last=data.get('allow_last', False),
                   forced={int(k): bool(v) for k, v in data.get('forced', {}).items()})


def unit_sort_key(unit):
    """Orders units "8" < "10" < "10.expert.2"."""
    return tuple((0, int(p), '') if p.isdigit() else (1, 0, p) for p in unit.split('.'))


def _prefix_pool(x, history=None):
    """Running mean of rows, continuing an optional (sum, count) history."""
    n = x.shape[0]
    pooled = Tensor.wrap(np.tril(np.ones((n, n)))) @ x
    counts = np.arange(1, n + 1, dtype=np.float64)[:, None]
    if history is not None:
        prev_sum, prev_count = history
        pooled = ops.add(pooled, prev_sum[None, :])
        counts = counts + prev_count
    return ops.div(pooled, counts)


def route_score(router: RouterState, x, history=None):
    """Importance scores: [L, 1] for per-position routers, [1, 1] for sequence routers."""
    n = x.shape[0]
    rows = n if router.per_position else 1
    if router.forced is not None:
        return Tensor.wrap(np.full((rows, 1), 1.0 if router.forced else 0.0))
    with flop_scope('layers.{0}.router'.format(router.layer_index)):
        if router.granularity == GranularityEnum.TOKEN:
            return ops.sigmoid(x @ router.W)
        if router.causal_prefix:
            return ops.sigmoid(_prefix_pool(x, history) @ router.W)
        return ops.sigmoid(ops.mean(x, axis=0, keepdims=True) @ router.W)


def binarize(scores, tau=DEFAULT_TAU, layer=0, target=TargetEnum.ATTENTION,
             granularity=GranularityEnum.SEQUENCE, sequence=0):
    """M = 1 where score >= tau; a score equal to tau keeps the unit."""
    values = np.asarray(scores.data if isinstance(scores, Tensor) else scores).reshape(-1)
    decision = Decision(unit=str(layer), layer=layer, target=TargetEnum(target).value,
                        granularity=GranularityEnum(granularity).value, keep=values >= tau,
                        scores=values.astype(np.float64), sequence=sequence)
    return SkipMask([decision])


def _decision(router: RouterState, scores, positions, sequence, gate=None):
    values = np.asarray(scores).reshape(-1)
    return Decision(unit=router.unit, layer=router.layer_index, target=TargetEnum(router.target).value,
                    granularity=GranularityEnum(router.granularity).value, keep=values >= router.tau,
                    scores=values.astype(np.float64), sequence=sequence, pooling=router.pooling,
                    positions=np.asarray(positions) if router.per_position else None, gate=gate)


def _branches(out):
    return list(out) if isinstance(out, (list, tuple)) else [out]


def mod_forward_train(router: RouterState, F: Callable, x, positions=None, collector: Optional[SkipMask] = None,
                      sequence=0):
    """y = M * F(x) + x with F evaluated for every unit.

    F(x, positions, cache) returns one residual branch or a sequence of them
    (a block's attention and MLP outputs); each is gated by the same M.
    """
    assertions.assert_state(active_tape() is not None, 'training forward called outside an open tape')
    positions = np.arange(x.shape[0]) if positions is None else np.asarray(positions)
    scores = route_score(router, x)
    gate = scores if router.gate_mode == GATE_SOFT else ops.ste_gate(scores, router.tau)
    y = x
    for branch in _branches(F(x, positions, None)):
        y = ops.add(y, ops.mul(gate, branch))
    if collector is not None:
        collector.add(_decision(router, scores.data, positions, sequence, gate=gate))
    return y


def _infer_scores(router: RouterState, x, cache):
    if cache is None or not router.causal_prefix or router.forced is not None:
        return route_score(router, x).data.reshape(-1)
    history = cache.pooled.get(router.unit)
    scores = route_score(router, x, history).data.reshape(-1)
    prev_sum, prev_count = history if history is not None else (np.zeros(x.shape[1]), 0)
    cache.pooled[router.unit] = (prev_sum + x.data.sum(axis=0), prev_count + x.shape[0])
    return scores


def mod_forward_infer(router: RouterState, F: Callable, x, cache=None, positions=None,
                      collector: Optional[SkipMask] = None, sequence=0):
    """F(x) + x where kept, x where skipped; skipped units never evaluate F.

    Sequence routers decide once per sequence: with a cache the prefill
    decision is held for every generated token.
    """
    n = x.shape[0]
    positions = np.arange(n) if positions is None else np.asarray(positions)
    held = None
    if cache is not None and not router.per_position:
        held = cache.decisions.get(router.unit)
    if held is not None:
        scores = np.array([held[1]])
    else:
        scores = _infer_scores(router, x, cache)
        if cache is not None and not router.per_position:
            cache.decisions[router.unit] = (bool(scores[0] >= router.tau), float(scores[0]))
    keep = scores >= router.tau
    if collector is not None:
        collector.add(_decision(router, scores, positions, sequence))
    if not keep.any():
        return x
    if keep.all():
        y = x
        for branch in _branches(F(x, positions, cache)):
            y = ops.add(y, branch)
        return y
    idx = np.nonzero(keep)[0]
    sub = ops.gather_rows(x, idx)
    ys = sub
    for branch in _branches(F(sub, positions[idx], cache)):
        ys = ops.add(ys, branch)
    out = x.data.copy()
    out[idx] = ys.data
    return Tensor.wrap(out)
