"""Per-expert skip routers for mixture-of-experts layers, the expert load
report, and the static expert-drop baseline."""
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from core.config import DEFAULT_TAU
from core.libs import assertions, helpers
from core.models import backbone
from core.models.backbone import ModelState, MoEParams
from core.models.routers import GATE_SOFT, INFER, POOL_FORCED, POOL_TOKEN, TRAIN, Decision, SkipMask
from core.tensor import Tensor, active_tape, flop_scope, ops

logger = logging.getLogger(__name__)

EXPERT_TARGET = 'expert'


@dataclass
class ExpertSkipRouter:
    """One [d, 1] router per expert of a layer, scoring the tokens assigned to it."""
    layer: int
    W: List[Tensor]
    tau: float = DEFAULT_TAU
    gate_mode: str = 'ste'
    forced: Dict[int, bool] = field(default_factory=dict)

    @classmethod
    def zero_init(cls, layer, n_experts, d_model, tau=DEFAULT_TAU):
        W = [Tensor(np.zeros((d_model, 1)), requires_grad=True, name=cls.param_name(layer, e))
             for e in range(n_experts)]
        return cls(layer=layer, W=W, tau=tau)

    @staticmethod
    def param_name(layer, expert):
        return 'router.{0}.expert.{1}.W'.format(layer, expert)

    @property
    def n_experts(self):
        return len(self.W)

    def parameters(self):
        return list(self.W)

    def named_parameters(self):
        return {self.param_name(self.layer, e): w for e, w in enumerate(self.W)}

    def n_params(self):
        return sum(w.size for w in self.W)

    def scores(self, expert, h_rows):
        if expert in self.forced:
            return Tensor.wrap(np.full((h_rows.shape[0], 1), 1.0 if self.forced[expert] else 0.0))
        with flop_scope('layers.{0}.router'.format(self.layer)):
            return ops.sigmoid(h_rows @ self.W[expert])


class ExpertLoadReport:
    """Assigned versus executed token counts per (layer, expert)."""

    def __init__(self):
        self.assigned = defaultdict(int)
        self.executed = defaultdict(int)

    def __repr__(self):
        return '<ExpertLoadReport experts=%d>' % len(self.assigned)

    def add(self, layer, expert, assigned, executed):
        self.assigned[(layer, expert)] += int(assigned)
        self.executed[(layer, expert)] += int(executed)

    def merge(self, other: 'ExpertLoadReport'):
        for key in other.assigned:
            self.add(key[0], key[1], other.assigned[key], other.executed[key])
        return self

    def total_assigned(self):
        return sum(self.assigned.values())

    def total_executed(self):
        return sum(self.executed.values())

    def rows(self):
        """Counts plus both series normalised by the layer's mean assigned count."""
        per_layer = defaultdict(list)
        for layer, expert in self.assigned:
            per_layer[layer].append(self.assigned[(layer, expert)])
        out = []
        for layer, expert in sorted(self.assigned):
            norm = float(np.mean(per_layer[layer])) or 1.0
            assigned = self.assigned[(layer, expert)]
            executed = self.executed[(layer, expert)]
            out.append({
                'layer': layer,
                'expert': expert,
                'assigned': assigned,
                'executed': executed,
                'assigned_normalized': assigned / norm,
                'executed_normalized': executed / norm,
            })
        return out

    def export(self, path):
        helpers.write_jsonl(path, self.rows())


def expert_filter(router: ExpertSkipRouter, mode, report: ExpertLoadReport = None,
                  collector: SkipMask = None, sequence=0):
    """Row filter for `backbone.moe_mix` that applies the per-expert skip routers.

    Training keeps every assigned row and returns an STE (or soft) gate;
    inference narrows the rows to the kept ones.
    """

    def apply(e, rows, h):
        if rows.size == 0:
            if report is not None:
                report.add(router.layer, e, 0, 0)
            return rows, None
        h_rows = ops.gather_rows(h, rows)
        scores = router.scores(e, h_rows)
        keep = scores.data.reshape(-1) >= router.tau
        if report is not None:
            report.add(router.layer, e, rows.size, int(keep.sum()))
        gate = None
        if mode == TRAIN:
            gate = scores if router.gate_mode == GATE_SOFT else ops.ste_gate(scores, router.tau)
        if collector is not None:
            collector.add(Decision(unit='{0}.expert.{1}'.format(router.layer, e), layer=router.layer,
                                   target=EXPERT_TARGET, granularity='token', keep=keep,
                                   scores=scores.data.reshape(-1).astype(np.float64), sequence=sequence,
                                   pooling=POOL_FORCED if e in router.forced else POOL_TOKEN,
                                   positions=rows.copy(), expert=e, gate=gate))
        if mode == TRAIN or keep.all():
            return rows, gate
        return rows[keep], None

    return apply


def moe_forward_skip(h, params: MoEParams, router: ExpertSkipRouter, mode=None, collector: SkipMask = None):
    """Mixture-of-experts output for normalised input h with expert skipping.

    Returns (y, ExpertLoadReport). An expert whose router rejects every
    assigned token is never evaluated; the token keeps its other experts.
    """
    mode = mode or (TRAIN if active_tape() is not None else INFER)
    report = ExpertLoadReport()
    y = backbone.moe_mix(h, params, expert_filter(router, mode, report, collector))
    return y, report


def expert_importance(state: ModelState, sequences):
    """Mean gate probability of every (layer, expert) over the calibration sequences."""
    config = state.config
    assertions.assert_config(config.moe is not None, 'expert importance needs a mixture-of-experts model')
    sequences = list(sequences)
    assertions.assert_data(len(sequences) > 0, 'no calibration sequences')
    totals = np.zeros((config.n_layers, config.moe.n_experts))
    counts = 0
    for tokens in sequences:
        tokens = np.asarray(tokens, dtype=np.int64)
        positions = backbone.sequence_positions(config, tokens.shape[0])
        x = backbone.embed(state, tokens)
        for i in range(config.n_layers):
            x = ops.add(x, backbone.attention_branch(state, i, x, positions))
            h = ops.rmsnorm(x, state['layers.{0}.mlp_norm.weight'.format(i)], config.norm_eps)
            params = state.moe(i)
            probs, _, _ = backbone.moe_route(h, params)
            totals[i] += probs.data.sum(axis=0)
            x = ops.add(x, backbone.moe_mix(h, params))
        counts += tokens.shape[0]
    mean = totals / counts
    return {(i, e): float(mean[i, e]) for i in range(config.n_layers) for e in range(config.moe.n_experts)
            if (i, e) not in state.dropped_experts}


def expert_drop_baseline(state: ModelState, importance, drop_fraction):
    """Copy of `state` with the floor(fraction * total) least important experts removed.

    Ties break by (layer, expert) ascending. Every layer keeps at least one expert.
    """
    config = state.config
    assertions.assert_config(config.moe is not None, 'expert drop needs a mixture-of-experts model')
    assertions.assert_config(0.0 <= drop_fraction < 1.0, 'drop fraction must lie in [0, 1)')
    total = config.n_layers * config.moe.n_experts
    n_drop = int(math.floor(drop_fraction * total))
    order = sorted(importance.items(), key=lambda kv: (kv[1], kv[0][0], kv[0][1]))
    dropped = set(state.dropped_experts) | {key for key, _ in order[:n_drop]}
    for i in range(config.n_layers):
        survivors = sum((i, e) not in dropped for e in range(config.moe.n_experts))
        assertions.assert_config(survivors > 0, 'dropping would remove every expert of layer {0}'.format(i))
    prefixes = ['layers.{0}.moe.experts.{1}.'.format(i, e) for i, e in dropped]
    params = {name: t for name, t in state.params.items() if not any(name.startswith(p) for p in prefixes)}
    logger.info('expert drop removed %d of %d experts', len(dropped), total)
    return ModelState(config, params, dropped)
