"""Router-only optimisation: L = L_task + lambda * relu(capacity - s)."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from core.config import TrainConfig
from core.libs import assertions, helpers
from core.models.backbone import ModelState
from core.models.routed import TRAIN, forward_routed
from core.models.router_set import RouterSet
from core.models.routers import SkipMask, unit_sort_key
from core.tensor import Adam, Tape, Tensor, ops
from core.training.data import PAD, Dataset

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    step: int
    total: float
    task: float
    mod: float
    capacity: float
    per_layer_capacity: Dict[str, float] = field(default_factory=dict)

    def to_dict(self):
        units = sorted(self.per_layer_capacity, key=unit_sort_key)
        return {
            'step': self.step,
            'total_loss': self.total,
            'task_loss': self.task,
            'mod_loss': self.mod,
            'capacity': self.capacity,
            'units': units,
            'per_layer_capacity': [self.per_layer_capacity[u] for u in units],
        }


@dataclass
class TrainResult:
    routers: RouterSet
    history: List[LossBreakdown]

    @property
    def final(self):
        return self.history[-1] if self.history else None


def mod_loss(masks: SkipMask, target_capacity) -> Tensor:
    """relu(c - s) with c the kept fraction over every decision in `masks`.

    The binary gates carry straight-through gradients, so the backward pass
    reaches the router scores. The value is taken on the fraction while each
    gate receives the gradient of the kept count.
    """
    gates = masks.gates()
    assertions.assert_config(len(gates) > 0, 'no routing layers configured')
    flat = ops.concat([ops.reshape(g, (-1,)) for g in gates])
    return ops.relu(ops.sub(ops.ste_fraction(flat), target_capacity))


def task_loss(state: ModelState, routers: RouterSet, inputs, targets, collector: SkipMask, mode=TRAIN):
    """Mean next-token cross-entropy over every non-padding target of the batch."""
    n_valid = int(np.count_nonzero(targets != PAD))
    assertions.assert_data(n_valid > 0, 'batch has no non-padding targets')
    total = None
    for b in range(inputs.shape[0]):
        logits = forward_routed(state, routers, inputs[b], mode, collector=collector, sequence=b)
        term = ops.cross_entropy(logits, targets[b], reduction='sum')
        total = term if total is None else ops.add(total, term)
    return ops.div(total, float(n_valid))


class FrozenGuard:
    """Detects any change to backbone storage across optimiser steps."""

    def __init__(self, state: ModelState):
        for name in state.names():
            assertions.assert_frozen(not state.trainable(name), 'backbone tensor {0} is trainable'.format(name))
        self.state = state
        self.checksum = state.checksum()
        self.buffers = {name: id(state[name].data) for name in state.names()}

    def check_step(self):
        for name, buffer in self.buffers.items():
            t = self.state[name]
            assertions.assert_frozen(id(t.data) == buffer and not t.data.flags.writeable and not t.requires_grad,
                                     'backbone tensor {0} changed during router training'.format(name))

    def check_final(self):
        assertions.assert_frozen(self.state.checksum() == self.checksum, 'backbone checksum changed')


def train_routers(state: ModelState, routers: RouterSet, dataset: Dataset, cfg: TrainConfig, log_path=None):
    """Adam over router weights only; returns the routers with the per-step history."""
    guard = FrozenGuard(state)
    params = routers.parameters()
    assertions.assert_config(len(params) > 0, 'no trainable routers attached')
    optimizer = Adam(params, lr=cfg.learning_rate)
    if log_path is not None:
        helpers.write_jsonl(log_path, [])
    history = []
    for step, (inputs, targets) in enumerate(dataset.stream(cfg.batch_size, cfg.steps, cfg.seed)):
        optimizer.zero_grad()
        collector = SkipMask()
        with Tape() as tape:
            task = task_loss(state, routers, inputs, targets, collector)
            mod = mod_loss(collector, cfg.target_capacity)
            total = ops.add(task, ops.mul(mod, cfg.lam))
            tape.backward(total)
        optimizer.step()
        guard.check_step()
        record = LossBreakdown(step=step, total=total.item(), task=task.item(), mod=mod.item(),
                               capacity=collector.capacity(),
                               per_layer_capacity={u: c for u, c in collector.unit_capacity().items()})
        history.append(record)
        if log_path is not None:
            helpers.append_jsonl(log_path, record.to_dict())
        if step % 50 == 0:
            logger.info('step %d task %.4f mod %.4f capacity %.3f', step, record.task, record.mod, record.capacity)
    guard.check_final()
    if history:
        logger.info('router training done: %d steps, final capacity %.3f', len(history), history[-1].capacity)
    return TrainResult(routers=routers, history=history)
