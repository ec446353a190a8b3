import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from core.libs import assertions
from core.models.backbone import ModelState, forward_dense
from core.models.moe_skip import ExpertLoadReport
from core.models.routed import INFER, TRAIN, forward_routed
from core.models.router_set import RouterSet
from core.models.routers import SkipMask
from core.tensor import Tape, ops
from core.training.data import PAD, Dataset

logger = logging.getLogger(__name__)


@dataclass
class EvalResult:
    perplexity: float
    mean_nll: float
    n_tokens: int
    capacity: float = 1.0
    per_layer_capacity: Dict[str, float] = field(default_factory=dict)
    mask: Optional[SkipMask] = None
    load_report: Optional[ExpertLoadReport] = None

    def to_dict(self):
        return {
            'perplexity': self.perplexity,
            'mean_nll': self.mean_nll,
            'n_tokens': self.n_tokens,
            'capacity': self.capacity,
            'per_layer_capacity': self.per_layer_capacity,
        }


def _window_nll(state, routers, inputs, targets, index):
    mask, report = SkipMask(), ExpertLoadReport()
    if routers is None:
        logits = forward_dense(state, inputs)
    else:
        logits = forward_routed(state, routers, inputs, INFER, collector=mask, load_report=report, sequence=index)
    return ops.cross_entropy(logits, targets, reduction='sum').item(), mask, report


def evaluate_ppl(state: ModelState, routers: Optional[RouterSet], dataset: Dataset, max_windows=None, workers=1):
    """exp(mean next-token cross-entropy) over the held-out windows, inference path."""
    dataset = dataset.limit(max_windows)
    assertions.assert_data(len(dataset) > 0, 'empty evaluation set')
    jobs = [(dataset.inputs[i], dataset.targets[i], i) for i in range(len(dataset))]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: _window_nll(state, routers, *job), jobs))
    else:
        results = [_window_nll(state, routers, *job) for job in jobs]
    total = math.fsum(r[0] for r in results)
    n_tokens = int(np.count_nonzero(dataset.targets != PAD))
    assertions.assert_data(n_tokens > 0, 'evaluation set has no non-padding targets')
    mask, report = SkipMask(), ExpertLoadReport()
    for _, m, r in results:
        mask.decisions.extend(m.decisions)
        report.merge(r)
    mean_nll = total / n_tokens
    return EvalResult(perplexity=math.exp(mean_nll), mean_nll=mean_nll, n_tokens=n_tokens,
                      capacity=mask.capacity(), per_layer_capacity=mask.unit_capacity(), mask=mask,
                      load_report=report)


def train_infer_gap(state: ModelState, routers: RouterSet, dataset: Dataset, max_windows=None):
    """Largest logit difference between the masked training path and the bypassing
    inference path. Zero for MLP targets and sequence-level routing; token-level
    attention differs because skipped tokens still serve as keys in training."""
    dataset = dataset.limit(max_windows)
    assertions.assert_data(len(dataset) > 0, 'empty evaluation set')
    gap, nll_train, nll_infer = 0.0, 0.0, 0.0
    for i in range(len(dataset)):
        with Tape():
            train_logits = forward_routed(state, routers, dataset.inputs[i], TRAIN)
        infer_logits = forward_routed(state, routers, dataset.inputs[i], INFER)
        gap = max(gap, float(np.max(np.abs(train_logits.data - infer_logits.data))))
        nll_train += ops.cross_entropy(train_logits, dataset.targets[i], reduction='sum').item()
        nll_infer += ops.cross_entropy(infer_logits, dataset.targets[i], reduction='sum').item()
    n_tokens = int(np.count_nonzero(dataset.targets != PAD))
    return {'max_abs_logit_gap': gap, 'nll_train': nll_train / n_tokens, 'nll_infer': nll_infer / n_tokens}
