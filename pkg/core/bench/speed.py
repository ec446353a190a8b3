"""Wall-clock, FLOP and KV-cache comparison of the dense and routed models."""
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from core.libs import assertions, helpers
from core.models.backbone import ModelState
from core.models.flops import batch_flops, count_flops
from core.models.kv_cache import KVCache
from core.models.routed import INFER, forward_routed
from core.models.router_set import RouterSet
from core.models.routers import SkipMask

logger = logging.getLogger(__name__)

WARMUP = 2


@dataclass
class RunCost:
    flops: int
    attention_flops: int
    padded_flops: int
    kv_cache_peak_bytes: int
    prefill_tokens_per_sec: float
    generation_tokens_per_sec: float
    tokens_per_sec: float

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class CostReport:
    dense: RunCost
    routed: RunCost
    batch_size: int
    seq_len: int
    gen_len: int
    repeats: int
    hardware: dict = field(default_factory=helpers.hardware_metadata)

    @property
    def speedup(self):
        return self.routed.tokens_per_sec / self.dense.tokens_per_sec

    @property
    def flop_ratio(self):
        return self.routed.flops / self.dense.flops

    @property
    def attention_flop_reduction(self):
        return 1.0 - self.routed.attention_flops / self.dense.attention_flops

    @property
    def kv_cache_reduction(self):
        return 1.0 - self.routed.kv_cache_peak_bytes / self.dense.kv_cache_peak_bytes

    def to_dict(self):
        return {
            'dense': self.dense.to_dict(),
            'routed': self.routed.to_dict(),
            'speedup': self.speedup,
            'prefill_speedup': self.routed.prefill_tokens_per_sec / self.dense.prefill_tokens_per_sec,
            'generation_speedup': (self.routed.generation_tokens_per_sec / self.dense.generation_tokens_per_sec
                                   if self.dense.generation_tokens_per_sec else None),
            'flop_ratio': self.flop_ratio,
            'attention_flop_reduction': self.attention_flop_reduction,
            'kv_cache_reduction': self.kv_cache_reduction,
            'batch_size': self.batch_size,
            'seq_len': self.seq_len,
            'gen_len': self.gen_len,
            'repeats': self.repeats,
            'hardware': self.hardware,
        }

    def rows(self):
        return [dict(model=name, **cost.to_dict()) for name, cost in (('dense', self.dense), ('routed', self.routed))]


def _greedy(logits):
    return np.array([int(np.argmax(logits.data[-1]))])


def _run_sequence(state, routers, prompt, gen_len):
    """Prefill then greedy generation; returns (prefill s, generation s, cache)."""
    cache = KVCache(state.config)
    start = time.perf_counter()
    logits = forward_routed(state, routers, prompt, INFER, cache)
    prefill = time.perf_counter() - start
    start = time.perf_counter()
    for _ in range(gen_len):
        logits = forward_routed(state, routers, _greedy(logits), INFER, cache)
    generation = time.perf_counter() - start
    return prefill, generation, cache


def _measure(state, routers, prompts, gen_len, repeats, workers):
    prefill_times, gen_times, peak = [], [], 0
    for rep in range(repeats + WARMUP):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                wall = time.perf_counter()
                results = list(pool.map(lambda p: _run_sequence(state, routers, p, gen_len), prompts))
                wall = time.perf_counter() - wall
            share = wall / max(sum(r[0] + r[1] for r in results), 1e-12)
            prefill = sum(r[0] for r in results) * share
            generation = sum(r[1] for r in results) * share
        else:
            results = [_run_sequence(state, routers, p, gen_len) for p in prompts]
            prefill = sum(r[0] for r in results)
            generation = sum(r[1] for r in results)
        peak = max(peak, sum(r[2].nbytes() for r in results))
        if rep >= WARMUP:
            prefill_times.append(prefill)
            gen_times.append(generation)
    prefill = statistics.median(prefill_times)
    generation = statistics.median(gen_times)
    n_prefill = sum(p.shape[0] for p in prompts)
    n_gen = len(prompts) * gen_len
    return {
        'kv_cache_peak_bytes': int(peak),
        'prefill_tokens_per_sec': n_prefill / prefill,
        'generation_tokens_per_sec': n_gen / generation if gen_len else 0.0,
        'tokens_per_sec': (n_prefill + n_gen) / (prefill + generation),
    }


def _prefill_flops(state, routers, prompts):
    seq_len = prompts[0].shape[0]
    masks = []
    for i, prompt in enumerate(prompts):
        mask = SkipMask()
        forward_routed(state, routers, prompt, INFER, collector=mask, sequence=i)
        masks.append(mask)
    total = sum(count_flops(state.config, seq_len, m, state.dropped_experts).total for m in masks)
    attention = sum(count_flops(state.config, seq_len, m, state.dropped_experts).kind_total('attention')
                    for m in masks)
    padded = batch_flops(state.config, seq_len, masks, state.dropped_experts)['padded']
    return total, attention, padded


def _cost(state, routers, prompts, gen_len, repeats, workers):
    flops, attention, padded = _prefill_flops(state, routers, prompts)
    timing = _measure(state, routers, prompts, gen_len, repeats, workers)
    return RunCost(flops=flops, attention_flops=attention, padded_flops=padded, **timing)


def benchmark_speed(state: ModelState, routers: Optional[RouterSet], prompts, gen_len, repeats, workers=1):
    """Dense versus routed cost for a batch of equal-length prompts.

    FLOPs are the closed-form prefill counts (ragged, plus the padded batch
    figure); timings are medians over `repeats` after two discarded warm-up
    rounds, prefill and generation timed separately.
    """
    prompts = [np.asarray(p, dtype=np.int64) for p in prompts]
    assertions.assert_data(len(prompts) > 0, 'benchmark needs at least one prompt')
    assertions.assert_data(len({p.shape[0] for p in prompts}) == 1, 'benchmark prompts must share one length')
    assertions.assert_config(repeats > 0, 'repeats must be positive')
    seq_len = prompts[0].shape[0]
    assertions.assert_capacity(seq_len + gen_len <= state.config.max_seq_len,
                               'prompt plus generation exceeds max_seq_len {0}'.format(state.config.max_seq_len))
    dense = _cost(state, RouterSet(), prompts, gen_len, repeats, workers)
    routed = _cost(state, routers or RouterSet(), prompts, gen_len, repeats, workers)
    report = CostReport(dense=dense, routed=routed, batch_size=len(prompts), seq_len=seq_len, gen_len=gen_len,
                        repeats=repeats)
    logger.info('speedup %.3f, attention FLOP reduction %.3f, kv reduction %.3f', report.speedup,
                report.attention_flop_reduction, report.kv_cache_reduction)
    return report
