"""Static layer drop: remove the layers whose output is most similar to their input,
and the equal-compute comparison against learned routing."""
import logging

import numpy as np

from core.bench.evaluate import evaluate_ppl
from core.config import TargetEnum
from core.libs import assertions
from core.models import backbone
from core.models.backbone import ModelState
from core.models.flops import count_flops
from core.models.router_set import RouterSet

logger = logging.getLogger(__name__)

BUDGET_TOLERANCE = 0.01


def _cosine_distance(a, b):
    num = np.sum(a * b, axis=-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return 1.0 - num / np.maximum(den, 1e-12)


def layer_importance(state: ModelState, sequences, target=TargetEnum.ATTENTION):
    """mean(1 - cos(input, output)) of every layer's `target` unit over the calibration tokens."""
    target = TargetEnum(target)
    config = state.config
    sequences = list(sequences)
    assertions.assert_data(len(sequences) > 0, 'no calibration sequences')
    totals = np.zeros(config.n_layers)
    n_tokens = 0
    for tokens in sequences:
        tokens = np.asarray(tokens, dtype=np.int64)
        positions = backbone.sequence_positions(config, tokens.shape[0])
        x = backbone.embed(state, tokens)
        for i in range(config.n_layers):
            block_in = x.data
            attn_out = x + backbone.attention_branch(state, i, x, positions)
            mlp_out = attn_out + backbone.mlp_branch(state, i, attn_out)
            if target == TargetEnum.ATTENTION:
                pair = (block_in, attn_out.data)
            elif target == TargetEnum.MLP:
                pair = (attn_out.data, mlp_out.data)
            else:
                pair = (block_in, mlp_out.data)
            totals[i] += _cosine_distance(*pair).astype(np.float64).sum()
            x = mlp_out
        n_tokens += tokens.shape[0]
    return {i: float(totals[i] / n_tokens) for i in range(config.n_layers)}


def layer_drop_baseline(state: ModelState, target, drop_count, importance, allow_last=False):
    """Forced-skip routers on the `drop_count` least important eligible layers.

    Ties drop the deeper layer first. Zero layers gives an empty router set.
    """
    n = state.config.n_layers
    eligible = list(range(n)) if allow_last else list(range(n - 1))
    assertions.assert_plan(0 <= drop_count < len(eligible),
                           'cannot drop {0} of {1} eligible layers'.format(drop_count, len(eligible)))
    if drop_count == 0:
        return RouterSet()
    order = sorted(eligible, key=lambda i: (importance[i], -i))
    dropped = sorted(order[:drop_count])
    logger.info('layer drop (%s): removing layers %s', TargetEnum(target).value, dropped)
    return RouterSet.forced_skip(state.config, dropped, target, allow_last=allow_last)


def mean_flops(state: ModelState, mask, n_sequences, seq_len):
    totals = [count_flops(state.config, seq_len, mask.for_sequence(i), state.dropped_experts)
              for i in range(n_sequences)]
    return {
        'total': float(np.mean([t.total for t in totals])),
        'attention': float(np.mean([t.kind_total('attention') for t in totals])),
        'mlp': float(np.mean([t.kind_total('mlp') for t in totals])),
    }


def equal_compute_report(state: ModelState, mod_routers: RouterSet, drop_routers: RouterSet, dataset,
                         max_windows=None):
    """Perplexity and mean FLOPs of the dense, layer-drop and routed models on one dataset."""
    dataset = dataset.limit(max_windows)
    n, seq_len = len(dataset), dataset.seq_len
    dense = evaluate_ppl(state, None, dataset)
    drop = evaluate_ppl(state, drop_routers, dataset)
    mod = evaluate_ppl(state, mod_routers, dataset)
    dense_flops = count_flops(state.config, seq_len, None, state.dropped_experts).summary()
    drop_flops = mean_flops(state, drop.mask, n, seq_len)
    mod_flops = mean_flops(state, mod.mask, n, seq_len)
    gap = abs(mod_flops['total'] - drop_flops['total']) / drop_flops['total']
    report = {
        'dense': {'perplexity': dense.perplexity, 'flops': dense_flops},
        'layer_drop': {'perplexity': drop.perplexity, 'flops': drop_flops,
                       'layers': sorted(drop_routers.routers)},
        'mod': {'perplexity': mod.perplexity, 'flops': mod_flops, 'capacity': mod.capacity,
                'per_layer_capacity': mod.per_layer_capacity},
        'budget_gap': gap,
        'budget_matched': gap <= BUDGET_TOLERANCE,
        'mod_not_worse': mod.perplexity <= drop.perplexity,
    }
    if not report['budget_matched']:
        logger.warning('FLOP budgets differ by %.2f%%', 100.0 * gap)
    if not report['mod_not_worse']:
        logger.warning('routed perplexity %.3f exceeds layer-drop perplexity %.3f', mod.perplexity, drop.perplexity)
    return report
