import logging

import click

from core.bench.evaluate import evaluate_ppl, train_infer_gap
from core.bench.layer_drop import equal_compute_report, layer_drop_baseline, layer_importance
from core.bench.speed import benchmark_speed
from core.bench.trace import SkipTrace, check_utilization, export_trace, skip_ratio_summary
from core.commands.backbone import BACKBONE_CHECKPOINT
from core.commands.decorators import RunContext, run_command
from core.commands.routers import ROUTED_CHECKPOINT
from core.config import GranularityEnum, TargetEnum
from core.libs import assertions, helpers

logger = logging.getLogger(__name__)

GAP_WINDOWS = 16


@click.command('eval')
@run_command
def evaluate(ctx: RunContext):
    """Held-out perplexity of the dense and routed models."""
    state = ctx.load(BACKBONE_CHECKPOINT).state
    routed = ctx.load(ROUTED_CHECKPOINT)
    _, val = ctx.splits(ctx.config.train.seq_len)
    windows, workers = ctx.config.bench.eval_windows, ctx.config.bench.workers
    dense = evaluate_ppl(state, None, val, windows, workers)
    result = evaluate_ppl(routed.state, routed.routers, val, windows, workers)
    report = {
        'dense': dense.to_dict(),
        'routed': result.to_dict(),
        'relative_ppl_increase': result.perplexity / dense.perplexity - 1.0,
    }
    plan = routed.routers.plan if routed.routers is not None else None
    if plan is not None and plan.target != TargetEnum.MLP and (
            plan.granularity == GranularityEnum.TOKEN or plan.causal_prefix):
        report['train_infer_gap'] = train_infer_gap(routed.state, routed.routers, val, GAP_WINDOWS)
    helpers.write_json(ctx.path('eval.json'), report)
    ctx.emit({'dense_ppl': dense.perplexity, 'routed_ppl': result.perplexity, 'capacity': result.capacity})


@click.command('bench')
@run_command
@click.option('--csv', 'write_csv', is_flag=True, help='Also write bench.csv.')
def bench(ctx: RunContext, write_csv):
    """Wall-clock, FLOP and KV-cache comparison of the dense and routed models."""
    routed = ctx.load(ROUTED_CHECKPOINT)
    cfg = ctx.config.bench
    _, val = ctx.splits(cfg.seq_len)
    assertions.assert_data(len(val) >= cfg.batch_size,
                           'need {0} validation windows for the benchmark batch, have {1}'.format(
                               cfg.batch_size, len(val)))
    prompts = [val.inputs[i] for i in range(cfg.batch_size)]
    report = benchmark_speed(routed.state, routed.routers, prompts, cfg.gen_len, cfg.repeats, cfg.workers)
    helpers.write_json(ctx.path('bench.json'), report.to_dict())
    if write_csv:
        helpers.write_csv(ctx.path('bench.csv'), report.rows())
    ctx.emit({
        'speedup': report.speedup,
        'attention_flop_reduction': report.attention_flop_reduction,
        'kv_cache_reduction': report.kv_cache_reduction,
    })


@click.command('trace')
@run_command
@click.option('--csv', 'write_csv', is_flag=True, help='Also write trace.csv.')
def trace(ctx: RunContext, write_csv):
    """Export every routing decision on the validation windows and the per-layer keep fractions."""
    routed = ctx.load(ROUTED_CHECKPOINT)
    _, val = ctx.splits(ctx.config.train.seq_len)
    result = evaluate_ppl(routed.state, routed.routers, val, ctx.config.bench.eval_windows)
    skip_trace = SkipTrace.from_mask(result.mask)
    export_trace(skip_trace, ctx.path('trace.jsonl'), ctx.path('trace.csv') if write_csv else None)
    summary = skip_ratio_summary(skip_trace)
    unused = check_utilization(summary)
    helpers.write_json(ctx.path('trace_summary.json'), {
        'keep_fraction': summary,
        'unused_units': unused,
        'n_records': len(skip_trace),
    })
    ctx.emit({'records': len(skip_trace), 'keep_fraction': summary})


@click.command('drop-baseline')
@run_command
def drop_baseline(ctx: RunContext):
    """Static layer drop by cosine importance, compared against the routed model when present."""
    state = ctx.load(BACKBONE_CHECKPOINT).state
    cfg = ctx.config.baseline
    train, val = ctx.splits(ctx.config.train.seq_len)
    calibration = [train.inputs[i] for i in range(min(cfg.calibration_size, len(train)))]
    importance = layer_importance(state, calibration, cfg.drop_target)
    drop = layer_drop_baseline(state, cfg.drop_target, cfg.drop_count, importance)
    report = {
        'target': cfg.drop_target.value,
        'importance': {str(i): v for i, v in importance.items()},
        'dropped_layers': sorted(drop.routers),
    }
    if ctx.exists(ROUTED_CHECKPOINT):
        report['comparison'] = equal_compute_report(state, ctx.load(ROUTED_CHECKPOINT).routers, drop, val,
                                                    ctx.config.bench.eval_windows)
    else:
        report['perplexity'] = evaluate_ppl(state, drop, val, ctx.config.bench.eval_windows).perplexity
    helpers.write_json(ctx.path('drop_baseline.json'), report)
    ctx.emit({'dropped_layers': report['dropped_layers'], 'comparison': 'comparison' in report})
