import logging

import click

from core.bench.evaluate import evaluate_ppl
from core.commands.backbone import BACKBONE_CHECKPOINT
from core.commands.decorators import RunContext, run_command, train_options
from core.libs import assertions, helpers
from core.models.moe_skip import expert_drop_baseline, expert_importance
from core.models.router_set import RouterSet
from core.training.trainer import train_routers

logger = logging.getLogger(__name__)

EXPERT_DROP_CHECKPOINT = 'expert_drop.ckpt'
MOE_ROUTED_CHECKPOINT = 'moe_routed.ckpt'


def _moe_backbone(ctx: RunContext):
    state = ctx.load(BACKBONE_CHECKPOINT).state
    assertions.assert_config(state.config.moe is not None, 'backbone has no mixture-of-experts layers')
    return state


@click.command('expert-drop')
@run_command
def expert_drop(ctx: RunContext):
    """Remove the globally least important experts by calibration gate mass."""
    state = _moe_backbone(ctx)
    cfg = ctx.config.baseline
    train, val = ctx.splits(ctx.config.train.seq_len)
    calibration = [train.inputs[i] for i in range(min(cfg.calibration_size, len(train)))]
    importance = expert_importance(state, calibration)
    dropped = expert_drop_baseline(state, importance, cfg.expert_drop_fraction)
    ctx.save(EXPERT_DROP_CHECKPOINT, dropped)
    windows = ctx.config.bench.eval_windows
    dense = evaluate_ppl(state, None, val, windows)
    pruned = evaluate_ppl(dropped, None, val, windows)
    report = {
        'drop_fraction': cfg.expert_drop_fraction,
        'dropped_experts': sorted([list(x) for x in dropped.dropped_experts]),
        'n_dropped': len(dropped.dropped_experts),
        'importance': [{'layer': i, 'expert': e, 'importance': v} for (i, e), v in sorted(importance.items())],
        'dense_ppl': dense.perplexity,
        'expert_drop_ppl': pruned.perplexity,
    }
    helpers.write_json(ctx.path('expert_drop.json'), report)
    ctx.emit({'checkpoint': EXPERT_DROP_CHECKPOINT, 'n_dropped': report['n_dropped'],
              'expert_drop_ppl': pruned.perplexity})


@click.command('moe-train')
@run_command
@train_options
def moe_train(ctx: RunContext):
    """Train per-expert skip routers and export assigned versus executed expert loads."""
    state = _moe_backbone(ctx)
    cfg = ctx.config.train
    routers = RouterSet.attach_experts(state.config, tau=ctx.config.plan.tau)
    train, val = ctx.splits(cfg.seq_len)
    trained = train_routers(state, routers, train, cfg, log_path=ctx.path('moe_train_log.jsonl'))
    ctx.save(MOE_ROUTED_CHECKPOINT, state, trained.routers)
    result = evaluate_ppl(state, trained.routers, val, ctx.config.bench.eval_windows)
    result.load_report.export(ctx.path('expert_load.jsonl'))
    ctx.emit({
        'checkpoint': MOE_ROUTED_CHECKPOINT,
        'steps': len(trained.history),
        'capacity': result.capacity,
        'perplexity': result.perplexity,
        'assigned': result.load_report.total_assigned(),
        'executed': result.load_report.total_executed(),
    })
