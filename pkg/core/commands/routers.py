import dataclasses
import logging

import click

from core.commands.backbone import BACKBONE_CHECKPOINT
from core.commands.decorators import RunContext, run_command, train_options
from core.libs import assertions, helpers
from core.models.router_set import RouterSet
from core.models.routers import MoDLayerPlan
from core.training.grid import grid_search
from core.training.trainer import train_routers

logger = logging.getLogger(__name__)

ROUTED_INIT_CHECKPOINT = 'routed.init.ckpt'
ROUTED_CHECKPOINT = 'routed.ckpt'


@click.command('attach-routers')
@run_command
def attach_routers(ctx: RunContext):
    """Attach zero-initialised routers to the frozen backbone per the configured plan."""
    state = ctx.load(BACKBONE_CHECKPOINT).state
    plan = MoDLayerPlan.from_config(state.config, ctx.config.plan)
    routers = RouterSet.attach(state.config, plan)
    ctx.save(ROUTED_INIT_CHECKPOINT, state, routers)
    ctx.emit({
        'checkpoint': ROUTED_INIT_CHECKPOINT,
        'layers': plan.layers,
        'target': plan.target.value,
        'granularity': plan.granularity.value,
        'tau': plan.tau,
        'router_params': routers.n_params(),
        'router_param_fraction': routers.n_params() / state.n_params(),
    })


@click.command('train-router')
@run_command
@train_options
@click.option('--grid', is_flag=True, help='Grid-search learning rate and lambda before the final run.')
def train_router(ctx: RunContext, grid):
    """Train the attached routers with the backbone frozen."""
    ckpt = ctx.load(ROUTED_INIT_CHECKPOINT)
    assertions.assert_state(ckpt.routers is not None and len(ckpt.routers.routers) > 0,
                            '{0} carries no routers'.format(ROUTED_INIT_CHECKPOINT))
    cfg = ctx.config.train
    train, val = ctx.splits(cfg.seq_len)
    summary = {}
    if grid:
        result = grid_search(ckpt.state, ckpt.routers.plan, train, val, cfg,
                             max_val_windows=ctx.config.bench.eval_windows)
        helpers.write_json(ctx.path('grid.json'), result.to_dict())
        cfg = dataclasses.replace(cfg, learning_rate=result.selected.learning_rate, lam=result.selected.lam)
        ctx.config = dataclasses.replace(ctx.config, train=cfg)
        summary['grid_cells'] = len(result.cells)
        summary['grid_warning'] = result.warning
    trained = train_routers(ckpt.state, ckpt.routers, train, cfg, log_path=ctx.path('train_log.jsonl'))
    ctx.save(ROUTED_CHECKPOINT, ckpt.state, trained.routers)
    final = trained.final
    summary.update({
        'checkpoint': ROUTED_CHECKPOINT,
        'steps': len(trained.history),
        'learning_rate': cfg.learning_rate,
        'lambda': cfg.lam,
        'capacity': final.capacity if final is not None else 1.0,
        'task_loss': final.task if final is not None else None,
    })
    ctx.emit(summary)
