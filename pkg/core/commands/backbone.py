import logging

import click

from core.commands.decorators import RunContext, run_command
from core.models.backbone import ModelState
from core.training.pretrain import pretrain_backbone

logger = logging.getLogger(__name__)

INIT_CHECKPOINT = 'backbone.init.ckpt'
BACKBONE_CHECKPOINT = 'backbone.ckpt'


@click.command('init')
@run_command
def init(ctx: RunContext):
    """Build a randomly initialised backbone (and the synthetic corpus when none is configured)."""
    config = ctx.config.model.validate()
    state = ModelState.init(config, ctx.config.seed)
    ctx.save(INIT_CHECKPOINT, state)
    synthesized = ctx.ensure_corpus()
    ctx.emit({
        'checkpoint': INIT_CHECKPOINT,
        'n_params': state.n_params(),
        'corpus': ctx.corpus_path(),
        'corpus_synthesized': synthesized,
    })


@click.command('pretrain')
@run_command
def pretrain(ctx: RunContext):
    """Dense pretraining of the initial backbone; the result is frozen."""
    state = ctx.load(INIT_CHECKPOINT).state
    train, _ = ctx.splits(ctx.config.train.seq_len)
    trained, history = pretrain_backbone(state, train, ctx.config.pretrain, ctx.config.seed,
                                         log_path=ctx.path('pretrain_log.jsonl'))
    ctx.save(BACKBONE_CHECKPOINT, trained)
    ctx.emit({
        'checkpoint': BACKBONE_CHECKPOINT,
        'steps': len(history),
        'final_loss': history[-1]['loss'] if history else None,
        'checksum': trained.checksum(),
    })
