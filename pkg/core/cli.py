import logging
import sys

import click
from marshmallow.exceptions import ValidationError

from core.commands.backbone import init, pretrain
from core.commands.bench import bench, drop_baseline, evaluate, trace
from core.commands.experts import expert_drop, moe_train
from core.commands.routers import attach_routers, train_router
from core.libs import helpers
from core.libs.exceptions import EXIT_CODES, EngineError, ErrorCode

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def handle_error(err):
    """(payload, exit status) for an error raised by a command; unknown errors propagate."""
    if isinstance(err, EngineError):
        return err.to_dict(), err.exit_code
    elif isinstance(err, ValidationError):
        code = ErrorCode.CONFIG
        return {'error': code.value, 'message': err.messages, 'exit_code': EXIT_CODES[code]}, EXIT_CODES[code]
    elif isinstance(err, OSError):
        code = ErrorCode.IO
        return {'error': code.value, 'message': str(err), 'exit_code': EXIT_CODES[code]}, EXIT_CODES[code]

    raise err


class EngineGroup(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (EngineError, ValidationError, OSError) as err:
            payload, status = handle_error(err)
            click.echo(helpers.to_json(payload), err=True)
            ctx.exit(status)


@click.group(cls=EngineGroup)
@click.option('--log-level', default='INFO', show_default=True,
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))
def cli(log_level):
    """Train layer-skipping routers on a frozen desk-scale transformer."""
    logging.basicConfig(stream=sys.stderr, level=log_level.upper(), format=LOG_FORMAT, force=True)


cli.add_command(init)
cli.add_command(pretrain)
cli.add_command(attach_routers)
cli.add_command(train_router)
cli.add_command(evaluate)
cli.add_command(bench)
cli.add_command(trace)
cli.add_command(drop_baseline)
cli.add_command(expert_drop)
cli.add_command(moe_train)
