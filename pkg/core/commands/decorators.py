import dataclasses
import logging
import os
from functools import wraps

import click

from core.commands.schema import RunConfigSchema
from core.config import RunConfig
from core.libs import helpers
from core.models.checkpoint import load_checkpoint, save_checkpoint
from core.training.corpus import synthesize_corpus
from core.training.data import ingest_corpus

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = 'resolved_config.json'
CORPUS_FILE = 'corpus.txt'


class RunContext:
    """Work directory plus the resolved configuration of one command."""

    def __init__(self, workdir, config: RunConfig):
        self.workdir = workdir
        self.config = config

    def path(self, name):
        return os.path.join(self.workdir, name)

    def exists(self, name):
        return os.path.exists(self.path(name))

    def write_resolved(self):
        helpers.write_json(self.path(RESOLVED_CONFIG), RunConfigSchema().dump(self.config))

    def load(self, name):
        return load_checkpoint(self.path(name))

    def save(self, name, state, routers=None, extra=None):
        return save_checkpoint(self.path(name), state, routers, extra)

    def corpus_path(self):
        if self.config.data.corpus_path is not None:
            return self.config.data.corpus_path
        return self.path(CORPUS_FILE)

    def ensure_corpus(self):
        """Writes the synthetic corpus into the work directory unless a corpus path is configured."""
        if self.config.data.corpus_path is not None or self.exists(CORPUS_FILE):
            return False
        text = synthesize_corpus(self.config.data.synthetic_sentences, self.config.seed)
        with open(self.path(CORPUS_FILE), 'w', encoding='utf-8') as f:
            f.write(text)
        return True

    def splits(self, seq_len):
        """(train, validation) windows of the corpus; the window cap applies to training only."""
        dataset = ingest_corpus(self.corpus_path(), seq_len)
        train, val = dataset.split(self.config.data.val_fraction, self.config.seed)
        return train.limit(self.config.train.max_windows), val

    def emit(self, summary):
        click.echo(helpers.to_json(summary))


def _resolve_config(workdir, config_path):
    if config_path is not None:
        return RunConfigSchema().load(helpers.read_json(config_path))
    resolved = os.path.join(workdir, RESOLVED_CONFIG)
    if os.path.exists(resolved):
        return RunConfigSchema().load(helpers.read_json(resolved))
    return RunConfig()


def run_command(func):
    """Adds --workdir/--config and passes a RunContext as the first argument."""
    @click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                  help='Run configuration JSON; defaults to the work directory\'s resolved config.')
    @click.option('--workdir', required=True, type=click.Path(file_okay=False), help='Work directory.')
    @wraps(func)
    def wrapper(workdir, config_path, *args, **kwargs):
        os.makedirs(workdir, exist_ok=True)
        ctx = RunContext(workdir, _resolve_config(workdir, config_path))
        result = func(ctx, *args, **kwargs)
        ctx.write_resolved()
        return result
    return wrapper


def train_options(func):
    """TrainConfig overrides shared by the router-training commands."""
    @click.option('--lr', 'learning_rate', type=float, default=None)
    @click.option('--lambda', 'lam', type=float, default=None)
    @click.option('--target-capacity', type=float, default=None)
    @click.option('--steps', type=int, default=None)
    @click.option('--batch-size', type=int, default=None)
    @click.option('--seq-len', type=int, default=None)
    @click.option('--seed', type=int, default=None)
    @click.option('--max-windows', type=int, default=None)
    @wraps(func)
    def wrapper(ctx, *args, **kwargs):
        names = ('learning_rate', 'lam', 'target_capacity', 'steps', 'batch_size', 'seq_len', 'seed', 'max_windows')
        overrides = {name: kwargs.pop(name) for name in names}
        overrides = {k: v for k, v in overrides.items() if v is not None}
        if overrides:
            train = dataclasses.replace(ctx.config.train, **overrides)
            # --seed also reseeds the train/validation split
            seed = overrides.get('seed', ctx.config.seed)
            # overrides pass the same range checks as config files
            schema = RunConfigSchema()
            dumped = schema.dump(dataclasses.replace(ctx.config, train=train, seed=seed))
            ctx.config = schema.load(dumped)
        return func(ctx, *args, **kwargs)
    return wrapper
