"""Short dense pretraining of the toy backbone before it is frozen."""
import logging

import numpy as np

from core.config import PretrainConfig
from core.libs import assertions, helpers
from core.models.backbone import ModelState, forward_dense
from core.tensor import Adam, Tape, ops
from core.training.data import PAD, Dataset

logger = logging.getLogger(__name__)


def pretrain_backbone(state: ModelState, dataset: Dataset, cfg: PretrainConfig, seed=0, log_path=None):
    """Returns a new frozen state trained for `cfg.steps` batches and the loss history."""
    trained = state.copy().unfreeze()
    optimizer = Adam([trained[name] for name in trained.names()], lr=cfg.learning_rate)
    if log_path is not None:
        helpers.write_jsonl(log_path, [])
    history = []
    for step, (inputs, targets) in enumerate(dataset.stream(cfg.batch_size, cfg.steps, seed)):
        n_valid = int(np.count_nonzero(targets != PAD))
        assertions.assert_data(n_valid > 0, 'batch has no non-padding targets')
        optimizer.zero_grad()
        with Tape() as tape:
            loss = None
            for b in range(inputs.shape[0]):
                term = ops.cross_entropy(forward_dense(trained, inputs[b]), targets[b], reduction='sum')
                loss = term if loss is None else ops.add(loss, term)
            loss = ops.div(loss, float(n_valid))
            tape.backward(loss)
        optimizer.step()
        history.append({'step': step, 'loss': loss.item()})
        if log_path is not None:
            helpers.append_jsonl(log_path, history[-1])
        if step % 100 == 0:
            logger.info('pretrain step %d loss %.4f', step, loss.item())
    return trained.freeze(), history
