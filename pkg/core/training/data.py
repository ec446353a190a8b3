"""Byte-level tokenisation into fixed-length next-token windows."""
import logging
import os
from dataclasses import dataclass

import numpy as np

from core.libs import assertions, helpers
from core.libs.exceptions import EngineError, ErrorCode
from core.tensor.ops import IGNORE_INDEX

logger = logging.getLogger(__name__)

PAD = IGNORE_INDEX


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return int(self.inputs.shape[0])

    def __repr__(self):
        return '<Dataset windows=%d seq_len=%d>' % (len(self), self.seq_len)

    @property
    def seq_len(self):
        return int(self.inputs.shape[1])

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.targets[idx])

    def limit(self, max_windows=None):
        if max_windows is None or max_windows >= len(self):
            return self
        return self.take(np.arange(max_windows))

    def split(self, val_fraction, seed=0):
        """Disjoint (train, validation) windows chosen by a seeded permutation."""
        assertions.assert_data(len(self) >= 2 or val_fraction == 0.0, 'too few windows to split')
        order = helpers.new_rng(seed, 2).permutation(len(self))
        n_val = int(round(val_fraction * len(self)))
        if val_fraction > 0.0:
            n_val = min(max(n_val, 1), len(self) - 1)
        return self.take(np.sort(order[n_val:])), self.take(np.sort(order[:n_val]))

    def batches(self, batch_size, seed=0, epoch=0):
        """One shuffled pass; the last batch may be short."""
        order = helpers.new_rng(seed, 3, epoch).permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.inputs[idx], self.targets[idx]

    def stream(self, batch_size, steps, seed=0):
        """Exactly `steps` batches, reshuffling at every epoch boundary."""
        assertions.assert_data(len(self) > 0, 'empty dataset')
        produced, epoch = 0, 0
        while produced < steps:
            for batch in self.batches(batch_size, seed, epoch):
                if produced == steps:
                    return
                yield batch
                produced += 1
            epoch += 1


def encode_text(text, seq_len):
    data = np.frombuffer(text.encode('utf-8'), dtype=np.uint8).astype(np.int64)
    return encode_bytes(data, seq_len)


def encode_bytes(data, seq_len):
    """Non-overlapping windows of `seq_len` bytes; targets are shifted by one and
    the window's last target is PAD when no next byte exists. A final partial
    window is dropped."""
    assertions.assert_config(seq_len > 0, 'window length must be positive')
    assertions.assert_data(data.size > 0, 'corpus is empty')
    n = data.size // seq_len
    assertions.assert_data(n > 0, 'corpus of {0} bytes is shorter than one window of {1}'.format(data.size, seq_len))
    inputs = data[:n * seq_len].reshape(n, seq_len)
    shifted = np.full(n * seq_len, PAD, dtype=np.int64)
    tail = data[1:n * seq_len + 1]
    shifted[:tail.size] = tail
    return Dataset(inputs.copy(), shifted.reshape(n, seq_len))


def ingest_corpus(path, seq_len, max_windows=None):
    assertions.assert_found(path if os.path.exists(path) else None, 'corpus not found: {0}'.format(path))
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as err:
        raise EngineError(ErrorCode.IO, 'could not read corpus {0}: {1}'.format(path, err)) from err
    assertions.assert_data(len(raw) > 0, 'corpus {0} is empty'.format(path))
    dataset = encode_bytes(np.frombuffer(raw, dtype=np.uint8).astype(np.int64), seq_len).limit(max_windows)
    logger.info('ingested %s: %d bytes, %d windows of %d', path, len(raw), len(dataset), seq_len)
    return dataset
