from typing import Dict, List, Optional, Tuple

import numpy as np

from core.libs import assertions

BYTES_PER_VALUE = 4


class LayerCache:
    """Keys/values [n_heads, cached_len, head_dim] plus the position of every cached entry."""

    def __init__(self, keys, values, positions):
        self.keys = keys
        self.values = values
        self.positions = positions

    @property
    def cached_len(self):
        return int(self.positions.shape[0])

    def extend(self, keys, values, positions):
        self.keys = np.concatenate([self.keys, keys], axis=1)
        self.values = np.concatenate([self.values, values], axis=1)
        self.positions = np.concatenate([self.positions, positions])


class KVCache:
    """Per-sequence attention cache. A layer bypassed for the sequence has no entry."""

    def __init__(self, config):
        self.config = config
        self.length = 0
        self.layers: List[Optional[LayerCache]] = [None] * config.n_layers
        # sequence-level routing decisions taken at prefill, held for generation
        self.decisions: Dict[str, Tuple[bool, float]] = {}
        # running (sum, count) of routed inputs for causal prefix-mean routers
        self.pooled: Dict[str, Tuple[np.ndarray, int]] = {}

    def __repr__(self):
        return '<KVCache len=%d bytes=%d>' % (self.length, self.nbytes())

    def check_room(self, n_new):
        assertions.assert_capacity(self.length + n_new <= self.config.max_seq_len,
                                   'sequence of {0} positions exceeds max_seq_len {1}'.format(
                                       self.length + n_new, self.config.max_seq_len))

    def positions(self, n_new):
        return np.arange(self.length, self.length + n_new)

    def advance(self, n_new):
        self.length += n_new

    def present(self, layer):
        return self.layers[layer] is not None

    def cached_len(self, layer):
        entry = self.layers[layer]
        return 0 if entry is None else entry.cached_len

    def write(self, layer, keys, values, positions):
        """Append entries for `layer` and return the full (keys, values, positions)."""
        entry = self.layers[layer]
        if entry is None:
            entry = LayerCache(keys.copy(), values.copy(), np.asarray(positions).copy())
            self.layers[layer] = entry
        else:
            entry.extend(keys, values, np.asarray(positions))
        return entry.keys, entry.values, entry.positions

    def read(self, layer):
        entry = self.layers[layer]
        if entry is None:
            return None
        return entry.keys, entry.values, entry.positions

    def layer_nbytes(self, layer):
        return 2 * self.config.n_heads * self.cached_len(layer) * self.config.head_dim * BYTES_PER_VALUE

    def nbytes(self):
        return sum(self.layer_nbytes(i) for i in range(self.config.n_layers) if self.present(i))
