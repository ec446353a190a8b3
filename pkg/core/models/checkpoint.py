"""Checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
(config, manifest of {name, shape, offset}, dropped experts, router plan),
then raw little-endian float32 blocks in manifest order.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core.commands.schema import ModelConfigSchema
from core.libs import assertions
from core.libs.exceptions import EngineError, ErrorCode
from core.models.backbone import ModelState, param_shapes
from core.models.router_set import RouterSet
from core.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b'RTCKPT01'
FORMAT_VERSION = 1
BLOCK_DTYPE = np.dtype('<f4')


@dataclass
class Checkpoint:
    state: ModelState
    routers: Optional[RouterSet]
    header: dict


def save_checkpoint(path, state: ModelState, routers: Optional[RouterSet] = None, extra=None):
    tensors = [(name, state[name]) for name in param_shapes(state.config) if name in state]
    if routers is not None:
        tensors += sorted(routers.named_parameters().items())
    manifest, offset = [], 0
    for name, t in tensors:
        nbytes = t.size * BLOCK_DTYPE.itemsize
        manifest.append({'name': name, 'shape': t.shape, 'offset': offset})
        offset += nbytes
    header = {
        'version': FORMAT_VERSION,
        'config': ModelConfigSchema().dump(state.config),
        'dropped_experts': sorted([list(x) for x in state.dropped_experts]),
        'manifest': manifest,
        'routers': routers.header() if routers is not None else None,
        'extra': extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    try:
        with open(path, 'wb') as f:
            f.write(MAGIC)
            f.write(struct.pack('<Q', len(blob)))
            f.write(blob)
            for _, t in tensors:
                f.write(np.ascontiguousarray(t.data, dtype=BLOCK_DTYPE).tobytes())
    except OSError as err:
        raise EngineError(ErrorCode.IO, 'could not write checkpoint {0}: {1}'.format(path, err)) from err
    logger.info('saved %d tensors to %s', len(tensors), path)
    return header


def read_header(path):
    assertions.assert_found(path if os.path.exists(path) else None, 'checkpoint not found: {0}'.format(path))
    with open(path, 'rb') as f:
        magic = f.read(len(MAGIC))
        assertions.assert_data(magic == MAGIC, '{0} is not a checkpoint'.format(path))
        raw_length = f.read(8)
        assertions.assert_data(len(raw_length) == 8, 'checkpoint {0} ends inside its header length'.format(path))
        (length,) = struct.unpack('<Q', raw_length)
        blob = f.read(length)
    try:
        header = json.loads(blob.decode('utf-8'))
    except ValueError as err:
        raise EngineError(ErrorCode.DATA, 'checkpoint {0} has an unreadable header: {1}'.format(path, err))
    assertions.assert_data(isinstance(header, dict), 'checkpoint {0} header is not an object'.format(path))
    return header, len(MAGIC) + 8 + length


def load_checkpoint(path) -> Checkpoint:
    """Backbone tensors come back frozen; router tensors come back trainable."""
    header, data_start = read_header(path)
    config = ModelConfigSchema().load(header['config'])
    with open(path, 'rb') as f:
        f.seek(data_start)
        payload = f.read()
    arrays = {}
    for entry in header['manifest']:
        count = int(np.prod(entry['shape'])) if entry['shape'] else 1
        end = entry['offset'] + count * BLOCK_DTYPE.itemsize
        assertions.assert_data(end <= len(payload), 'checkpoint {0} is truncated at {1}'.format(path, entry['name']))
        block = np.frombuffer(payload, dtype=BLOCK_DTYPE, count=count, offset=entry['offset'])
        arrays[entry['name']] = block.reshape(entry['shape']).astype(np.float32)
    params = {name: Tensor(arrays[name], name=name) for name in arrays if not name.startswith('router.')}
    state = ModelState(config, params, [tuple(x) for x in header['dropped_experts']]).freeze()
    routers = None
    if header.get('routers') is not None:
        routers = RouterSet.from_header(config, header['routers'],
                                        {k: v for k, v in arrays.items() if k.startswith('router.')})
    return Checkpoint(state=state, routers=routers, header=header)
