import csv
import json
import os
import platform

import numpy as np

from core.libs import assertions


def new_rng(seed, *stream):
    """Independent generator for `seed` and an optional stream path."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(s) for s in stream]]))


def to_json(data):
    return json.dumps(data, sort_keys=True, separators=(',', ':'))


def write_json(path, data):
    try:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, sort_keys=True, indent=2)
            f.write('\n')
    except OSError as err:
        raise OSError('could not write {0}: {1}'.format(path, err)) from err


def read_json(path):
    assertions.assert_found(path if os.path.exists(path) else None, 'file not found: {0}'.format(path))
    with open(path, encoding='utf-8') as f:
        return json.load(f)


def write_jsonl(path, rows):
    try:
        with open(path, 'w', encoding='utf-8') as f:
            for row in rows:
                f.write(to_json(row))
                f.write('\n')
    except OSError as err:
        raise OSError('could not write {0}: {1}'.format(path, err)) from err


def append_jsonl(path, row):
    with open(path, 'a', encoding='utf-8') as f:
        f.write(to_json(row))
        f.write('\n')


def read_jsonl(path):
    assertions.assert_found(path if os.path.exists(path) else None, 'file not found: {0}'.format(path))
    with open(path, encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def write_csv(path, rows, fieldnames=None):
    rows = list(rows)
    if fieldnames is None:
        fieldnames = sorted({key for row in rows for key in row})
    try:
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames)
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    except OSError as err:
        raise OSError('could not write {0}: {1}'.format(path, err)) from err


def hardware_metadata():
    return {
        'machine': platform.machine(),
        'processor': platform.processor(),
        'python': platform.python_version(),
        'numpy': np.__version__,
        'cpu_count': os.cpu_count(),
    }
