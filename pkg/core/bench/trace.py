"""Per-decision skip traces and the layer-wise keep fractions derived from them."""
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import List

from core.libs import helpers
from core.libs.exceptions import EngineError, ErrorCode
from core.models.routers import SkipMask, unit_sort_key

logger = logging.getLogger(__name__)

FIELDS = ['sequence', 'layer', 'unit', 'target', 'granularity', 'position', 'expert', 'keep', 'score']


@dataclass
class SkipTrace:
    records: List[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @classmethod
    def from_mask(cls, mask: SkipMask):
        """One record per decision point: per (sequence, layer) for sequence routers,
        per (sequence, layer, position) otherwise."""
        records = []
        for d in mask:
            for j in range(d.n_decisions):
                records.append({
                    'sequence': int(d.sequence),
                    'layer': int(d.layer),
                    'unit': d.unit,
                    'target': d.target,
                    'granularity': d.granularity,
                    'position': int(d.positions[j]) if d.positions is not None else None,
                    'expert': d.expert,
                    'keep': bool(d.keep[j]),
                    'score': float(d.scores[j]),
                })
        return cls(records)


def export_trace(trace: SkipTrace, path, csv_path=None):
    try:
        helpers.write_jsonl(path, trace.records)
        if csv_path is not None:
            helpers.write_csv(csv_path, trace.records, FIELDS)
    except OSError as err:
        raise EngineError(ErrorCode.IO, 'could not export trace to {0}: {1}'.format(path, err)) from err
    logger.info('exported %d trace records to %s', len(trace), path)


def load_trace(path):
    return SkipTrace(helpers.read_jsonl(path))


def skip_ratio_summary(trace: SkipTrace):
    """Keep fraction per routing unit, in layer order."""
    kept, total = defaultdict(int), defaultdict(int)
    for r in trace.records:
        kept[r['unit']] += int(r['keep'])
        total[r['unit']] += 1
    units = sorted(total, key=unit_sort_key)
    return {u: kept[u] / total[u] for u in units}


def check_utilization(summary):
    """Soft expectation: every routed layer stays in use. Returns the unused units."""
    unused = [u for u, fraction in summary.items() if fraction == 0.0]
    if unused:
        logger.warning('routing units never kept: %s', ', '.join(unused))
    return unused
