"""Learning-rate x lambda search under the capacity constraint |c - s| <= tolerance."""
import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Optional

from core.bench.evaluate import evaluate_ppl
from core.config import TrainConfig
from core.libs import assertions
from core.models.backbone import ModelState
from core.models.router_set import RouterSet
from core.models.routers import MoDLayerPlan
from core.training.data import Dataset
from core.training.trainer import train_routers

logger = logging.getLogger(__name__)


@dataclass
class GridCell:
    learning_rate: float
    lam: float
    val_loss: float
    capacity: float
    final_task_loss: Optional[float]
    within_tolerance: bool

    def to_dict(self):
        return {
            'learning_rate': self.learning_rate,
            'lambda': self.lam,
            'val_loss': self.val_loss,
            'capacity': self.capacity,
            'final_task_loss': self.final_task_loss,
            'within_tolerance': self.within_tolerance,
        }


@dataclass
class GridResult:
    cells: List[GridCell]
    selected: GridCell
    warning: bool

    def to_dict(self):
        return {
            'cells': [c.to_dict() for c in self.cells],
            'selected': self.selected.to_dict(),
            'warning': self.warning,
        }


def run_cell(state: ModelState, plan: MoDLayerPlan, train: Dataset, val: Dataset, cfg: TrainConfig,
             learning_rate, lam, max_val_windows=None):
    """Trains fresh zero-initialised routers for one grid cell and scores them on `val`."""
    # worker processes receive unpickled, writable copies
    state.freeze()
    cell_cfg = dataclasses.replace(cfg, learning_rate=learning_rate, lam=lam,
                                   steps=cfg.grid_steps if cfg.grid_steps is not None else cfg.steps)
    routers = RouterSet.attach(state.config, MoDLayerPlan.from_dict(plan.to_dict()))
    result = train_routers(state, routers, train, cell_cfg)
    ev = evaluate_ppl(state, routers, val, max_windows=max_val_windows)
    within = abs(ev.capacity - cfg.target_capacity) <= cfg.capacity_tolerance
    final = result.final.task if result.final is not None else None
    logger.info('grid cell lr=%g lambda=%g: val_loss %.4f capacity %.3f', learning_rate, lam, ev.mean_nll,
                ev.capacity)
    return GridCell(learning_rate=learning_rate, lam=lam, val_loss=ev.mean_nll, capacity=ev.capacity,
                    final_task_loss=final, within_tolerance=within)


def select_cell(cells: List[GridCell], target_capacity):
    """Lowest validation loss among cells meeting the tolerance, ties to lower lambda
    then lower learning rate; without any such cell, the closest capacity."""
    feasible = [c for c in cells if c.within_tolerance]
    if feasible:
        return min(feasible, key=lambda c: (c.val_loss, c.lam, c.learning_rate)), False
    closest = min(cells, key=lambda c: (abs(c.capacity - target_capacity), c.val_loss, c.lam, c.learning_rate))
    return closest, True


def grid_search(state: ModelState, plan: MoDLayerPlan, train: Dataset, val: Dataset, cfg: TrainConfig,
                max_val_windows=None):
    assertions.assert_config(len(cfg.lr_grid) > 0 and len(cfg.lambda_grid) > 0, 'search grids must not be empty')
    grid = [(lr, lam) for lr in cfg.lr_grid for lam in cfg.lambda_grid]
    args = [(state, plan, train, val, cfg, lr, lam, max_val_windows) for lr, lam in grid]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            cells = list(pool.map(run_cell, *zip(*args)))
    else:
        cells = [run_cell(*a) for a in args]
    selected, warning = select_cell(cells, cfg.target_capacity)
    if warning:
        logger.warning('no grid cell reached capacity %.2f +/- %.2f; closest is lr=%g lambda=%g at %.3f',
                       cfg.target_capacity, cfg.capacity_tolerance, selected.learning_rate, selected.lam,
                       selected.capacity)
    return GridResult(cells=cells, selected=selected, warning=warning)
