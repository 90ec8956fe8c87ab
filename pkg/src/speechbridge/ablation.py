"""Ablation grids over finetuning strategies and adaptor shapes."""
from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .adaptor import adaptor_ablation_grid
from .config import ExperimentConfig
from .data import Dataset
from .evaluation import evaluate
from .finetune import STRATEGIES, ReferenceArchSpec, count_budget
from .training import load_data, train

log = logging.getLogger(__name__)

GRIDS = ("strategies", "adaptor")


@dataclass
class GridCell:
    label: str
    config: ExperimentConfig
    reference_bleu: float | None = None
    annotations: dict[str, str] = field(default_factory=dict)
    bleu: float = math.nan
    token_acc: float = math.nan
    valid_loss: float = math.nan
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class GridReport:
    grid: str
    cells: list[GridCell]

    def render(self) -> str:
        extra = list(dict.fromkeys(k for c in self.cells for k in c.annotations))
        header = ["config", *extra, "ref_bleu", "bleu", "token_acc", "valid_loss", "status"]
        lines = ["\t".join(header)]
        for c in self.cells:
            ref = "-" if c.reference_bleu is None else f"{c.reference_bleu:.2f}"
            status = "ok" if c.ok else f"failed: {c.error}"
            lines.append("\t".join([c.label, *(c.annotations.get(k, "-") for k in extra), ref,
                                    f"{c.bleu:.2f}", f"{c.token_acc:.4f}", f"{c.valid_loss:.4f}", status]))
        return "\n".join(lines)


def strategy_cells(base: ExperimentConfig, arch: ReferenceArchSpec | None = None) -> list[GridCell]:
    arch = arch or ReferenceArchSpec()
    cells = []
    for key, s in STRATEGIES.items():
        n, frac = count_budget(arch, s)
        label = f"enc={s.describe('encoder')} dec={s.describe('decoder')}"
        cells.append(GridCell(label, base.replace(strategy=key), s.reference_bleu,
                              {"ft_params": f"{n / 1e6:.1f}M", "ft_percent": f"{100 * frac:.1f}%"}))
    return cells


def adaptor_cells(base: ExperimentConfig) -> list[GridCell]:
    cells = []
    for row in adaptor_ablation_grid():
        cfg = copy.deepcopy(base)
        a = cfg.model.adaptor
        cfg.model.adaptor = row.config(in_dim=a.in_dim, out_dim=a.out_dim, kernel=a.kernel)
        cells.append(GridCell(row.label, cfg, row.reference_bleu))
    return cells


def run_cell(cell: GridCell, ds: Dataset | None = None, split: str = "test") -> GridCell:
    """Train and evaluate one cell; any exception is recorded on the cell."""
    try:
        ds = ds if ds is not None else load_data(cell.config)
        result = train(cell.config, ds)
        rep = evaluate(result.model, ds, split, cell.config.beam, cell.config.max_decode_len,
                       result.checkpoint.config["pairs"], cell.config.label_smoothing)
        cell.bleu, cell.token_acc, cell.valid_loss = rep.bleu, rep.token_acc, rep.valid_loss
    except Exception as e:  # noqa: BLE001 - a failed cell must not stop the grid
        cell.error = f"{type(e).__name__}: {e}"
        log.warning("cell %s failed: %s", cell.label, cell.error)
    return cell


def run_ablation_grid(grid: str | Sequence[GridCell], base: ExperimentConfig | None = None,
                      ds: Dataset | None = None, split: str = "test", workers: int = 1) -> GridReport:
    """Train every cell with the base seeds and report desk-scale metrics beside reference annotations."""
    base = base or ExperimentConfig()
    if isinstance(grid, str):
        if grid not in GRIDS:
            raise ValueError(f"unknown grid {grid!r}; choose from {GRIDS}")
        cells = strategy_cells(base) if grid == "strategies" else adaptor_cells(base)
        name = grid
    else:
        cells, name = list(grid), "custom"
    if not cells:
        raise ValueError("grid has no cells")
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            cells = list(pool.map(run_cell, cells, [ds] * len(cells), [split] * len(cells)))
    else:
        ds = ds if ds is not None else load_data(base)
        cells = [run_cell(c, ds, split) for c in cells]
    return GridReport(name, cells)

