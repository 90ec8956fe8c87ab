import copy

import pytest

from speechbridge.ablation import GridCell, adaptor_cells, run_ablation_grid, strategy_cells

from conftest import tiny_experiment


def test_strategy_cells_carry_budgets():
    cells = strategy_cells(tiny_experiment())
    assert len(cells) == 7
    best = cells[3]
    assert best.annotations == {"ft_params": "220.6M", "ft_percent": "27.8%"}
    assert best.config.strategy == "best" and best.reference_bleu == 21.5


def test_adaptor_cells_cover_grid():
    base = tiny_experiment()
    cells = adaptor_cells(base)
    assert len(cells) == 8
    assert {c.config.model.adaptor.layer_count for c in cells} == {3, 4}
    assert all(c.config.model.adaptor.in_dim == base.model.adaptor.in_dim for c in cells)
    assert base.model.adaptor.layer_count == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_single_cell_and_failing_cell(tiny_dataset):
    good = GridCell("tiny", tiny_experiment())
    bad_cfg = copy.deepcopy(tiny_experiment())
    bad_cfg.lr_candidates = [float("inf")]
    bad = GridCell("diverges", bad_cfg)
    report = run_ablation_grid([good, bad], ds=tiny_dataset)
    assert report.cells[0].ok and 0.0 <= report.cells[0].bleu <= 100.0
    assert not report.cells[1].ok and "TrainingError" in report.cells[1].error
    lines = report.render().splitlines()
    assert len(lines) == 3 and lines[2].endswith(report.cells[1].error) and "failed" in lines[2]
