import pytest

from segkd.configs import (
    ExperimentConfig,
    ExperimentMatrix,
    cell_lock,
    load_config_file,
    resolve,
)
from segkd.errors import ValidationError


def test_experiment_config_validation():
    cfg = ExperimentConfig(seed=0, method="ts_kd", label_budget=16, transfer_size=300)
    cfg.validate_against(80)
    with pytest.raises(ValidationError):
        cfg.validate_against(10)
    with pytest.raises(ValidationError):
        ExperimentConfig(seed=0, method="magic", label_budget=16, transfer_size=300)
    with pytest.raises(ValidationError):
        ExperimentConfig(seed=0, method="ts_kd", label_budget=16, transfer_size=300, lora_rank=0)
    with pytest.raises(ValidationError):
        ExperimentConfig(seed=0, method="scratch", label_budget=0, transfer_size=0)
    with pytest.raises(ValidationError):
        ExperimentConfig(seed=0, method="scratch", label_budget=4, transfer_size=0, base_lr=0)


def test_matrix_cells_and_hash(tmp_path):
    matrix = ExperimentMatrix(
        methods=("scratch", "ts_kd"),
        transfer_sizes=(100, 300),
        label_budgets=(8, 16),
        seeds=(0, 1, 2),
        output_dir=str(tmp_path),
    )
    cells = matrix.cells()
    assert len(cells) == 2 * 2 * 2 * 3
    assert len({matrix.cell_dir(c) for c in cells}) == len(cells)
    same = ExperimentMatrix(
        methods=("scratch", "ts_kd"),
        transfer_sizes=(100, 300),
        label_budgets=(8, 16),
        seeds=(0, 1, 2),
        output_dir=str(tmp_path / "elsewhere"),
    )
    assert matrix.grid_hash() == same.grid_hash()  # output dir not part of the grid
    different = ExperimentMatrix(
        methods=("scratch",),
        transfer_sizes=(100,),
        label_budgets=(8,),
        seeds=(0,),
        output_dir=str(tmp_path),
    )
    assert matrix.grid_hash() != different.grid_hash()


def test_matrix_rejects_empty_axis(tmp_path):
    with pytest.raises(ValidationError):
        ExperimentMatrix((), (100,), (8,), (0,), str(tmp_path))


def test_resolve_precedence():
    defaults = {"lr": 1.0, "epochs": 10, "nested": {"a": 1, "b": 2}}
    file_vals = {"lr": 0.5, "nested": {"b": 3}}
    overrides = {"epochs": 99, "lr": None}
    out = resolve(defaults, file_vals, overrides)
    assert out["lr"] == 0.5  # file beats defaults; None override ignored
    assert out["epochs"] == 99  # flag beats everything
    assert out["nested"] == {"a": 1, "b": 3}


def test_load_config_file(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("finetune:\n  epochs: 3\n  base_lr: 0.01\n")
    cfg = load_config_file(path)
    assert cfg["finetune"]["epochs"] == 3
    with pytest.raises(ValidationError):
        load_config_file(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    with pytest.raises(ValidationError):
        load_config_file(bad)


def test_cell_lock_excludes_concurrent(tmp_path):
    target = tmp_path / "cell"
    with cell_lock(target):
        assert (target / ".lock").exists()
        with pytest.raises(ValidationError, match="locked"):
            with cell_lock(target):
                pass
    assert not (target / ".lock").exists()
    with cell_lock(target):  # reusable after release
        pass
