"""Experiment configuration: typed run configs, the method/size/budget/seed
grid, config-file layering, and per-cell lockfiles.

Precedence for resolved settings is built-in defaults, then the config file,
then explicit command-line flags; the resolved mapping is echoed into every
run record.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .checkpoints import config_hash
from .errors import ValidationError

METHODS = ("scratch", "imagenet_mae", "moco", "mae", "ta_kd", "ts_kd")
TEACHER_METHODS = ("ts_kd",)


@dataclass(frozen=True)
class ExperimentConfig:
    """One cell of the experiment grid."""

    seed: int
    method: str
    label_budget: int
    transfer_size: int
    lora_rank: int = 4
    epochs: int = 80
    batch_size: int = 8
    base_lr: float = 1e-4
    warmup_iters: int = 10
    weight_decay: float = 1e-4
    distillation_config: str = "TS-KD8"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}, valid: {METHODS}")
        if self.label_budget < 1:
            raise ValidationError(f"label_budget must be >= 1, got {self.label_budget}")
        if self.transfer_size < 0:
            raise ValidationError(f"transfer_size must be >= 0, got {self.transfer_size}")
        if self.base_lr <= 0:
            raise ValidationError(f"base_lr must be > 0, got {self.base_lr}")
        if self.method in TEACHER_METHODS and self.lora_rank < 1:
            raise ValidationError(
                f"method {self.method} needs a fine-tuned teacher: lora_rank must be >= 1"
            )

    def validate_against(self, dataset_size: int) -> None:
        if self.label_budget > dataset_size:
            raise ValidationError(
                f"label_budget {self.label_budget} exceeds dataset size {dataset_size}"
            )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "method": self.method,
            "label_budget": self.label_budget,
            "transfer_size": self.transfer_size,
            "lora_rank": self.lora_rank,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "warmup_iters": self.warmup_iters,
            "weight_decay": self.weight_decay,
            "distillation_config": self.distillation_config,
        }


@dataclass(frozen=True)
class ExperimentMatrix:
    """methods x transfer_sizes x label_budgets x seeds grid."""

    methods: tuple[str, ...]
    transfer_sizes: tuple[int, ...]
    label_budgets: tuple[int, ...]
    seeds: tuple[int, ...]
    output_dir: str
    base: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.methods and self.transfer_sizes and self.label_budgets and self.seeds):
            raise ValidationError("matrix axes must all be nonempty")
        for m in self.methods:
            if m not in METHODS:
                raise ValidationError(f"unknown method {m!r}")

    def cells(self) -> list[ExperimentConfig]:
        out = []
        for method in self.methods:
            for size in self.transfer_sizes:
                for budget in self.label_budgets:
                    for seed in self.seeds:
                        out.append(
                            ExperimentConfig(
                                seed=seed,
                                method=method,
                                label_budget=budget,
                                transfer_size=size,
                                **self.base,
                            )
                        )
        return out

    def grid_hash(self) -> str:
        return config_hash(
            {
                "methods": list(self.methods),
                "transfer_sizes": list(self.transfer_sizes),
                "label_budgets": list(self.label_budgets),
                "seeds": list(self.seeds),
                "base": self.base,
            }
        )

    def cell_dir(self, cfg: ExperimentConfig) -> Path:
        name = f"{cfg.method}_t{cfg.transfer_size}_n{cfg.label_budget}_s{cfg.seed}"
        return Path(self.output_dir) / name


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValidationError(f"config file must hold a mapping, got {type(data).__name__}")
    return data


def resolve(defaults: dict, file_values: dict | None, overrides: dict) -> dict:
    """Layer defaults < config file < CLI flags; None overrides are ignored."""
    out = dict(defaults)
    for k, v in (file_values or {}).items():
        if k in out and isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    for k, v in overrides.items():
        if v is not None:
            out[k] = v
    return out


@contextmanager
def cell_lock(directory: str | Path):
    """Exclusive per-cell lockfile guarding one output directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock_path = directory / ".lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ValidationError(
            f"output directory is locked by another run: {lock_path} "
            "(remove the stale lockfile if no run is active)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock_path.unlink(missing_ok=True)


def write_resolved_config(directory: str | Path, resolved: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n"
    )
