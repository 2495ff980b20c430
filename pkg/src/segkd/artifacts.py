"""Save/load helpers for model artifacts produced by the CLI.

Checkpoints store base parameters under their unadapted names and adapter
tensors under ``lora/<target_name>/{A,B}``, so a plain model plus an
``inject`` call can always reconstruct an adapted one.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .checkpoints import CheckpointBundle, load_checkpoint, save_checkpoint
from .diffusion import DenoiserConfig, DiffusionSchedule, TransformerDenoiser
from .errors import MissingArtifactError, ValidationError
from .lora import LoRAConfig, LoRALinear, has_adapters, inject
from .models import StudentModel, TeacherModel, ViTEncoderConfig

TEACHER_CKPT = "teacher.ckpt"
STUDENT_CKPT = "student.ckpt"
DENOISER_CKPT = "denoiser.ckpt"


def _adapter_key(model: torch.nn.Module, state_key: str) -> str | None:
    """Map a state-dict key of an adapter tensor to its lora/ bundle name."""
    leaf = state_key.rsplit(".", 1)[-1]
    if leaf not in ("A", "B"):
        return None
    owner_path = state_key[: -(len(leaf) + 1)]
    owner = model
    for part in owner_path.split("."):
        owner = getattr(owner, part)
    if isinstance(owner, LoRALinear):
        return f"lora/{owner_path}/{leaf}"
    return None


def model_bundle(model: torch.nn.Module, metadata: dict) -> CheckpointBundle:
    tensors = {}
    for key, tensor in model.state_dict().items():
        lora_key = _adapter_key(model, key)
        name = lora_key if lora_key else key.replace(".base.", ".")
        tensors[name] = tensor.detach().cpu().numpy().copy()
    return CheckpointBundle(tensors, metadata)


def load_model_state(model: torch.nn.Module, bundle: CheckpointBundle) -> None:
    state = {}
    for key in model.state_dict():
        lora_key = _adapter_key(model, key)
        name = lora_key if lora_key else key.replace(".base.", ".")
        if name not in bundle.tensors:
            raise ValidationError(f"checkpoint is missing tensor {name}")
        state[key] = torch.from_numpy(bundle.tensors[name].copy())
    model.load_state_dict(state)


def _encoder_cfg_from(meta: dict) -> ViTEncoderConfig:
    return ViTEncoderConfig(**meta["encoder"])


def save_teacher(teacher: TeacherModel, directory: str | Path, extra_meta: dict | None = None) -> Path:
    directory = Path(directory)
    meta = {
        "model_kind": "teacher",
        "encoder": teacher.cfg.to_dict(),
        "class_count": teacher.class_count,
        "decoder_blocks": len(teacher.decoder.blocks),
        "task_finetuned": bool(teacher.task_finetuned),
        "lora": teacher.lora_config.to_dict() if has_adapters(teacher) else None,
    }
    meta.update(extra_meta or {})
    path = directory / TEACHER_CKPT
    save_checkpoint(model_bundle(teacher, meta), path)
    return path


def load_teacher(directory: str | Path) -> TeacherModel:
    directory = Path(directory)
    path = directory / TEACHER_CKPT
    if not path.exists():
        raise MissingArtifactError(
            f"no teacher checkpoint at {path} (run teacher-finetune or rank-sweep first)"
        )
    bundle = load_checkpoint(path)
    meta = bundle.metadata
    teacher = TeacherModel(
        _encoder_cfg_from(meta), meta["class_count"], meta.get("decoder_blocks", 2)
    )
    if meta.get("lora"):
        lcfg = meta["lora"]
        inject(
            teacher,
            LoRAConfig(lcfg["rank"], tuple(lcfg["targets"]), lcfg["scope"]),
            init_seed=0,
        )
    load_model_state(teacher, bundle)
    teacher.task_finetuned = bool(meta.get("task_finetuned", False))
    teacher.eval()
    return teacher


def save_student(
    student: StudentModel, directory: str | Path, extra_meta: dict | None = None
) -> Path:
    directory = Path(directory)
    meta = {
        "model_kind": "student",
        "encoder": student.cfg.to_dict(),
        "class_count": student.class_count,
        "fpn_dim": student.fpn_dim,
    }
    meta.update(extra_meta or {})
    path = directory / STUDENT_CKPT
    save_checkpoint(model_bundle(student, meta), path)
    return path


def load_student(directory: str | Path) -> tuple[StudentModel, dict]:
    directory = Path(directory)
    path = directory / STUDENT_CKPT
    if not path.exists():
        raise MissingArtifactError(
            f"no student checkpoint at {path} (run pretrain or finetune first)"
        )
    bundle = load_checkpoint(path)
    meta = bundle.metadata
    student = StudentModel(
        _encoder_cfg_from(meta), meta["class_count"], meta.get("fpn_dim", 64)
    )
    load_model_state(student, bundle)
    student.eval()
    return student, meta


def save_denoiser(
    model: TransformerDenoiser,
    sched: DiffusionSchedule,
    directory: str | Path,
    seed: int,
) -> Path:
    directory = Path(directory)
    meta = {
        "model_kind": "denoiser",
        "config": model.cfg.to_dict(),
        "schedule": {
            "steps": sched.steps,
            "beta_start": float(sched.betas[0]),
            "beta_end": float(sched.betas[-1]),
        },
        "seed": seed,
    }
    path = directory / DENOISER_CKPT
    save_checkpoint(CheckpointBundle.from_state_dict(model.state_dict(), meta), path)
    return path


def load_denoiser(directory: str | Path) -> tuple[TransformerDenoiser, DiffusionSchedule]:
    directory = Path(directory)
    path = directory / DENOISER_CKPT
    if not path.exists():
        raise MissingArtifactError(
            f"no denoiser checkpoint at {path} (run diffusion-train first)"
        )
    bundle = load_checkpoint(path)
    meta = bundle.metadata
    model = TransformerDenoiser(DenoiserConfig(**meta["config"]))
    model.load_state_dict(bundle.to_state_dict())
    model.eval()
    s = meta["schedule"]
    sched = DiffusionSchedule.linear(s["steps"], s["beta_start"], s["beta_end"])
    return model, sched
