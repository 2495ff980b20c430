"""Optimization schedules and the experiment pipelines.

Pipelines: teacher LoRA fine-tuning, task-agnostic and task-specific
distillation pretraining, MoCo and MAE self-supervised pretraining, and
supervised student fine-tuning, plus the LoRA rank sweep. Every pipeline is a
deterministic function of (config, seed, data): model init, data order, and
augmentation each draw from named streams derived from the run seed.

Task-specific and task-agnostic distillation share one training loop; they
differ only in the teacher's fine-tuned flag, the loss weights, and whether
the student head trains. The teacher is frozen during distillation, so its
hidden states and logits are cached once per transfer set.
"""

from __future__ import annotations

import copy
import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoints import CheckpointBundle, config_hash, save_checkpoint
from .data import LabeledDataset, TransferSet
from .errors import NumericalAbortError, ValidationError
from .lora import LoRAConfig, LoRALinear, inject
from .losses import (
    ContrastiveBatch,
    HiddenProjection,
    KDLossTerms,
    SupervisedLossWeights,
    ce_dice_loss,
    decoder_kd_loss,
    encoder_kd_loss,
    mae_loss,
    moco_loss,
    momentum_update,
)
from .metrics import MetricsReport, compute_report
from .models import StudentModel, TeacherModel, ViTEncoderConfig
from .seeding import derive_seed, np_rng, seed_everything, torch_generator

OPTIMIZERS = ("adam", "adamw")
DECAYS = ("cosine", "none")
GRAD_CLIP_NORM = 1.0

# Reference schedules at paper scale; the desk profile divides epoch counts by 20.
PAPER_EPOCHS = {"pretrain": 1600, "finetune": 160, "teacher": 160}
DESK_DIVISOR = 20


@dataclass(frozen=True)
class Schedule:
    optimizer: str = "adamw"
    base_lr: float = 1e-4
    weight_decay: float = 0.0
    warmup_iters: int = 0
    total_epochs: int = 1
    batch_size: int = 8
    decay: str = "cosine"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"unknown optimizer {self.optimizer!r}, valid: {OPTIMIZERS}")
        if self.decay not in DECAYS:
            raise ValidationError(f"unknown decay {self.decay!r}, valid: {DECAYS}")
        if self.base_lr <= 0:
            raise ValidationError(f"base_lr must be > 0, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.warmup_iters < 0:
            raise ValidationError(f"warmup_iters must be >= 0, got {self.warmup_iters}")
        if self.total_epochs < 0:
            raise ValidationError(f"total_epochs must be >= 0, got {self.total_epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return {
            "optimizer": self.optimizer,
            "base_lr": self.base_lr,
            "weight_decay": self.weight_decay,
            "warmup_iters": self.warmup_iters,
            "total_epochs": self.total_epochs,
            "batch_size": self.batch_size,
            "decay": self.decay,
        }


def lr_at(step: int, total_steps: int, sched: Schedule) -> float:
    """Linear ramp over the warmup, then cosine from base to 0 (or constant)."""
    if sched.warmup_iters > 0 and step < sched.warmup_iters:
        return sched.base_lr * (step + 1) / sched.warmup_iters
    if sched.decay == "none":
        return sched.base_lr
    remaining = max(total_steps - sched.warmup_iters, 1)
    progress = min((step - sched.warmup_iters) / remaining, 1.0)
    return 0.5 * sched.base_lr * (1.0 + math.cos(math.pi * progress))


def make_optimizer(params, sched: Schedule) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ValidationError("no trainable parameters")
    if sched.optimizer == "adam":
        return torch.optim.Adam(params, lr=sched.base_lr, weight_decay=sched.weight_decay)
    return torch.optim.AdamW(params, lr=sched.base_lr, weight_decay=sched.weight_decay)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np_rng(seed, "order", epoch).permutation(n)


def _steps_per_epoch(n: int, batch: int) -> int:
    return math.ceil(n / batch)


def _check_finite(loss: torch.Tensor, what: str, step: int, last_good: str | None = None):
    if not torch.isfinite(loss):
        raise NumericalAbortError(
            f"{what}: non-finite loss at step {step}", last_good_checkpoint=last_good
        )


def _augment_supervised(
    images: torch.Tensor, masks: torch.Tensor, gen: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    """Label-preserving per-sample augmentation: rot90, flip, circular roll."""
    images = images.clone()
    masks = masks.clone()
    b = images.shape[0]
    draws = torch.stack(
        [
            torch.randint(0, 4, (b,), generator=gen),
            torch.randint(0, 2, (b,), generator=gen),
            torch.randint(-8, 9, (b,), generator=gen),
            torch.randint(-8, 9, (b,), generator=gen),
        ]
    )
    for i in range(b):
        k, flip, dy, dx = (int(v) for v in draws[:, i])
        img, msk = images[i], masks[i]
        if k:
            img = torch.rot90(img, k, dims=(-2, -1))
            msk = torch.rot90(msk, k, dims=(-2, -1))
        if flip:
            img = img.flip(-1)
            msk = msk.flip(-1)
        img = torch.roll(img, shifts=(dy, dx), dims=(-2, -1))
        msk = torch.roll(msk, shifts=(dy, dx), dims=(-2, -1))
        images[i] = img
        masks[i] = msk
    return images, masks


# ------------------------------------------------------------------ records


@dataclass
class RunRecord:
    """Reproducible description plus loss curve of one pipeline run.

    Wall-clock time is kept out of record.json so reruns with the same
    config and seed produce byte-identical records.
    """

    kind: str
    seed: int
    config: dict
    loss_curve: list[dict] = field(default_factory=list)
    wall_clock_s: float = 0.0
    checkpoint: str | None = None
    metrics_csv: str | None = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def final_losses(self) -> dict:
        return dict(self.loss_curve[-1]) if self.loss_curve else {}

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "config": self.config,
            "config_hash": self.config_hash,
            "final_losses": self.final_losses(),
            "steps": len(self.loss_curve),
            "checkpoint": self.checkpoint,
            "metrics_csv": self.metrics_csv,
        }

    def save(self, run_dir: str | Path) -> Path:
        import json

        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "record.json").write_text(
            json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"
        )
        write_loss_csv(run_dir / "losses.csv", self.loss_curve)
        (run_dir / "timing.json").write_text(
            json.dumps({"wall_clock_s": self.wall_clock_s}) + "\n"
        )
        return run_dir


def write_loss_csv(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            fh.write("step\n")
            return
        writer = csv.writer(fh)
        cols = list(rows[0].keys())
        writer.writerow(cols)
        for row in rows:
            writer.writerow([_fmt_cell(row[c]) for c in cols])


def _fmt_cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


# ------------------------------------------------------------------ distillation configs


@dataclass(frozen=True)
class DistillationConfig:
    """Loss wiring for one distillation variant."""

    name: str
    decoder_loss_kind: str  # mse | cross_entropy | none
    mask_mode: str  # interpolated | uninterpolated | drop_last_channel
    use_hidden: bool
    w_decoder: float
    w_hidden: float

    def __post_init__(self):
        if self.decoder_loss_kind not in ("mse", "cross_entropy", "none"):
            raise ValidationError(f"bad decoder_loss_kind {self.decoder_loss_kind!r}")
        if self.mask_mode not in ("interpolated", "uninterpolated", "drop_last_channel"):
            raise ValidationError(f"bad mask_mode {self.mask_mode!r}")
        if self.decoder_loss_kind == "none" and self.w_decoder != 0.0:
            raise ValidationError("decoder_loss_kind none requires w_decoder == 0")
        if not self.use_hidden and self.w_hidden != 0.0:
            raise ValidationError("use_hidden False requires w_hidden == 0")
        if self.name == "TA-KD" and not (
            self.decoder_loss_kind == "none" and self.use_hidden and self.w_hidden == 1.0
        ):
            raise ValidationError("TA-KD must be hidden-only with w_hidden 1")
        if self.name == "TS-KD6" and self.use_hidden:
            raise ValidationError("TS-KD6 must not use hidden-state distillation")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "decoder_loss_kind": self.decoder_loss_kind,
            "mask_mode": self.mask_mode,
            "use_hidden": self.use_hidden,
            "w_decoder": self.w_decoder,
            "w_hidden": self.w_hidden,
        }


DISTILLATION_PRESETS: dict[str, DistillationConfig] = {
    cfg.name: cfg
    for cfg in [
        DistillationConfig("TS-KD1", "mse", "drop_last_channel", True, 0.2, 1.0),
        DistillationConfig("TS-KD2", "mse", "interpolated", True, 0.1, 1.0),
        DistillationConfig("TS-KD3", "mse", "uninterpolated", True, 0.001, 1.0),
        DistillationConfig("TS-KD4", "cross_entropy", "interpolated", True, 1.0, 1.0),
        DistillationConfig("TS-KD5", "cross_entropy", "interpolated", True, 1.0, 0.1),
        DistillationConfig("TS-KD6", "mse", "interpolated", False, 0.1, 0.0),
        DistillationConfig("TS-KD7", "mse", "interpolated", True, 0.1, 0.1),
        DistillationConfig("TS-KD8", "mse", "interpolated", True, 0.2, 0.1),
        DistillationConfig("TA-KD", "none", "interpolated", True, 0.0, 1.0),
    ]
}


# ------------------------------------------------------------------ builders


def build_student(cfg: ViTEncoderConfig, class_count: int, seed: int, fpn_dim: int = 64) -> StudentModel:
    seed_everything(seed, "student_init")
    return StudentModel(cfg, class_count, fpn_dim)


def build_teacher(
    cfg: ViTEncoderConfig, class_count: int, seed: int, decoder_blocks: int = 2
) -> TeacherModel:
    seed_everything(seed, "teacher_init")
    return TeacherModel(cfg, class_count, decoder_blocks)


def _dataset_tensors(ds: LabeledDataset) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(ds.images_array()).permute(0, 3, 1, 2).float()
    masks = torch.from_numpy(ds.masks_array()).long()
    return images, masks


def _transfer_tensor(transfer: TransferSet) -> torch.Tensor:
    if transfer.size == 0:
        raise ValidationError("transfer set is empty")
    return torch.from_numpy(transfer.images_array()).permute(0, 3, 1, 2).float()


# ------------------------------------------------------------------ teacher fine-tuning


def finetune_teacher_lora(
    teacher: TeacherModel,
    labeled: LabeledDataset,
    lora_cfg: LoRAConfig,
    sched: Schedule,
    seed: int,
    run_dir: str | Path | None = None,
    loss_weights: SupervisedLossWeights = SupervisedLossWeights(),
    augment: bool = True,
) -> tuple[TeacherModel, RunRecord]:
    """Adapt the teacher to the task: adapters train everywhere in scope, and
    with decoder scope the decoder's own (non-adapted) parameters train too.
    Supervision is CE+Dice on teacher logits upsampled to input resolution."""
    start = time.perf_counter()
    inject(teacher, lora_cfg, init_seed=derive_seed(seed, "lora_init"))
    if lora_cfg.scope == "encoder_and_decoder":
        for module in teacher.decoder.modules():
            if isinstance(module, LoRALinear):
                continue
            for p in module.parameters(recurse=False):
                p.requires_grad_(True)

    images, masks = _dataset_tensors(labeled)
    n = images.shape[0]
    opt = make_optimizer(teacher.parameters(), sched)
    steps_total = sched.total_epochs * _steps_per_epoch(n, sched.batch_size)
    aug_gen = torch_generator(seed, "teacher_aug")
    curve: list[dict] = []
    last_good: str | None = None
    step = 0
    teacher.train()
    for epoch in range(sched.total_epochs):
        order = _epoch_order(n, seed, epoch)
        for lo in range(0, n, sched.batch_size):
            idx = order[lo : lo + sched.batch_size]
            batch = images[idx]
            target = masks[idx]
            if augment:
                batch, target = _augment_supervised(batch, target, aug_gen)
            lr = lr_at(step, steps_total, sched)
            _set_lr(opt, lr)
            _, seg = teacher(batch)
            full = F.interpolate(
                seg.logits, size=batch.shape[-2:], mode="bilinear", align_corners=False
            )
            loss = ce_dice_loss(full, target, loss_weights)
            _check_finite(loss, "teacher fine-tune", step, last_good)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(
                [p for p in teacher.parameters() if p.requires_grad], GRAD_CLIP_NORM
            )
            opt.step()
            curve.append({"step": step, "lr": lr, "loss": loss.item()})
            step += 1
        if run_dir is not None:
            save_checkpoint(
                CheckpointBundle.from_state_dict(
                    teacher.state_dict(), {"model_kind": "teacher", "step": step}
                ),
                Path(run_dir) / "last_good.ckpt",
            )
            last_good = str(Path(run_dir) / "last_good.ckpt")
    teacher.eval()
    teacher.task_finetuned = True
    record = RunRecord(
        kind="teacher_lora_finetune",
        seed=seed,
        config={
            "schedule": sched.to_dict(),
            "lora": lora_cfg.to_dict(),
            "labels": len(labeled),
            "encoder": teacher.cfg.to_dict(),
            "class_count": teacher.class_count,
            "loss_weights": {"ce": loss_weights.ce, "dice": loss_weights.dice},
        },
        loss_curve=curve,
        wall_clock_s=time.perf_counter() - start,
    )
    return teacher, record


# ------------------------------------------------------------------ KD pretraining


@torch.no_grad()
def _cache_teacher_outputs(
    teacher: TeacherModel, images: torch.Tensor, batch_size: int
) -> tuple[torch.Tensor, torch.Tensor]:
    teacher.eval()
    hiddens = []
    logits = []
    for lo in range(0, images.shape[0], batch_size):
        enc, seg = teacher(images[lo : lo + batch_size])
        hiddens.append(enc.tokens)
        logits.append(seg.logits)
    return torch.cat(hiddens), torch.cat(logits)


def _kd_pretrain(
    student: StudentModel,
    teacher: TeacherModel,
    transfer: TransferSet,
    dcfg: DistillationConfig,
    sched: Schedule,
    seed: int,
    train_head: bool,
    kind: str,
) -> tuple[StudentModel, RunRecord]:
    start = time.perf_counter()
    if student.cfg.image_size != teacher.cfg.image_size:
        raise ValidationError("student and teacher image sizes differ")
    if student.cfg.patch_size != teacher.cfg.patch_size:
        raise ValidationError(
            "token grids differ: student and teacher must share a patch size"
        )
    if dcfg.mask_mode == "drop_last_channel" and dcfg.decoder_loss_kind != "none":
        if teacher.class_count != student.class_count + 1:
            raise ValidationError(
                f"{dcfg.name} drops the teacher's last logit channel and needs a "
                f"teacher with {student.class_count + 1} channels, got "
                f"{teacher.class_count} (fine-tune with --extra-decoder-channel)"
            )
    elif dcfg.decoder_loss_kind != "none" and teacher.class_count != student.class_count:
        raise ValidationError(
            f"class counts differ: student {student.class_count} vs teacher {teacher.class_count}"
        )

    images = _transfer_tensor(transfer)
    teacher_hidden, teacher_logits = _cache_teacher_outputs(teacher, images, sched.batch_size)

    projection = None
    d_s, d_t = student.cfg.embed_dim, teacher.cfg.embed_dim
    if d_s != d_t:
        seed_everything(seed, "projection_init")
        projection = HiddenProjection(d_s, d_t)

    params = list(student.encoder.parameters())
    if train_head:
        params += list(student.head.parameters())
    if projection is not None:
        params += list(projection.parameters())
    opt = make_optimizer(params, sched)

    n = images.shape[0]
    steps_total = sched.total_epochs * _steps_per_epoch(n, sched.batch_size)
    curve: list[dict] = []
    step = 0
    student.train()
    head_state_before = (
        None
        if train_head
        else {k: v.detach().clone() for k, v in student.head.state_dict().items()}
    )
    for epoch in range(sched.total_epochs):
        order = _epoch_order(n, seed, epoch)
        for lo in range(0, n, sched.batch_size):
            idx = order[lo : lo + sched.batch_size]
            batch = images[idx]
            t_hidden = teacher_hidden[idx]
            lr = lr_at(step, steps_total, sched)
            _set_lr(opt, lr)
            enc, seg = student(batch)
            if dcfg.use_hidden:
                enc_loss = encoder_kd_loss(enc.tokens, t_hidden, projection)
            else:
                enc_loss = torch.zeros((), dtype=seg.logits.dtype)
            if dcfg.decoder_loss_kind != "none":
                dec_loss = decoder_kd_loss(
                    seg.logits,
                    teacher_logits[idx],
                    kind=dcfg.decoder_loss_kind,
                    mask_mode=dcfg.mask_mode,
                )
            else:
                dec_loss = torch.zeros((), dtype=seg.logits.dtype)
            terms = KDLossTerms(
                enc_loss, dec_loss, dcfg.w_hidden, dcfg.w_decoder, dcfg.decoder_loss_kind
            )
            loss = terms.weighted_total
            _check_finite(loss, kind, step)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(
                [p for p in params if p.requires_grad], GRAD_CLIP_NORM
            )
            opt.step()
            curve.append(
                {
                    "step": step,
                    "lr": lr,
                    "encoder_loss": float(enc_loss.item()),
                    "decoder_loss": float(dec_loss.item()),
                    "total": float(loss.item()),
                }
            )
            step += 1
    student.eval()
    if head_state_before is not None:
        after = student.head.state_dict()
        for k, v in head_state_before.items():
            assert torch.equal(after[k], v), f"student head changed during {kind}: {k}"
    record = RunRecord(
        kind=kind,
        seed=seed,
        config={
            "schedule": sched.to_dict(),
            "distillation": dcfg.to_dict(),
            "transfer_size": transfer.size,
            "transfer_provenance": transfer.provenance,
            "student": student.cfg.to_dict(),
            "teacher": teacher.cfg.to_dict(),
            "class_count": student.class_count,
        },
        loss_curve=curve,
        wall_clock_s=time.perf_counter() - start,
    )
    return student, record


def pretrain_ta_kd(
    student: StudentModel,
    teacher_base: TeacherModel,
    transfer: TransferSet,
    sched: Schedule,
    seed: int,
) -> tuple[StudentModel, RunRecord]:
    """Hidden-state-only distillation from the unadapted base teacher.

    The student head does not train and is audited to stay bit-identical.
    """
    if teacher_base.task_finetuned:
        raise ValidationError(
            "task-agnostic distillation requires the unadapted base teacher"
        )
    return _kd_pretrain(
        student,
        teacher_base,
        transfer,
        DISTILLATION_PRESETS["TA-KD"],
        sched,
        seed,
        train_head=False,
        kind="ta_kd_pretrain",
    )


def pretrain_ts_kd(
    student: StudentModel,
    teacher_adapted: TeacherModel,
    transfer: TransferSet,
    dcfg: DistillationConfig,
    sched: Schedule,
    seed: int,
) -> tuple[StudentModel, RunRecord]:
    """Dual-level distillation from a task-fine-tuned teacher."""
    if not teacher_adapted.task_finetuned:
        raise ValidationError(
            "task-specific distillation requires a LoRA-fine-tuned teacher "
            "(run teacher-finetune first)"
        )
    if dcfg.name == "TA-KD":
        raise ValidationError("TA-KD preset belongs to pretrain_ta_kd")
    return _kd_pretrain(
        student,
        teacher_adapted,
        transfer,
        dcfg,
        sched,
        seed,
        train_head=True,
        kind="ts_kd_pretrain",
    )


# ------------------------------------------------------------------ MoCo


class _ProjectionHead(torch.nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.net = torch.nn.Sequential(
            torch.nn.Linear(dim, dim), torch.nn.GELU(), torch.nn.Linear(dim, out_dim)
        )

    def forward(self, x):
        return self.net(x)


def _two_views(batch: torch.Tensor, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Crop-free stochastic views: flip, small roll, intensity jitter, noise."""

    def one(x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        flip = torch.rand(b, generator=gen) < 0.5
        x = torch.where(flip[:, None, None, None], x.flip(-1), x)
        shifts = torch.randint(-2, 3, (2,), generator=gen)
        x = torch.roll(x, shifts=(int(shifts[0]), int(shifts[1])), dims=(-2, -1))
        scale = 1.0 + 0.2 * (torch.rand(b, 1, 1, 1, generator=gen) - 0.5)
        offset = 0.2 * (torch.rand(b, 1, 1, 1, generator=gen) - 0.5)
        noise = 0.02 * torch.randn(x.shape, generator=gen)
        return (x * scale + offset + noise).clamp(0.0, 1.0)

    return one(batch), one(batch)


def _pooled_embedding(encoder, images: torch.Tensor) -> torch.Tensor:
    tokens = encoder(images).tokens
    return tokens.mean(dim=(1, 2))


def pretrain_moco(
    student: StudentModel,
    transfer: TransferSet,
    sched: Schedule,
    seed: int,
    temperature: float = 0.2,
    momentum_m: float = 0.99,
    queue_size: int = 256,
    proj_dim: int = 64,
) -> tuple[StudentModel, RunRecord]:
    """Contrastive pretraining of the student encoder against a momentum key
    encoder and a negatives queue; projection/prediction heads are discarded."""
    start = time.perf_counter()
    if queue_size < sched.batch_size:
        raise ValidationError(
            f"queue_size {queue_size} smaller than batch_size {sched.batch_size}"
        )
    if not 0.0 <= momentum_m <= 1.0:
        raise ValidationError(f"momentum must be in [0, 1], got {momentum_m}")
    images = _transfer_tensor(transfer)
    dim = student.cfg.embed_dim
    seed_everything(seed, "moco_heads")
    proj_q = _ProjectionHead(dim, proj_dim)
    pred_q = _ProjectionHead(proj_dim, proj_dim)
    encoder_k = copy.deepcopy(student.encoder)
    proj_k = copy.deepcopy(proj_q)
    for p in list(encoder_k.parameters()) + list(proj_k.parameters()):
        p.requires_grad_(False)

    queue_gen = torch_generator(seed, "moco_queue")
    queue = F.normalize(torch.randn(queue_size, proj_dim, generator=queue_gen), dim=1)
    ptr = 0

    params = (
        list(student.encoder.parameters())
        + list(proj_q.parameters())
        + list(pred_q.parameters())
    )
    opt = make_optimizer(params, sched)
    n = images.shape[0]
    steps_total = sched.total_epochs * _steps_per_epoch(n, sched.batch_size)
    aug_gen = torch_generator(seed, "moco_aug")
    curve: list[dict] = []
    step = 0
    student.train()
    for epoch in range(sched.total_epochs):
        order = _epoch_order(n, seed, epoch)
        for lo in range(0, n, sched.batch_size):
            idx = order[lo : lo + sched.batch_size]
            batch = images[idx]
            view_q, view_k = _two_views(batch, aug_gen)
            lr = lr_at(step, steps_total, sched)
            _set_lr(opt, lr)
            q = F.normalize(pred_q(proj_q(_pooled_embedding(student.encoder, view_q))), dim=1)
            with torch.no_grad():
                k = F.normalize(proj_k(_pooled_embedding(encoder_k, view_k)), dim=1)
            loss = moco_loss(
                ContrastiveBatch(q, k, queue.clone().detach(), temperature)
            )
            _check_finite(loss, "moco", step)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, GRAD_CLIP_NORM)
            opt.step()
            momentum_update(
                dict(encoder_k.named_parameters()),
                dict(student.encoder.named_parameters()),
                momentum_m,
            )
            momentum_update(
                dict(proj_k.named_parameters()), dict(proj_q.named_parameters()), momentum_m
            )
            bsz = k.shape[0]
            with torch.no_grad():
                take = min(bsz, queue_size - ptr)
                queue[ptr : ptr + take] = k[:take]
                if take < bsz:
                    queue[: bsz - take] = k[take:]
                ptr = (ptr + bsz) % queue_size
            curve.append({"step": step, "lr": lr, "loss": loss.item()})
            step += 1
    student.eval()
    record = RunRecord(
        kind="moco_pretrain",
        seed=seed,
        config={
            "schedule": sched.to_dict(),
            "temperature": temperature,
            "momentum": momentum_m,
            "queue_size": queue_size,
            "proj_dim": proj_dim,
            "transfer_size": transfer.size,
            "student": student.cfg.to_dict(),
        },
        loss_curve=curve,
        wall_clock_s=time.perf_counter() - start,
    )
    return student, record


# ------------------------------------------------------------------ MAE


class _MAEDecoder(torch.nn.Module):
    """One attention block plus a linear head mapping tokens back to pixels."""

    def __init__(self, cfg: ViTEncoderConfig):
        super().__init__()
        from .models import Block

        self.block = Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio)
        self.norm = torch.nn.LayerNorm(cfg.embed_dim)
        self.head = torch.nn.Linear(
            cfg.embed_dim, cfg.patch_size * cfg.patch_size * cfg.in_channels
        )

    def forward(self, tokens: torch.Tensor, cfg: ViTEncoderConfig) -> torch.Tensor:
        x = self.head(self.norm(self.block(tokens)))
        b = x.shape[0]
        g = cfg.grid_size
        p = cfg.patch_size
        c = cfg.in_channels
        x = x.reshape(b, g, g, p, p, c).permute(0, 5, 1, 3, 2, 4)
        return x.reshape(b, c, g * p, g * p)


def pretrain_mae(
    student: StudentModel,
    transfer: TransferSet,
    sched: Schedule,
    seed: int,
    mask_ratio: float = 0.75,
    loss_scope: str = "masked_only",
) -> tuple[StudentModel, RunRecord]:
    """Masked-reconstruction pretraining of the student encoder; the mask
    token and reconstruction decoder are discarded afterwards."""
    start = time.perf_counter()
    if not 0.0 < mask_ratio < 1.0:
        raise ValidationError(f"mask_ratio must be in (0, 1), got {mask_ratio}")
    cfg = student.cfg
    n_tokens = cfg.num_tokens
    n_masked = int(round(mask_ratio * n_tokens))
    if n_masked < 1:
        raise ValidationError(
            f"mask_ratio {mask_ratio} hides no patches on a {n_tokens}-token grid"
        )
    images = _transfer_tensor(transfer)
    seed_everything(seed, "mae_extras")
    mask_token = torch.nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
    torch.nn.init.trunc_normal_(mask_token, std=0.02)
    decoder = _MAEDecoder(cfg)
    params = list(student.encoder.parameters()) + [mask_token] + list(decoder.parameters())
    opt = make_optimizer(params, sched)
    mask_gen = torch_generator(seed, "mae_mask")
    n = images.shape[0]
    steps_total = sched.total_epochs * _steps_per_epoch(n, sched.batch_size)
    curve: list[dict] = []
    step = 0
    student.train()
    for epoch in range(sched.total_epochs):
        order = _epoch_order(n, seed, epoch)
        for lo in range(0, n, sched.batch_size):
            idx = order[lo : lo + sched.batch_size]
            batch = images[idx]
            b = batch.shape[0]
            lr = lr_at(step, steps_total, sched)
            _set_lr(opt, lr)
            mask = torch.zeros(b, n_tokens, dtype=torch.bool)
            for bi in range(b):
                perm = torch.randperm(n_tokens, generator=mask_gen)
                mask[bi, perm[:n_masked]] = True
            tokens = student.encoder.embed_tokens(batch)
            tokens = torch.where(mask[:, :, None], mask_token.to(tokens.dtype), tokens)
            encoded = student.encoder.forward_tokens(tokens)
            recon = decoder(encoded, cfg)
            loss = mae_loss(batch, recon, mask, cfg.patch_size, scope=loss_scope)
            _check_finite(loss, "mae", step)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, GRAD_CLIP_NORM)
            opt.step()
            curve.append({"step": step, "lr": lr, "loss": loss.item()})
            step += 1
    student.eval()
    record = RunRecord(
        kind="mae_pretrain",
        seed=seed,
        config={
            "schedule": sched.to_dict(),
            "mask_ratio": mask_ratio,
            "loss_scope": loss_scope,
            "transfer_size": transfer.size,
            "student": student.cfg.to_dict(),
        },
        loss_curve=curve,
        wall_clock_s=time.perf_counter() - start,
    )
    return student, record


# ------------------------------------------------------------------ fine-tuning & eval


def finetune_student(
    student: StudentModel,
    labeled: LabeledDataset,
    sched: Schedule,
    seed: int = 1234,
    loss_weights: SupervisedLossWeights = SupervisedLossWeights(),
    augment: bool = False,
) -> tuple[StudentModel, RunRecord]:
    start = time.perf_counter()
    images, masks = _dataset_tensors(labeled)
    n = images.shape[0]
    opt = make_optimizer(student.parameters(), sched)
    steps_total = sched.total_epochs * _steps_per_epoch(n, sched.batch_size)
    aug_gen = torch_generator(seed, "student_aug")
    curve: list[dict] = []
    step = 0
    student.train()
    for epoch in range(sched.total_epochs):
        order = _epoch_order(n, seed, epoch)
        for lo in range(0, n, sched.batch_size):
            idx = order[lo : lo + sched.batch_size]
            batch, target = images[idx], masks[idx]
            if augment:
                batch, target = _augment_supervised(batch, target, aug_gen)
            lr = lr_at(step, steps_total, sched)
            _set_lr(opt, lr)
            _, seg = student(batch)
            loss = ce_dice_loss(seg.logits, target, loss_weights)
            _check_finite(loss, "student fine-tune", step)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(
                [p for p in student.parameters() if p.requires_grad], GRAD_CLIP_NORM
            )
            opt.step()
            curve.append({"step": step, "lr": lr, "loss": loss.item()})
            step += 1
    student.eval()
    record = RunRecord(
        kind="student_finetune",
        seed=seed,
        config={
            "schedule": sched.to_dict(),
            "labels": len(labeled),
            "student": student.cfg.to_dict(),
            "class_count": student.class_count,
            "loss_weights": {"ce": loss_weights.ce, "dice": loss_weights.dice},
        },
        loss_curve=curve,
        wall_clock_s=time.perf_counter() - start,
    )
    return student, record


@torch.no_grad()
def predict_masks(model, ds: LabeledDataset, batch_size: int = 16) -> list[np.ndarray]:
    """Argmax class maps at input resolution for every sample."""
    images, _ = _dataset_tensors(ds)
    model.eval()
    preds = []
    for lo in range(0, images.shape[0], batch_size):
        _, seg = model(images[lo : lo + batch_size])
        logits = seg.logits
        if logits.shape[-2:] != images.shape[-2:]:
            logits = F.interpolate(
                logits, size=images.shape[-2:], mode="bilinear", align_corners=False
            )
        preds.extend(logits.argmax(dim=1).cpu().numpy())
    return preds


def evaluate_model(
    model, ds: LabeledDataset, pixel_spacing: tuple[float, float] = (1.0, 1.0)
) -> MetricsReport:
    preds = predict_masks(model, ds)
    refs = [s.mask for s in ds.samples]
    return compute_report(preds, refs, ds.class_count, ds.class_names, pixel_spacing)


# ------------------------------------------------------------------ rank sweep


@dataclass
class RankSweepRow:
    rank: int
    mean_dice: float
    mean_hd95: float
    trainable_params: int


@dataclass
class RankSweepResult:
    rows: list[RankSweepRow]
    selected_rank: int
    best_teacher: TeacherModel
    records: list[RunRecord]


def lora_rank_sweep(
    teacher_cfg: ViTEncoderConfig,
    class_count: int,
    labeled: LabeledDataset,
    eval_ds: LabeledDataset,
    ranks: list[int],
    sched: Schedule,
    seed: int,
    lora_targets: tuple[str, ...] = ("query", "value"),
    scope: str = "encoder_and_decoder",
) -> RankSweepResult:
    """Fine-tune one fresh teacher per rank from a shared init seed and pick
    the best mean Dice (smallest rank breaks ties)."""
    if not ranks:
        raise ValidationError("ranks list is empty")
    from .models import param_count

    rows: list[RankSweepRow] = []
    records: list[RunRecord] = []
    teachers: dict[int, TeacherModel] = {}
    for rank in ranks:
        teacher = build_teacher(teacher_cfg, class_count, seed)
        lora_cfg = LoRAConfig(rank=rank, targets=lora_targets, scope=scope)
        teacher, record = finetune_teacher_lora(teacher, labeled, lora_cfg, sched, seed)
        report = evaluate_model(teacher, eval_ds)
        rows.append(
            RankSweepRow(
                rank=rank,
                mean_dice=report.mean_dice,
                mean_hd95=report.mean_hd95,
                trainable_params=param_count(teacher, trainable_only=True),
            )
        )
        records.append(record)
        teachers[rank] = teacher
    best = max(rows, key=lambda r: (r.mean_dice, -r.rank))
    return RankSweepResult(rows, best.rank, teachers[best.rank], records)
