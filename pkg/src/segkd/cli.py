"""Command-line front end.

Commands cover the full experiment chain: make-shapes, augment,
diffusion-train, diffusion-sample, eval-transfer, teacher-finetune,
rank-sweep, pretrain, finetune, evaluate, report.

Exit codes: 0 success, 2 validation error, 3 missing upstream artifact,
4 numerical abort. Defaults follow the reference training recipes at paper
scale; ``--desk`` divides epoch counts and warmup by 20. Config precedence is
built-in defaults < --config file section < explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import artifacts, reporting
from .checkpoints import load_checkpoint, load_pretrained_partial
from .configs import cell_lock, load_config_file, resolve
from .data import (
    load_dataset,
    load_transfer_set,
    save_dataset,
    save_transfer_set,
    subset_labels,
)
from .diffusion import (
    AugmentationSpec,
    DenoiserConfig,
    DiffusionSchedule,
    augment_base_set,
    evaluate_transfer,
    sample,
    train_denoiser,
)
from .errors import (
    IntegrityError,
    MissingArtifactError,
    NumericalAbortError,
    SegKDError,
    ValidationError,
)
from .lora import LoRAConfig
from .models import ViTEncoderConfig
from .shapes import make_shapes_dataset
from .trainer import (
    DESK_DIVISOR,
    DISTILLATION_PRESETS,
    Schedule,
    build_student,
    build_teacher,
    evaluate_model,
    finetune_student,
    finetune_teacher_lora,
    lora_rank_sweep,
    pretrain_mae,
    pretrain_moco,
    pretrain_ta_kd,
    pretrain_ts_kd,
)

SCHEDULE_DEFAULTS = {
    "teacher_finetune": dict(
        optimizer="adamw", base_lr=5e-3, weight_decay=1e-4, warmup_iters=250,
        epochs=160, batch_size=8,
    ),
    "kd": dict(
        optimizer="adam", base_lr=1.5e-4, weight_decay=0.05, warmup_iters=250,
        epochs=1600, batch_size=48,
    ),
    "moco": dict(
        optimizer="adamw", base_lr=1.5e-4, weight_decay=0.1, warmup_iters=250,
        epochs=1600, batch_size=32,
    ),
    "mae": dict(
        optimizer="adamw", base_lr=1.5e-4, weight_decay=0.05, warmup_iters=250,
        epochs=1600, batch_size=64,
    ),
    "finetune": dict(
        optimizer="adamw", base_lr=1e-4, weight_decay=1e-4, warmup_iters=10,
        epochs=160, batch_size=6,
    ),
}

MODEL_DEFAULTS = {
    "student": dict(patch_size=8, dim=64, depth=4, heads=4, mlp_ratio=2.0, fpn_dim=64),
    "teacher": dict(patch_size=8, dim=128, depth=6, heads=4, mlp_ratio=2.0, decoder_blocks=2),
}


def _config_section(args, section: str) -> dict:
    if getattr(args, "config", None):
        return load_config_file(args.config).get(section, {}) or {}
    return {}


def _resolved_schedule(args, kind: str) -> tuple[Schedule, dict]:
    file_vals = _config_section(args, kind if kind in SCHEDULE_DEFAULTS else "finetune")
    overrides = {
        "optimizer": getattr(args, "optimizer", None),
        "base_lr": getattr(args, "lr", None),
        "weight_decay": getattr(args, "weight_decay", None),
        "warmup_iters": getattr(args, "warmup", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
    }
    resolved = resolve(SCHEDULE_DEFAULTS[kind], file_vals, overrides)
    if getattr(args, "desk", False):
        if overrides["epochs"] is None and "epochs" not in file_vals:
            resolved["epochs"] = max(1, resolved["epochs"] // DESK_DIVISOR)
        if overrides["warmup_iters"] is None and "warmup_iters" not in file_vals:
            resolved["warmup_iters"] = max(0, resolved["warmup_iters"] // DESK_DIVISOR)
    sched = Schedule(
        optimizer=resolved["optimizer"],
        base_lr=resolved["base_lr"],
        weight_decay=resolved["weight_decay"],
        warmup_iters=resolved["warmup_iters"],
        total_epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        decay="cosine",
    )
    return sched, resolved


def _model_cfg(args, which: str, image_size: int, in_channels: int) -> dict:
    file_vals = _config_section(args, "model").get(which, {})
    cfg = resolve(MODEL_DEFAULTS[which], file_vals, {})
    cfg["image_size"] = image_size
    cfg["in_channels"] = in_channels
    return cfg


def _encoder_cfg(cfg: dict) -> ViTEncoderConfig:
    return ViTEncoderConfig(
        image_size=cfg["image_size"],
        patch_size=cfg["patch_size"],
        embed_dim=cfg["dim"],
        depth=cfg["depth"],
        heads=cfg["heads"],
        mlp_ratio=cfg["mlp_ratio"],
        in_channels=cfg["in_channels"],
    )


def _load_data(args):
    ds = load_dataset(args.data, args.class_count) if args.class_count else None
    if ds is None:
        meta = Path(args.data) / "meta.json"
        if not meta.exists():
            raise ValidationError(
                f"--class-count required ({args.data} has no meta.json)"
            )
        count = json.loads(meta.read_text())["class_count"]
        ds = load_dataset(args.data, count)
    return ds


def _sample_geometry(ds) -> tuple[int, int]:
    img = ds.samples[0].image
    if img.shape[0] != img.shape[1]:
        raise ValidationError(f"images must be square, got {img.shape[:2]}")
    return img.shape[0], img.shape[2]


# ------------------------------------------------------------------ commands


def cmd_make_shapes(args) -> int:
    ds = make_shapes_dataset(args.count, size=args.size, seed=args.seed, noise_std=args.noise)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_augment(args) -> int:
    ds = _load_data(args)
    spec = AugmentationSpec(
        rotation_deg=tuple(args.rotation),
        scale=tuple(args.scale),
        shear=tuple(args.shear),
        translate_frac=tuple(args.translate),
        count=args.size,
    )
    ts = augment_base_set(ds, spec, seed=args.seed)
    save_transfer_set(ts, args.out)
    print(f"wrote augmented transfer set of {ts.size} images to {args.out}")
    return 0


def cmd_diffusion_train(args) -> int:
    transfer = load_transfer_set(args.transfer)
    if transfer.size == 0:
        raise ValidationError("cannot train a denoiser on an empty transfer set")
    size, channels = transfer.images[0].shape[0], transfer.images[0].shape[2]
    cfg = DenoiserConfig(
        image_size=size,
        patch_size=args.patch,
        dim=args.dim,
        depth=args.depth,
        heads=args.heads,
        in_channels=channels,
    )
    sched = DiffusionSchedule.linear(args.t, args.beta_start, args.beta_end)
    model, losses = train_denoiser(
        transfer.images_array(), cfg, sched, args.steps, args.seed,
        lr=args.lr, batch_size=args.batch_size,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts.save_denoiser(model, sched, out, args.seed)
    with open(out / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            writer.writerow([i, repr(v)])
    print(f"trained denoiser for {args.steps} steps, saved to {out}")
    return 0


def cmd_diffusion_sample(args) -> int:
    model, sched = artifacts.load_denoiser(args.denoiser)
    ts = sample(model, sched, args.size, args.seed)
    save_transfer_set(ts, args.out)
    print(f"sampled {ts.size} images to {args.out}")
    return 0


def _reference_images(path: str) -> list[np.ndarray]:
    root = Path(path)
    if (root / "images").is_dir():
        meta = root / "meta.json"
        count = json.loads(meta.read_text())["class_count"] if meta.exists() else 2
        return [s.image for s in load_dataset(root, count).samples]
    return load_transfer_set(root).images


def cmd_eval_transfer(args) -> int:
    transfer = load_transfer_set(args.transfer)
    if transfer.size == 0:
        raise ValidationError("transfer set is empty")
    refs = _reference_images(args.reference)
    result = evaluate_transfer(transfer, refs)
    summary = {"mean_psnr": result["mean_psnr"], "mean_mse": result["mean_mse"]}
    print(json.dumps(summary, sort_keys=True))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def _build_base_teacher(args, ds):
    image_size, in_channels = _sample_geometry(ds)
    tdict = _model_cfg(args, "teacher", image_size, in_channels)
    class_count = ds.class_count + (1 if getattr(args, "extra_decoder_channel", False) else 0)
    teacher = build_teacher(
        _encoder_cfg(tdict), class_count, seed=args.teacher_seed,
        decoder_blocks=tdict["decoder_blocks"],
    )
    if getattr(args, "init_ckpt", None):
        report = load_pretrained_partial(teacher, load_checkpoint(args.init_ckpt))
        print(f"partial init: loaded {len(report.loaded)}, skipped {len(report.skipped)}")
    return teacher


def _resolve_rank(args) -> int:
    if args.rank != "auto":
        rank = int(args.rank)
        if rank < 1:
            raise ValidationError(f"--rank must be >= 1, got {rank}")
        return rank
    selected = Path(args.out) / "selected_rank.json"
    for candidate in [selected] + (
        [Path(args.rank_file)] if getattr(args, "rank_file", None) else []
    ):
        if candidate.exists():
            return int(json.loads(candidate.read_text())["selected_rank"])
    raise MissingArtifactError(
        "--rank auto needs a selected_rank.json (run rank-sweep first)"
    )


def cmd_teacher_finetune(args) -> int:
    ds = _load_data(args)
    labeled = subset_labels(ds, args.labels, args.seed) if args.labels else ds
    rank = _resolve_rank(args)
    sched, resolved = _resolved_schedule(args, "teacher_finetune")
    lora_cfg = LoRAConfig(rank=rank, targets=tuple(args.targets), scope=args.scope)
    teacher = _build_base_teacher(args, ds)
    with cell_lock(args.out):
        teacher, record = finetune_teacher_lora(
            teacher, labeled, lora_cfg, sched, seed=args.seed, run_dir=args.out
        )
        record.config["resolved_schedule"] = resolved
        record.save(args.out)
        artifacts.save_teacher(teacher, args.out, {"labels": len(labeled)})
    print(f"fine-tuned teacher (rank {rank}) saved to {args.out}")
    return 0


def cmd_rank_sweep(args) -> int:
    ds = _load_data(args)
    labeled = subset_labels(ds, args.labels, args.seed) if args.labels else ds
    eval_ds = _load_data_path(args, args.eval_data) if args.eval_data else labeled
    ranks = [int(r) for r in args.ranks.split(",") if r.strip()]
    if any(r < 1 for r in ranks):
        raise ValidationError(f"ranks must be >= 1, got {ranks}")
    sched, _ = _resolved_schedule(args, "teacher_finetune")
    image_size, in_channels = _sample_geometry(ds)
    tdict = _model_cfg(args, "teacher", image_size, in_channels)
    with cell_lock(args.out):
        result = lora_rank_sweep(
            _encoder_cfg(tdict), ds.class_count, labeled, eval_ds, ranks, sched,
            seed=args.seed, scope=args.scope,
        )
        out = Path(args.out)
        with open(out / "sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "mean_dice", "mean_hd95", "trainable_params"])
            for row in result.rows:
                writer.writerow(
                    [row.rank, repr(row.mean_dice), repr(row.mean_hd95), row.trainable_params]
                )
        (out / "selected_rank.json").write_text(
            json.dumps({"selected_rank": result.selected_rank}, sort_keys=True) + "\n"
        )
        artifacts.save_teacher(result.best_teacher, out, {"labels": len(labeled)})
    print(f"rank sweep over {ranks}: selected {result.selected_rank}")
    return 0


def _load_data_path(args, path):
    class DataArgs:
        data = path
        class_count = args.class_count

    return _load_data(DataArgs)


def cmd_pretrain(args) -> int:
    ds = _load_data(args)
    transfer = load_transfer_set(args.transfer)
    if transfer.size == 0:
        raise ValidationError("transfer set is empty")
    image_size, in_channels = _sample_geometry(ds)
    sdict = _model_cfg(args, "student", image_size, in_channels)
    student = build_student(
        _encoder_cfg(sdict), ds.class_count, seed=args.seed, fpn_dim=sdict["fpn_dim"]
    )
    kind = {"ta_kd": "kd", "ts_kd": "kd"}.get(args.method, args.method)
    sched, resolved = _resolved_schedule(args, kind)

    with cell_lock(args.out):
        if args.method == "ts_kd":
            if not args.teacher:
                raise MissingArtifactError(
                    "--method ts_kd requires --teacher pointing at a teacher-finetune "
                    "or rank-sweep output"
                )
            teacher = artifacts.load_teacher(args.teacher)
            dcfg = DISTILLATION_PRESETS.get(args.ts_config)
            if dcfg is None:
                raise ValidationError(
                    f"unknown --ts-config {args.ts_config!r}; "
                    f"valid: {sorted(DISTILLATION_PRESETS)}"
                )
            student, record = pretrain_ts_kd(
                student, teacher, transfer, dcfg, sched, seed=args.seed
            )
        elif args.method == "ta_kd":
            if args.teacher:
                teacher = artifacts.load_teacher(args.teacher)
            else:
                teacher = _build_base_teacher(args, ds)
            student, record = pretrain_ta_kd(student, teacher, transfer, sched, seed=args.seed)
        elif args.method == "moco":
            student, record = pretrain_moco(
                student, transfer, sched, seed=args.seed,
                temperature=args.temperature, momentum_m=args.momentum,
                queue_size=args.queue_size,
            )
        elif args.method == "mae":
            student, record = pretrain_mae(
                student, transfer, sched, seed=args.seed, mask_ratio=args.mask_ratio
            )
        else:
            raise ValidationError(f"unknown pretrain method {args.method!r}")
        record.config["method"] = args.method
        record.config["resolved_schedule"] = resolved
        record.save(args.out)
        artifacts.save_student(
            student, args.out,
            {"method": args.method, "transfer_size": transfer.size, "step": len(record.loss_curve)},
        )
    print(f"pretrained student ({args.method}) saved to {args.out}")
    return 0


def cmd_finetune(args) -> int:
    ds = _load_data(args)
    labeled = subset_labels(ds, args.labels, args.seed) if args.labels else ds
    method = "scratch"
    transfer_size = 0
    if args.init and args.init_ckpt:
        raise ValidationError("pass either --init or --init-ckpt, not both")
    if args.init:
        student, meta = artifacts.load_student(args.init)
        method = meta.get("method", "scratch")
        transfer_size = int(meta.get("transfer_size", 0))
        if student.class_count != ds.class_count:
            raise ValidationError(
                f"pretrained student has {student.class_count} classes, dataset has {ds.class_count}"
            )
    else:
        image_size, in_channels = _sample_geometry(ds)
        sdict = _model_cfg(args, "student", image_size, in_channels)
        student = build_student(
            _encoder_cfg(sdict), ds.class_count, seed=args.seed, fpn_dim=sdict["fpn_dim"]
        )
        if args.init_ckpt:
            report = load_pretrained_partial(student, load_checkpoint(args.init_ckpt))
            print(
                f"partial init: loaded {len(report.loaded)}, skipped {len(report.skipped)}"
            )
            method = args.method_label or "imagenet_mae"
    sched, resolved = _resolved_schedule(args, "finetune")
    with cell_lock(args.out):
        student, record = finetune_student(student, labeled, sched, seed=args.seed)
        record.config.update(
            {
                "method": method,
                "transfer_size": transfer_size,
                "labels": len(labeled),
                "resolved_schedule": resolved,
            }
        )
        record.save(args.out)
        artifacts.save_student(
            student, args.out,
            {"method": method, "transfer_size": transfer_size, "labels": len(labeled)},
        )
    print(f"fine-tuned student ({method}, {len(labeled)} labels) saved to {args.out}")
    return 0


def _load_pred_masks(pred_dir: str, ds) -> list[np.ndarray]:
    from PIL import Image

    root = Path(pred_dir)
    preds = []
    for s in ds.samples:
        path = root / f"{s.id}.png"
        if not path.exists():
            raise MissingArtifactError(f"missing predicted mask {path}")
        preds.append(np.asarray(Image.open(path).convert("L"), dtype=np.int64))
    return preds


def cmd_evaluate(args) -> int:
    ds = _load_data(args)
    out_dir = Path(args.out) if args.out else (Path(args.run) if args.run else None)
    if out_dir is None:
        raise ValidationError("pass --out when evaluating --pred-masks")
    if args.run and args.pred_masks:
        raise ValidationError("pass either --run or --pred-masks, not both")
    if args.pred_masks:
        from .metrics import compute_report

        preds = _load_pred_masks(args.pred_masks, ds)
        report = compute_report(
            preds, [s.mask for s in ds.samples], ds.class_count, ds.class_names,
            pixel_spacing=(args.spacing, args.spacing),
        )
    elif args.run:
        if (Path(args.run) / artifacts.TEACHER_CKPT).exists():
            model = artifacts.load_teacher(args.run)
        else:
            model, _ = artifacts.load_student(args.run)
        report = evaluate_model(model, ds, pixel_spacing=(args.spacing, args.spacing))
    else:
        raise ValidationError("pass --run or --pred-masks")
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_dir / "metrics.csv")
    print(
        f"mean dice {report.mean_dice:.4f}, hd95 "
        f"{report.mean_hd95:.4f}, miou {report.mean_iou:.4f} -> {out_dir / 'metrics.csv'}"
    )
    return 0


def cmd_report(args) -> int:
    rows = reporting.collect_runs(args.runs)
    out = Path(args.out)
    path = reporting.write_summary(rows, out)
    charts = reporting.render_charts(rows, out)
    print(f"summary: {path}")
    for c in charts:
        print(f"chart: {c}")
    return 0


# ------------------------------------------------------------------ parser


def _add_schedule_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--optimizer", choices=["adam", "adamw"], default=None)
    p.add_argument("--lr", type=float, default=None, help="base learning rate")
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None, help="warmup iterations")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--desk", action="store_true", help="desk profile: epochs/20, warmup/20")
    p.add_argument("--config", default=None, help="YAML config file")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory (images/ + masks/)")
    p.add_argument("--class-count", dest="class_count", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segkd",
        description="Task-specific distillation experiments for compact segmentation students",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-shapes", help="generate the procedural shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=80)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.04)
    p.set_defaults(func=cmd_make_shapes)

    p = sub.add_parser("augment", help="build an augmented transfer set")
    _add_data_flags(p)
    p.add_argument("--size", type=int, required=True, help="output image count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--rotation", type=float, nargs=2, default=[-25.0, 25.0])
    p.add_argument("--scale", type=float, nargs=2, default=[0.9, 1.1])
    p.add_argument("--shear", type=float, nargs=2, default=[-0.1, 0.1])
    p.add_argument("--translate", type=float, nargs=2, default=[-0.08, 0.08])
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("diffusion-train", help="train the diffusion denoiser")
    p.add_argument("--transfer", required=True, help="transfer-set directory")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--t", type=int, default=100, help="diffusion steps (desk default 100)")
    p.add_argument("--beta-start", dest="beta_start", type=float, default=1e-4)
    p.add_argument("--beta-end", dest="beta_end", type=float, default=0.02)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    p.set_defaults(func=cmd_diffusion_train)

    p = sub.add_parser("diffusion-sample", help="sample a synthetic transfer set")
    p.add_argument("--denoiser", required=True, help="diffusion-train output directory")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diffusion_sample)

    p = sub.add_parser("eval-transfer", help="PSNR/MSE of a transfer set vs references")
    p.add_argument("--transfer", required=True)
    p.add_argument("--reference", required=True, help="dataset dir or transfer dir")
    p.add_argument("--out", default=None, help="optional JSON output path")
    p.set_defaults(func=cmd_eval_transfer)

    p = sub.add_parser("teacher-finetune", help="LoRA fine-tune the teacher")
    _add_data_flags(p)
    p.add_argument("--rank", default="auto", help="adapter rank, or 'auto' to read rank-sweep output")
    p.add_argument("--rank-file", dest="rank_file", default=None, help="selected_rank.json path for --rank auto")
    p.add_argument("--labels", type=int, default=None, help="label budget (default: all)")
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--teacher-seed", dest="teacher_seed", type=int, default=1)
    p.add_argument("--init-ckpt", dest="init_ckpt", default=None, help="optional partial preload")
    p.add_argument("--scope", choices=["encoder_only", "encoder_and_decoder"], default="encoder_and_decoder")
    p.add_argument("--targets", nargs="+", default=["query", "value"])
    p.add_argument(
        "--extra-decoder-channel",
        dest="extra_decoder_channel",
        action="store_true",
        help="teacher emits one extra logit channel (drop_last_channel distillation)",
    )
    p.add_argument("--out", required=True)
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_teacher_finetune)

    p = sub.add_parser("rank-sweep", help="sweep adapter ranks and select the best")
    _add_data_flags(p)
    p.add_argument("--ranks", required=True, help="comma-separated, e.g. 1,2,4,8")
    p.add_argument("--labels", type=int, default=None)
    p.add_argument("--eval-data", dest="eval_data", default=None)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--teacher-seed", dest="teacher_seed", type=int, default=1)
    p.add_argument("--scope", choices=["encoder_only", "encoder_and_decoder"], default="encoder_and_decoder")
    p.add_argument("--out", required=True)
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_rank_sweep)

    p = sub.add_parser("pretrain", help="pretrain the student on a transfer set")
    _add_data_flags(p)
    p.add_argument("--method", required=True, choices=["moco", "mae", "ta_kd", "ts_kd"])
    p.add_argument("--transfer", required=True)
    p.add_argument("--teacher", default=None, help="teacher artifact dir (ts_kd; optional base for ta_kd)")
    p.add_argument("--teacher-seed", dest="teacher_seed", type=int, default=1)
    p.add_argument("--ts-config", dest="ts_config", default="TS-KD8")
    p.add_argument("--temperature", type=float, default=0.2)
    p.add_argument("--momentum", type=float, default=0.99)
    p.add_argument("--queue-size", dest="queue_size", type=int, default=256)
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--out", required=True)
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune the student on a label budget")
    _add_data_flags(p)
    p.add_argument("--labels", type=int, default=None)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--init", default=None, help="pretrain run directory")
    p.add_argument("--init-ckpt", dest="init_ckpt", default=None, help="checkpoint for partial init")
    p.add_argument("--method-label", dest="method_label", default=None)
    p.add_argument("--out", required=True)
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a run (or a directory of predicted masks)")
    _add_data_flags(p)
    p.add_argument("--run", default=None, help="finetune/pretrain run directory")
    p.add_argument("--pred-masks", dest="pred_masks", default=None)
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--out", default=None, help="default: the run directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate runs into tables and charts")
    p.add_argument("--runs", required=True, help="root directory of run directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return 3
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4
    except SegKDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
