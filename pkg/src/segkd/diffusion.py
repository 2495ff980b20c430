"""Synthetic transfer-set pipeline.

Geometric augmentation expands a small base set; a denoising-diffusion
generator with a small transformer denoiser (sinusoidal timestep embeddings,
noise-prediction objective) produces additional images; generated sets are
scored by PSNR/MSE against their nearest reference.

Forward process: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, the closed form
of iteratively scaling by sqrt(alpha_t) and adding (1 - alpha_t)-variance
noise. Reverse process uses the noise-prediction mean with sigma_t^2 = beta_t.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage

from .checkpoints import config_hash
from .data import LabeledDataset, TransferSet
from .errors import NumericalAbortError, ValidationError
from .metrics import psnr_from_mse
from .models import Block, ViTEncoderConfig
from .seeding import derive_seed, np_rng, seed_everything


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step retention coefficients alpha_t and derived quantities.

    Arrays are indexed by t in [1, T]; alpha_bar(0) is defined as 1.
    """

    betas: np.ndarray  # (T,), beta_t = 1 - alpha_t

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValidationError("betas must be a nonempty 1-D array")
        if (betas <= 0).any() or (betas >= 1).any():
            raise ValidationError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)

    @classmethod
    def linear(cls, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if steps < 1:
            raise ValidationError(f"steps must be >= 1, got {steps}")
        return cls(np.linspace(beta_start, beta_end, steps))

    @property
    def steps(self) -> int:
        return int(self.betas.size)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        """Cumulative products, index 0 holds alpha_bar(0) = 1."""
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t])

    def sigma(self, t: int) -> float:
        return math.sqrt(self.beta(t))

    def snr(self, t: int) -> float:
        ab = self.alpha_bar(t)
        return ab / (1.0 - ab)

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ValidationError(f"t={t} outside [1, {self.steps}]")

    def _checked(self, t: int) -> int:
        self._check_t(t)
        return t

    def hash(self) -> str:
        return config_hash({"betas": [repr(float(b)) for b in self.betas]})


def q_sample(
    x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, sched: DiffusionSchedule
) -> torch.Tensor:
    """Closed-form forward marginal sample at step t."""
    if eps.shape != x0.shape:
        raise ValidationError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if isinstance(t, torch.Tensor):
        ab = torch.tensor(
            [sched.alpha_bar(sched._checked(int(ti))) for ti in t],
            dtype=x0.dtype,
            device=x0.device,
        ).view((-1,) + (1,) * (x0.ndim - 1))
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    ab = sched.alpha_bar(sched._checked(int(t)))
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def q_sample_stepwise(
    x0: torch.Tensor, t: int, per_step_eps: list[torch.Tensor], sched: DiffusionSchedule
) -> torch.Tensor:
    """Iterate the single-step noising recursion t times.

    Equivalent in distribution to ``q_sample``; with the matching combined
    noise it is equal elementwise (see ``equivalent_single_eps``).
    """
    if len(per_step_eps) != t:
        raise ValidationError(f"need {t} per-step noises, got {len(per_step_eps)}")
    x = x0
    for s in range(1, t + 1):
        a = sched.alpha(s)
        x = math.sqrt(a) * x + math.sqrt(1.0 - a) * per_step_eps[s - 1]
    return x


def equivalent_single_eps(
    t: int, per_step_eps: list[torch.Tensor], sched: DiffusionSchedule
) -> torch.Tensor:
    """Fold per-step noises into the single epsilon the closed form would use."""
    ab_t = sched.alpha_bar(t)
    acc = torch.zeros_like(per_step_eps[0])
    for s in range(1, t + 1):
        w = math.sqrt(ab_t / sched.alpha_bar(s)) * math.sqrt(1.0 - sched.alpha(s))
        acc = acc + w * per_step_eps[s - 1]
    return acc / math.sqrt(1.0 - ab_t)


# ------------------------------------------------------------------ denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int
    patch_size: int
    dim: int = 64
    depth: int = 2
    heads: int = 4
    time_embed_dim: int = 64
    in_channels: int = 1

    def __post_init__(self):
        ViTEncoderConfig(self.image_size, self.patch_size, self.dim, self.depth, self.heads)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "dim": self.dim,
            "depth": self.depth,
            "heads": self.heads,
            "time_embed_dim": self.time_embed_dim,
            "in_channels": self.in_channels,
        }


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """(B,) integer timesteps -> (B, dim) sinusoidal features."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / max(half - 1, 1)
    )
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class TransformerDenoiser(nn.Module):
    """Small ViT that predicts the injected noise from (x_t, t)."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.image_size // cfg.patch_size
        self.grid = g
        self.patch_embed = nn.Conv2d(
            cfg.in_channels, cfg.dim, kernel_size=cfg.patch_size, stride=cfg.patch_size
        )
        self.pos_embed = nn.Parameter(torch.zeros(1, g * g, cfg.dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, cfg.dim), nn.GELU(), nn.Linear(cfg.dim, cfg.dim)
        )
        self.blocks = nn.ModuleList(
            [Block(cfg.dim, cfg.heads, mlp_ratio=2.0) for _ in range(cfg.depth)]
        )
        self.norm = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.patch_size * cfg.patch_size * cfg.in_channels)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x_t.shape
        p = self.cfg.patch_size
        tokens = self.patch_embed(x_t).flatten(2).transpose(1, 2) + self.pos_embed
        t_emb = self.time_mlp(sinusoidal_embedding(t, self.cfg.time_embed_dim))
        tokens = tokens + t_emb[:, None, :]
        for blk in self.blocks:
            tokens = blk(tokens)
        out = self.head(self.norm(tokens))  # (B, N, p*p*C)
        g = self.grid
        out = out.reshape(b, g, g, p, p, c).permute(0, 5, 1, 3, 2, 4)
        return out.reshape(b, c, h, w)


def train_denoiser(
    transfer_images: np.ndarray | list[np.ndarray],
    cfg: DenoiserConfig,
    sched: DiffusionSchedule,
    steps: int,
    seed: int,
    lr: float = 2e-3,
    batch_size: int = 16,
) -> tuple[TransformerDenoiser, list[float]]:
    """Optimize the noise-prediction MSE; returns the model and loss history."""
    images = np.stack(list(transfer_images)) if not isinstance(transfer_images, np.ndarray) else transfer_images
    if images.size == 0:
        raise ValidationError("no images to train on")
    data = torch.from_numpy(images.astype(np.float32)).permute(0, 3, 1, 2)
    seed_everything(seed, "denoiser_init")
    model = TransformerDenoiser(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    order_rng = np_rng(seed, "denoiser_order")
    noise_gen = torch.Generator().manual_seed(derive_seed(seed, "denoiser_noise"))
    losses: list[float] = []
    n = data.shape[0]
    model.train()
    for step in range(steps):
        idx = order_rng.integers(0, n, size=min(batch_size, n))
        x0 = data[np.asarray(idx)]
        t = torch.randint(1, sched.steps + 1, (x0.shape[0],), generator=noise_gen)
        eps = torch.randn(x0.shape, generator=noise_gen)
        x_t = q_sample(x0, t, eps, sched)
        pred = model(x_t, t)
        loss = (pred - eps).square().mean()
        if not torch.isfinite(loss):
            raise NumericalAbortError(
                f"denoiser loss became non-finite at step {step} "
                f"(lr={lr}, batch={x0.shape[0]})"
            )
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        losses.append(loss.item())
    model.eval()
    return model, losses


@torch.no_grad()
def sample(
    denoiser: nn.Module,
    sched: DiffusionSchedule,
    count: int,
    seed: int,
    image_size: int | None = None,
    in_channels: int | None = None,
) -> TransferSet:
    """Ancestral sampling from pure noise down to x_0, clipped to [0, 1].

    Each image draws from its own derived seed, so sampling is reproducible
    and order-independent.
    """
    if count < 0:
        raise ValidationError(f"count must be >= 0, got {count}")
    cfg = getattr(denoiser, "cfg", None)
    size = image_size or (cfg.image_size if cfg else None)
    channels = in_channels or (cfg.in_channels if cfg else None)
    if size is None or channels is None:
        raise ValidationError("image_size/in_channels required for a bare denoiser")
    was_training = denoiser.training
    denoiser.eval()
    images: list[np.ndarray] = []
    for i in range(count):
        gen = torch.Generator().manual_seed(derive_seed(seed, "sample", i))
        x = torch.randn(1, channels, size, size, generator=gen)
        for t in range(sched.steps, 0, -1):
            a = sched.alpha(t)
            ab = sched.alpha_bar(t)
            eps = denoiser(x, torch.tensor([t]))
            mean = (x - (1.0 - a) / math.sqrt(1.0 - ab) * eps) / math.sqrt(a)
            if t > 1:
                z = torch.randn(x.shape, generator=gen)
                x = mean + sched.sigma(t) * z
            else:
                x = mean
        img = x.clamp(0.0, 1.0)[0].permute(1, 2, 0).numpy().astype(np.float32)
        images.append(img)
    if was_training:
        denoiser.train()
    return TransferSet(images, "diffusion_sampled", seed=seed, schedule_hash=sched.hash())


# ------------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_deg: tuple[float, float] = (-25.0, 25.0)
    scale: tuple[float, float] = (0.9, 1.1)
    shear: tuple[float, float] = (-0.1, 0.1)
    translate_frac: tuple[float, float] = (-0.08, 0.08)
    count: int = 100

    def __post_init__(self):
        for name, rng in (
            ("rotation_deg", self.rotation_deg),
            ("scale", self.scale),
            ("shear", self.shear),
            ("translate_frac", self.translate_frac),
        ):
            lo, hi = rng
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValidationError(f"{name} range must be finite")
            if lo > hi:
                raise ValidationError(f"{name} range degenerate: min {lo} > max {hi}")
        if self.count < 0:
            raise ValidationError(f"count must be >= 0, got {self.count}")

    def is_identity(self) -> bool:
        return (
            self.rotation_deg == (0.0, 0.0)
            and self.scale == (1.0, 1.0)
            and self.shear == (0.0, 0.0)
            and self.translate_frac == (0.0, 0.0)
        )


def _affine_image(img: np.ndarray, angle_deg: float, scale: float, shear: float, tx: float, ty: float) -> np.ndarray:
    """Rotate/scale/shear/translate about the image center, bilinear."""
    if (
        angle_deg % 90.0 == 0.0
        and scale == 1.0
        and shear == 0.0
        and tx == 0.0
        and ty == 0.0
    ):
        # right angles go through lossless grid rotation
        k = int(angle_deg // 90) % 4
        return np.ascontiguousarray(np.rot90(img, k=k, axes=(0, 1)))
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    shear_m = np.array([[1.0, shear], [0.0, 1.0]])
    m = (rot @ shear_m) * scale
    # output->input mapping for ndimage.affine_transform
    inv = np.linalg.inv(m)
    offset = np.array([cy, cx]) - inv @ (np.array([cy, cx]) + np.array([ty * h, tx * w]))
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.affine_transform(
            img[:, :, c], inv, offset=offset, order=1, mode="nearest"
        )
    return out


def augment_base_set(
    source: LabeledDataset | list[np.ndarray], spec: AugmentationSpec, seed: int
) -> TransferSet:
    """Sample transforms uniformly from the configured ranges to build an
    unlabeled transfer set of exactly ``spec.count`` images."""
    if isinstance(source, LabeledDataset):
        base = [s.image for s in source.samples]
    else:
        base = list(source)
    if not base:
        raise ValidationError("source set is empty")
    rng = np_rng(seed, "augment")
    images = []
    for i in range(spec.count):
        img = base[i % len(base)]
        angle = rng.uniform(*spec.rotation_deg)
        scale = rng.uniform(*spec.scale)
        shear = rng.uniform(*spec.shear)
        tx = rng.uniform(*spec.translate_frac)
        ty = rng.uniform(*spec.translate_frac)
        out = _affine_image(np.asarray(img, dtype=np.float32), angle, scale, shear, tx, ty)
        images.append(np.clip(out, 0.0, 1.0).astype(np.float32))
    return TransferSet(images, "augmented", seed=seed)


# ------------------------------------------------------------------ quality


def evaluate_transfer(
    transfer: TransferSet | list[np.ndarray], reference: list[np.ndarray], peak: float = 255.0
) -> dict:
    """Score each generated image against its min-MSE nearest reference.

    MSE is computed on the 8-bit scale (values times 255) to match the usual
    PSNR convention for byte images.
    """
    gen = transfer.images if isinstance(transfer, TransferSet) else list(transfer)
    if not gen or not reference:
        raise ValidationError("both generated and reference sets must be nonempty")
    refs = np.stack([np.asarray(r, dtype=np.float64) * 255.0 for r in reference])
    mses = []
    psnrs = []
    for img in gen:
        x = np.asarray(img, dtype=np.float64) * 255.0
        diffs = refs - x[None]
        per_ref = np.mean(diffs**2, axis=tuple(range(1, refs.ndim)))
        mse = float(per_ref.min())
        mses.append(mse)
        psnrs.append(psnr_from_mse(mse, peak))
    return {
        "mean_mse": float(np.mean(mses)),
        "mean_psnr": float(np.mean(psnrs)),
        "per_image_mse": mses,
        "per_image_psnr": psnrs,
    }


def save_denoiser_meta(path, cfg: DenoiserConfig, sched: DiffusionSchedule, seed: int) -> None:
    meta = {
        "config": cfg.to_dict(),
        "schedule": {
            "steps": sched.steps,
            "beta_start": float(sched.betas[0]),
            "beta_end": float(sched.betas[-1]),
        },
        "seed": seed,
    }
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
