"""Teacher and student segmentation models.

Both share a plain ViT encoder whose attention keeps separate square
query/key/value/output projections so adapters can target q and v directly.
The student decodes the final token grid through a small feature-pyramid head
to full-resolution logits; the teacher decodes through two attention blocks
plus transposed-conv upsampling to quarter-resolution logits, mirroring a
foundation-style mask decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError

RESOLUTION_FULL = "full"
RESOLUTION_LOW = "low"


@dataclass(frozen=True)
class ViTEncoderConfig:
    image_size: int
    patch_size: int
    embed_dim: int
    depth: int
    heads: int
    mlp_ratio: float = 2.0
    in_channels: int = 1

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValidationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ValidationError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size**2

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "in_channels": self.in_channels,
        }


@dataclass
class EncoderOutput:
    """Final-layer hidden states on the token grid, (B, gh, gw, d)."""

    tokens: torch.Tensor
    per_layer: list[torch.Tensor] | None = None


@dataclass
class SegLogits:
    logits: torch.Tensor  # (B, C, h, w)
    resolution: str

    def __post_init__(self):
        if self.resolution not in (RESOLUTION_FULL, RESOLUTION_LOW):
            raise ValidationError(f"unknown resolution tag {self.resolution!r}")


class Attention(nn.Module):
    """Multi-head self-attention with separate d x d projection matrices."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q = self.q_proj(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out_proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class ViTEncoder(nn.Module):
    def __init__(self, cfg: ViTEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(
            cfg.in_channels, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size
        )
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, cfg.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            [Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def check_input(self, image: torch.Tensor) -> None:
        if image.ndim != 4:
            raise ValidationError(f"expected (B, C, H, W) input, got shape {tuple(image.shape)}")
        _, c, h, w = image.shape
        if c != self.cfg.in_channels or h != self.cfg.image_size or w != self.cfg.image_size:
            raise ValidationError(
                f"input shape {tuple(image.shape)[1:]} does not match config "
                f"({self.cfg.in_channels}, {self.cfg.image_size}, {self.cfg.image_size})"
            )

    def forward(self, image: torch.Tensor, collect_layers: bool = False) -> EncoderOutput:
        self.check_input(image)
        g = self.cfg.grid_size
        x = self.patch_embed(image)  # (B, d, g, g)
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        layers = [] if collect_layers else None
        for blk in self.blocks:
            x = blk(x)
            if collect_layers:
                layers.append(x.view(x.shape[0], g, g, -1))
        x = self.norm(x)
        tokens = x.view(x.shape[0], g, g, -1)
        return EncoderOutput(tokens=tokens, per_layer=layers)

    def embed_tokens(self, image: torch.Tensor) -> torch.Tensor:
        """Patch embedding plus positional embedding, before any block."""
        self.check_input(image)
        x = self.patch_embed(image)
        return x.flatten(2).transpose(1, 2) + self.pos_embed

    def forward_tokens(self, x: torch.Tensor) -> torch.Tensor:
        """Run already-embedded tokens through the blocks and final norm."""
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


def _conv_gn(cin: int, cout: int, kernel: int = 3) -> nn.Sequential:
    groups = math.gcd(8, cout)
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, padding=kernel // 2),
        nn.GroupNorm(groups, cout),
        nn.GELU(),
    )


class FPNHead(nn.Module):
    """Multi-scale head feeding per-pixel class logits at full input resolution.

    Builds a pyramid from the single final-layer feature map by progressive
    down/up-sampling (grid/2, grid, 2*grid, 4*grid), refines each level with a
    conv, fuses at the finest level, and upsamples to the input size.
    """

    def __init__(self, embed_dim: int, class_count: int, fpn_dim: int = 64):
        super().__init__()
        self.lateral = _conv_gn(embed_dim, fpn_dim, kernel=1)
        self.scales = (0.5, 1.0, 2.0, 4.0)
        self.refine = nn.ModuleList([_conv_gn(fpn_dim, fpn_dim) for _ in self.scales])
        self.fuse = _conv_gn(fpn_dim, fpn_dim)
        self.classifier = nn.Conv2d(fpn_dim, class_count, kernel_size=1)

    def forward(self, grid_feats: torch.Tensor, out_size: int) -> torch.Tensor:
        base = self.lateral(grid_feats)
        g = base.shape[-1]
        finest = int(g * self.scales[-1])
        fused = None
        for scale, conv in zip(self.scales, self.refine):
            size = max(1, int(g * scale))
            level = base if size == g else F.interpolate(
                base, size=(size, size), mode="bilinear", align_corners=False
            )
            level = conv(level)
            if size != finest:
                level = F.interpolate(
                    level, size=(finest, finest), mode="bilinear", align_corners=False
                )
            fused = level if fused is None else fused + level
        out = self.classifier(self.fuse(fused))
        if finest != out_size:
            out = F.interpolate(out, size=(out_size, out_size), mode="bilinear", align_corners=False)
        return out


class StudentModel(nn.Module):
    """Compact ViT encoder plus FPN segmentation head (full-resolution logits)."""

    def __init__(self, cfg: ViTEncoderConfig, class_count: int, fpn_dim: int = 64):
        super().__init__()
        if class_count < 2:
            raise ValidationError(f"class_count must be >= 2, got {class_count}")
        self.cfg = cfg
        self.class_count = class_count
        self.fpn_dim = fpn_dim
        self.encoder = ViTEncoder(cfg)
        self.head = FPNHead(cfg.embed_dim, class_count, fpn_dim)

    def forward(self, image: torch.Tensor) -> tuple[EncoderOutput, SegLogits]:
        enc = self.encoder(image)
        grid = enc.tokens.permute(0, 3, 1, 2)  # (B, d, g, g)
        logits = self.head(grid, self.cfg.image_size)
        return enc, SegLogits(logits, RESOLUTION_FULL)


class TeacherDecoder(nn.Module):
    """Attention blocks over the token grid, then transposed-conv upsampling
    to quarter-resolution class logits."""

    def __init__(self, cfg: ViTEncoderConfig, class_count: int, blocks: int = 2):
        super().__init__()
        ratio = cfg.patch_size / 4
        stages = int(math.log2(ratio)) if ratio >= 1 else -1
        if ratio < 1 or 2**stages != ratio:
            raise ValidationError(
                f"patch_size {cfg.patch_size} cannot reach quarter resolution by "
                "x2 upsampling stages (needs patch_size in 4, 8, 16, ...)"
            )
        self.blocks = nn.ModuleList(
            [Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(blocks)]
        )
        dim = cfg.embed_dim
        ups = []
        for _ in range(stages):
            nxt = max(dim, 32)
            ups.append(nn.ConvTranspose2d(dim, nxt, kernel_size=2, stride=2))
            ups.append(nn.GroupNorm(math.gcd(8, nxt), nxt))
            ups.append(nn.GELU())
            dim = nxt
        ups.append(nn.Conv2d(dim, dim, kernel_size=3, padding=1))
        ups.append(nn.GroupNorm(math.gcd(8, dim), dim))
        ups.append(nn.GELU())
        self.upsample = nn.Sequential(*ups)
        self.classifier = nn.Conv2d(dim, class_count, kernel_size=1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        b, g, _, d = tokens.shape
        x = tokens.reshape(b, g * g, d)
        for blk in self.blocks:
            x = blk(x)
        x = x.transpose(1, 2).reshape(b, d, g, g)
        return self.classifier(self.upsample(x))


class TeacherModel(nn.Module):
    """Foundation-style teacher: ViT encoder plus low-resolution mask decoder.

    ``task_finetuned`` flips to True once the teacher has been adapted to the
    target task; distillation pipelines check it to tell task-specific from
    task-agnostic teachers.
    """

    def __init__(self, cfg: ViTEncoderConfig, class_count: int, decoder_blocks: int = 2):
        super().__init__()
        if class_count < 2:
            raise ValidationError(f"class_count must be >= 2, got {class_count}")
        self.cfg = cfg
        self.class_count = class_count
        self.encoder = ViTEncoder(cfg)
        self.decoder = TeacherDecoder(cfg, class_count, decoder_blocks)
        self.task_finetuned = False

    def forward(self, image: torch.Tensor) -> tuple[EncoderOutput, SegLogits]:
        enc = self.encoder(image)
        logits = self.decoder(enc.tokens)
        expected = self.cfg.image_size // 4
        assert logits.shape[-1] == expected, (logits.shape, expected)
        return enc, SegLogits(logits, RESOLUTION_LOW)


def param_count(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(
        p.numel() for p in module.parameters() if p.requires_grad or not trainable_only
    )
