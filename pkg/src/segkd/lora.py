"""Low-rank adapter injection, merging, and parameter accounting.

Adapters attach to the square query/value projection matrices of attention
blocks. The additive update is Delta-W = A @ B with A (d, r) Gaussian-init and
B (r, d) zero-init, so a fresh injection leaves the forward pass unchanged.
There is no alpha/r scaling factor: the update is applied exactly as written.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import ValidationError
from .models import Attention
from .seeding import torch_generator

VALID_TARGETS = ("query", "value")
SCOPES = ("encoder_only", "encoder_and_decoder")
_TARGET_ATTR = {"query": "q_proj", "value": "v_proj"}


@dataclass(frozen=True)
class LoRAConfig:
    rank: int
    targets: tuple[str, ...] = ("query", "value")
    scope: str = "encoder_and_decoder"

    def __post_init__(self):
        if self.rank < 1:
            raise ValidationError(f"rank must be >= 1, got {self.rank}")
        if not self.targets:
            raise ValidationError("target projection set must be nonempty")
        for t in self.targets:
            if t not in VALID_TARGETS:
                raise ValidationError(f"unknown target {t!r}, valid: {VALID_TARGETS}")
        if self.scope not in SCOPES:
            raise ValidationError(f"unknown scope {self.scope!r}, valid: {SCOPES}")

    def to_dict(self) -> dict:
        return {"rank": self.rank, "targets": list(self.targets), "scope": self.scope}


class LoRALinear(nn.Module):
    """A frozen linear layer plus a trainable low-rank additive update."""

    def __init__(self, base: nn.Linear, rank: int, target_name: str, gen: torch.Generator):
        super().__init__()
        d_out, d_in = base.weight.shape
        if d_out != d_in:
            raise ValidationError(
                f"{target_name}: adapters require a square matrix, got {d_out}x{d_in}"
            )
        if rank > d_in // 2:
            raise ValidationError(
                f"{target_name}: rank {rank} too large for width {d_in} (max {d_in // 2})"
            )
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.rank = rank
        self.target_name = target_name
        a_init = torch.empty(d_in, rank, dtype=base.weight.dtype)
        a_init.normal_(mean=0.0, std=0.01, generator=gen)
        self.A = nn.Parameter(a_init)
        self.B = nn.Parameter(torch.zeros(rank, d_in, dtype=base.weight.dtype))

    def delta_weight(self) -> torch.Tensor:
        return self.A @ self.B  # (d, d), acting as x -> x @ (A B)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (x @ self.A) @ self.B

    def merged_linear(self) -> nn.Linear:
        d = self.base.in_features
        merged = nn.Linear(d, d, bias=self.base.bias is not None)
        with torch.no_grad():
            # nn.Linear computes x @ W.T, so the x @ (A B) update folds in transposed
            merged.weight.copy_(self.base.weight + self.delta_weight().t())
            if self.base.bias is not None:
                merged.bias.copy_(self.base.bias)
        return merged


def _iter_attention(model: nn.Module, scope: str):
    encoder = getattr(model, "encoder", None)
    decoder = getattr(model, "decoder", None)
    if encoder is None and decoder is None:
        # bare module: treat everything as encoder scope
        yield from ((name, mod) for name, mod in model.named_modules() if isinstance(mod, Attention))
        return
    if encoder is not None:
        for name, mod in encoder.named_modules():
            if isinstance(mod, Attention):
                yield f"encoder.{name}", mod
    if scope == "encoder_and_decoder" and decoder is not None:
        for name, mod in decoder.named_modules():
            if isinstance(mod, Attention):
                yield f"decoder.{name}", mod


def inject(model: nn.Module, cfg: LoRAConfig, init_seed: int = 0) -> nn.Module:
    """Attach adapters in place and freeze every pre-existing parameter.

    After injection only adapter tensors are trainable; pipelines re-enable
    any additional parameter groups they train (for example the teacher's
    decoder head when the scope covers the decoder).
    """
    if has_adapters(model):
        raise ValidationError("model already carries adapters")
    attn_sites = list(_iter_attention(model, cfg.scope))
    if not attn_sites:
        raise ValidationError("no attention modules found to adapt")
    for p in model.parameters():
        p.requires_grad_(False)
    gen = torch_generator(init_seed, "lora_init")
    for name, attn in attn_sites:
        for target in cfg.targets:
            attr = _TARGET_ATTR[target]
            base = getattr(attn, attr)
            target_name = f"{name}.{attr}"
            setattr(attn, attr, LoRALinear(base, cfg.rank, target_name, gen))
    model.lora_config = cfg
    return model


def has_adapters(model: nn.Module) -> bool:
    return any(isinstance(m, LoRALinear) for m in model.modules())


def adapter_modules(model: nn.Module) -> list[LoRALinear]:
    return [m for m in model.modules() if isinstance(m, LoRALinear)]


def adapter_parameters(model: nn.Module):
    for mod in adapter_modules(model):
        yield mod.A
        yield mod.B


def merge(adapted: nn.Module) -> nn.Module:
    """Fold every adapter into its base weight and return a plain copy.

    Rejects models without adapters, so merging twice fails loudly.
    """
    if not has_adapters(adapted):
        raise ValidationError("no adapters to merge")
    merged = copy.deepcopy(adapted)
    for module in merged.modules():
        for child_name, child in list(module.named_children()):
            if isinstance(child, LoRALinear):
                setattr(module, child_name, child.merged_linear())
    if hasattr(merged, "lora_config"):
        del merged.lora_config
    return merged


@dataclass
class TrainableReport:
    base_frozen_count: int
    adapter_count: int
    ratio: float
    per_adapter: dict[str, int] = field(default_factory=dict)


def trainable_parameter_report(adapted: nn.Module) -> TrainableReport:
    adapters = adapter_modules(adapted)
    per = {m.target_name: m.A.numel() + m.B.numel() for m in adapters}
    adapter_count = sum(per.values())
    adapter_ids = {id(p) for m in adapters for p in (m.A, m.B)}
    base_count = sum(p.numel() for p in adapted.parameters() if id(p) not in adapter_ids)
    ratio = adapter_count / base_count if base_count else float("inf")
    return TrainableReport(base_count, adapter_count, ratio, per)


def adapter_state(model: nn.Module) -> dict[str, torch.Tensor]:
    """Adapter tensors under their persistence names ``lora/<target>/{A,B}``."""
    out = {}
    for mod in adapter_modules(model):
        out[f"lora/{mod.target_name}/A"] = mod.A.detach()
        out[f"lora/{mod.target_name}/B"] = mod.B.detach()
    return out


def load_adapter_state(model: nn.Module, state: dict[str, torch.Tensor]) -> None:
    mods = {m.target_name: m for m in adapter_modules(model)}
    for name, mod in mods.items():
        for part in ("A", "B"):
            key = f"lora/{name}/{part}"
            if key not in state:
                raise ValidationError(f"missing adapter tensor {key}")
            with torch.no_grad():
                getattr(mod, part).copy_(state[key])


def base_state(model: nn.Module) -> dict[str, torch.Tensor]:
    """Non-adapter parameters and buffers, named as in the unadapted model."""
    out = {}
    for name, tensor in model.state_dict().items():
        if name.rsplit(".", 1)[-1] in ("A", "B"):
            continue
        out[name.replace(".base.", ".")] = tensor
    return out
