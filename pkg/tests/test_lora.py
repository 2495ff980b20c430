import numpy as np
import pytest
import torch

from segkd.errors import ValidationError
from segkd.lora import (
    LoRAConfig,
    LoRALinear,
    adapter_modules,
    adapter_parameters,
    adapter_state,
    has_adapters,
    inject,
    load_adapter_state,
    merge,
    trainable_parameter_report,
)
from segkd.models import StudentModel, TeacherModel, ViTEncoderConfig, param_count
from segkd.seeding import torch_generator


def make_teacher(dim=32, depth=2, classes=3, image=32, patch=4):
    torch.manual_seed(0)
    return TeacherModel(ViTEncoderConfig(image, patch, dim, depth, 4), classes)


def test_config_validation():
    with pytest.raises(ValidationError):
        LoRAConfig(rank=0)
    with pytest.raises(ValidationError):
        LoRAConfig(rank=2, targets=())
    with pytest.raises(ValidationError):
        LoRAConfig(rank=2, targets=("key",))
    with pytest.raises(ValidationError):
        LoRAConfig(rank=2, scope="decoder_only")


def test_zero_init_forward_equivalence():
    t = make_teacher()
    t.eval()
    x = torch.rand(2, 1, 32, 32)
    with torch.no_grad():
        base_enc, base_seg = t(x)
    inject(t, LoRAConfig(rank=2), init_seed=3)
    with torch.no_grad():
        enc, seg = t(x)
    assert (enc.tokens - base_enc.tokens).abs().max().item() <= 1e-7
    assert (seg.logits - base_seg.logits).abs().max().item() <= 1e-7


def test_delta_matrix_product():
    lin = torch.nn.Linear(2, 2, bias=False)
    mod = LoRALinear(lin, rank=1, target_name="t", gen=torch_generator(0))
    with torch.no_grad():
        mod.A.copy_(torch.tensor([[1.0], [0.0]]))
        mod.B.copy_(torch.tensor([[0.0, 1.0]]))
    assert torch.equal(mod.delta_weight(), torch.tensor([[0.0, 1.0], [0.0, 0.0]]))


def test_trainable_params_formula():
    # depth-L encoder with q and v targeted: L * 2 targets * (2 * d * r)
    t = make_teacher(dim=32, depth=3)
    inject(t, LoRAConfig(rank=2, scope="encoder_only"), init_seed=0)
    expected = 3 * 2 * (2 * 32 * 2)
    assert param_count(t, trainable_only=True) == expected


def test_trainable_params_192_r4_depth12():
    torch.manual_seed(0)
    enc_cfg = ViTEncoderConfig(48, 4, 192, 12, 4)
    s = StudentModel(enc_cfg, 2, fpn_dim=16)
    inject(s, LoRAConfig(rank=4), init_seed=1)
    assert param_count(s, trainable_only=True) == 12 * 2 * 2 * 192 * 4 == 36864


def test_scope_difference_is_decoder_adapters():
    t_enc = make_teacher()
    t_both = make_teacher()
    inject(t_enc, LoRAConfig(rank=2, scope="encoder_only"), init_seed=0)
    inject(t_both, LoRAConfig(rank=2, scope="encoder_and_decoder"), init_seed=0)
    rep_enc = trainable_parameter_report(t_enc)
    rep_both = trainable_parameter_report(t_both)
    dec_adapters = [n for n in rep_both.per_adapter if n.startswith("decoder.")]
    assert dec_adapters
    diff = rep_both.adapter_count - rep_enc.adapter_count
    assert diff == sum(rep_both.per_adapter[n] for n in dec_adapters)


def test_report_linear_in_rank():
    t1 = make_teacher()
    t2 = make_teacher()
    inject(t1, LoRAConfig(rank=2), init_seed=0)
    inject(t2, LoRAConfig(rank=4), init_seed=0)
    r1 = trainable_parameter_report(t1)
    r2 = trainable_parameter_report(t2)
    assert r2.adapter_count == 2 * r1.adapter_count
    assert r1.base_frozen_count == r2.base_frozen_count
    assert r1.ratio == pytest.approx(r1.adapter_count / r1.base_frozen_count)


def test_inject_errors():
    t = make_teacher()
    inject(t, LoRAConfig(rank=2), init_seed=0)
    with pytest.raises(ValidationError):
        inject(t, LoRAConfig(rank=2), init_seed=0)  # already adapted
    lin = torch.nn.Linear(8, 4)
    with pytest.raises(ValidationError, match="square"):
        LoRALinear(lin, 1, "bad", torch_generator(0))
    with pytest.raises(ValidationError, match="rank"):
        LoRALinear(torch.nn.Linear(8, 8), 5, "toolarge", torch_generator(0))


def test_rank_bound_of_delta():
    t = make_teacher(dim=32)
    inject(t, LoRAConfig(rank=3), init_seed=5)
    for mod in adapter_modules(t):
        with torch.no_grad():
            mod.B.normal_(std=0.05)
            sv = torch.linalg.svdvals(mod.delta_weight())
        assert int((sv > 1e-8).sum()) <= 3


def test_merge_zero_adapters_identical():
    t = make_teacher().eval()
    inject(t, LoRAConfig(rank=2), init_seed=0)
    merged = merge(t).eval()
    assert not has_adapters(merged)
    x = torch.rand(1, 1, 32, 32)
    with torch.no_grad():
        a = t(x)[1].logits
        b = merged(x)[1].logits
    assert torch.equal(a, b)


def test_merge_consistency_random_adapters():
    t = make_teacher().eval()
    inject(t, LoRAConfig(rank=2), init_seed=0)
    gen = torch.Generator().manual_seed(9)
    with torch.no_grad():
        for mod in adapter_modules(t):
            mod.A.normal_(std=0.05, generator=gen)
            mod.B.normal_(std=0.05, generator=gen)
    merged = merge(t).eval()
    x = torch.rand(2, 1, 32, 32, generator=gen)
    with torch.no_grad():
        a = t(x)[1].logits
        b = merged(x)[1].logits
    scale = a.abs().max().item()
    assert (a - b).abs().max().item() < 1e-6 * max(scale, 1.0)


def test_merge_twice_rejected():
    t = make_teacher()
    inject(t, LoRAConfig(rank=2), init_seed=0)
    merged = merge(t)
    with pytest.raises(ValidationError, match="no adapters"):
        merge(merged)


def test_frozen_base_bit_identity_after_steps():
    t = make_teacher()
    inject(t, LoRAConfig(rank=2), init_seed=0)
    frozen = {n: p.detach().clone() for n, p in t.named_parameters() if not p.requires_grad}
    opt = torch.optim.AdamW([p for p in t.parameters() if p.requires_grad], lr=1e-2)
    gen = torch.Generator().manual_seed(4)
    for _ in range(20):
        x = torch.rand(2, 1, 32, 32, generator=gen)
        loss = t(x)[1].logits.square().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    changed = any(
        not torch.equal(p.detach(), torch.zeros_like(p))
        for m in adapter_modules(t)
        for p in (m.B,)
    )
    assert changed, "adapters should have trained"
    for n, p in t.named_parameters():
        if n in frozen:
            assert torch.equal(p.detach(), frozen[n]), n


def test_adapter_persistence_names_roundtrip():
    t1 = make_teacher()
    inject(t1, LoRAConfig(rank=2), init_seed=0)
    gen = torch.Generator().manual_seed(2)
    with torch.no_grad():
        for m in adapter_modules(t1):
            m.A.normal_(generator=gen)
            m.B.normal_(generator=gen)
    state = adapter_state(t1)
    assert all(k.startswith("lora/") for k in state)
    assert any(k.endswith("/A") for k in state) and any(k.endswith("/B") for k in state)
    t2 = make_teacher()
    inject(t2, LoRAConfig(rank=2), init_seed=777)
    load_adapter_state(t2, state)
    for a, b in zip(adapter_parameters(t1), adapter_parameters(t2)):
        assert torch.equal(a.detach(), b.detach())


def test_gradients_flow_only_to_adapters():
    t = make_teacher()
    inject(t, LoRAConfig(rank=2), init_seed=0)
    x = torch.rand(1, 1, 32, 32)
    loss = t(x)[1].logits.square().mean()
    loss.backward()
    for n, p in t.named_parameters():
        if p.requires_grad:
            assert p.grad is not None, n
        else:
            assert p.grad is None, n
