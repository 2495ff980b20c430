import math

import numpy as np
import pytest
import torch

from segkd.data import TransferSet
from segkd.diffusion import (
    AugmentationSpec,
    DenoiserConfig,
    DiffusionSchedule,
    TransformerDenoiser,
    augment_base_set,
    equivalent_single_eps,
    evaluate_transfer,
    q_sample,
    q_sample_stepwise,
    sample,
    train_denoiser,
)
from segkd.errors import ValidationError
from segkd.shapes import make_shapes_dataset


# ---------------------------------------------------------------- schedule


def test_schedule_invariants():
    sched = DiffusionSchedule.linear(50)
    ab = sched.alpha_bars
    assert ab[0] == 1.0
    assert (np.diff(ab) < 0).all()  # strictly decreasing
    assert ((sched.alphas > 0) & (sched.alphas <= 1)).all()


def test_schedule_snr_strictly_decreasing():
    sched = DiffusionSchedule.linear(100)
    snrs = [sched.snr(t) for t in range(1, 101)]
    assert all(a > b for a, b in zip(snrs, snrs[1:]))


def test_schedule_validation():
    with pytest.raises(ValidationError):
        DiffusionSchedule(np.array([0.0, 0.1]))
    with pytest.raises(ValidationError):
        DiffusionSchedule(np.array([1.0]))
    with pytest.raises(ValidationError):
        DiffusionSchedule.linear(0)
    sched = DiffusionSchedule.linear(10)
    with pytest.raises(ValidationError):
        sched.alpha(0)
    with pytest.raises(ValidationError):
        sched.alpha(11)


def test_schedule_hash_stable():
    a = DiffusionSchedule.linear(20)
    b = DiffusionSchedule.linear(20)
    c = DiffusionSchedule.linear(21)
    assert a.hash() == b.hash() != c.hash()


# ---------------------------------------------------------------- q_sample


def test_q_sample_no_noise_schedule_keeps_x0():
    # alpha_t ~ 1 (betas tiny): x_t ~ x0 for all t
    sched = DiffusionSchedule(np.full(10, 1e-12))
    x0 = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    eps = torch.zeros_like(x0)
    for t in (1, 5, 10):
        out = q_sample(x0, t, eps, sched)
        assert torch.allclose(out, x0, atol=1e-9)


def test_q_sample_quarter_alpha_bar():
    # single step with beta = 0.75 -> alpha_bar = 0.25
    sched = DiffusionSchedule(np.array([0.75]))
    x0 = torch.rand(1, 1, 4, 4, dtype=torch.float64)
    eps = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    out = q_sample(x0, 1, eps, sched)
    want = 0.5 * x0 + math.sqrt(0.75) * eps
    assert torch.allclose(out, want, atol=1e-12)


def test_q_sample_t_out_of_range():
    sched = DiffusionSchedule.linear(10)
    x0 = torch.zeros(1, 1, 4, 4)
    with pytest.raises(ValidationError):
        q_sample(x0, 0, torch.zeros_like(x0), sched)
    with pytest.raises(ValidationError):
        q_sample(x0, 11, torch.zeros_like(x0), sched)


def test_closed_form_equals_stepwise_iteration():
    sched = DiffusionSchedule.linear(50)
    gen = torch.Generator().manual_seed(0)
    x0 = torch.rand(1, 1, 8, 8, dtype=torch.float64, generator=gen)
    for t in (1, 7, 25, 50):
        noises = [
            torch.randn(x0.shape, dtype=torch.float64, generator=gen) for _ in range(t)
        ]
        stepwise = q_sample_stepwise(x0, t, noises, sched)
        closed = q_sample(x0, t, equivalent_single_eps(t, noises, sched), sched)
        assert (stepwise - closed).abs().max().item() < 1e-6
        # deterministic part alone also matches
        zero = [torch.zeros_like(x0) for _ in range(t)]
        assert (
            q_sample_stepwise(x0, t, zero, sched)
            - q_sample(x0, t, torch.zeros_like(x0), sched)
        ).abs().max().item() < 1e-6


def test_q_sample_variance_matches_one_minus_alpha_bar():
    sched = DiffusionSchedule.linear(100)
    x0 = torch.full((10_000,), 0.5, dtype=torch.float64)
    gen = torch.Generator().manual_seed(1)
    for t in (10, 50, 100):
        eps = torch.randn(10_000, dtype=torch.float64, generator=gen)
        x_t = q_sample(x0, t, eps, sched)
        var = x_t.var(unbiased=True).item()
        want = 1.0 - sched.alpha_bar(t)
        assert abs(var - want) / want < 0.05


def test_q_sample_decorrelates_at_large_t():
    # default-range schedule at T=1000 has alpha_bar ~ 0
    sched = DiffusionSchedule.linear(1000)
    gen = torch.Generator().manual_seed(2)
    x0 = torch.rand(1000, dtype=torch.float64, generator=gen)
    eps = torch.randn(1000, dtype=torch.float64, generator=gen)
    x_t = q_sample(x0, 1000, eps, sched)
    corr = np.corrcoef(x0.numpy(), x_t.numpy())[0, 1]
    assert abs(corr) < 0.05


# ---------------------------------------------------------------- denoiser


def tiny_images(n=8, size=16):
    ds = make_shapes_dataset(n, size=size, seed=5)
    return ds.images_array()


def test_train_denoiser_zero_steps_keeps_init():
    cfg = DenoiserConfig(image_size=16, patch_size=4, dim=32, depth=1, heads=2)
    model, losses = train_denoiser(tiny_images(), cfg, DiffusionSchedule.linear(10), 0, seed=3)
    assert losses == []
    torch.manual_seed(0)
    from segkd.seeding import seed_everything

    seed_everything(3, "denoiser_init")
    ref = TransformerDenoiser(cfg)
    for a, b in zip(model.parameters(), ref.parameters()):
        assert torch.equal(a.detach(), b.detach())


def test_train_denoiser_deterministic():
    cfg = DenoiserConfig(image_size=16, patch_size=4, dim=32, depth=1, heads=2)
    sched = DiffusionSchedule.linear(10)
    _, l1 = train_denoiser(tiny_images(), cfg, sched, 10, seed=4)
    _, l2 = train_denoiser(tiny_images(), cfg, sched, 10, seed=4)
    assert l1 == l2


def test_train_denoiser_rejects_empty():
    cfg = DenoiserConfig(image_size=16, patch_size=4)
    with pytest.raises(ValidationError):
        train_denoiser(np.zeros((0, 16, 16, 1), dtype=np.float32), cfg, DiffusionSchedule.linear(10), 5, 0)


# ---------------------------------------------------------------- sampling


def test_sample_count_zero_empty():
    cfg = DenoiserConfig(image_size=16, patch_size=4, dim=32, depth=1, heads=2)
    torch.manual_seed(0)
    model = TransformerDenoiser(cfg)
    ts = sample(model, DiffusionSchedule.linear(5), 0, seed=0)
    assert ts.size == 0
    assert ts.provenance == "diffusion_sampled"


def test_sample_deterministic_and_clipped():
    cfg = DenoiserConfig(image_size=16, patch_size=4, dim=32, depth=1, heads=2)
    torch.manual_seed(0)
    model = TransformerDenoiser(cfg)
    sched = DiffusionSchedule.linear(5)
    a = sample(model, sched, 2, seed=9)
    b = sample(model, sched, 2, seed=9)
    for x, y in zip(a.images, b.images):
        np.testing.assert_array_equal(x, y)
        assert x.min() >= 0.0 and x.max() <= 1.0


class PointMassOracle(torch.nn.Module):
    """Exact noise predictor for a single-image data distribution."""

    def __init__(self, target: torch.Tensor, sched: DiffusionSchedule):
        super().__init__()
        self.register_buffer("target", target)
        self.sched = sched

    def forward(self, x_t, t):
        ab = self.sched.alpha_bar(int(t[0]))
        return (x_t - math.sqrt(ab) * self.target) / math.sqrt(1.0 - ab)


def test_sample_with_oracle_denoiser_recovers_target():
    sched = DiffusionSchedule(np.linspace(1e-5, 1e-4, 20))
    target = torch.from_numpy(tiny_images(1)[0]).permute(2, 0, 1)[None].float()
    target = target.clamp(0.2, 0.8)  # keep away from the [0,1] clip
    oracle = PointMassOracle(target, sched)
    ts = sample(oracle, sched, 3, seed=11, image_size=16, in_channels=1)
    ref = target[0].permute(1, 2, 0).numpy()
    res = evaluate_transfer(ts, [ref])
    assert res["mean_psnr"] > 30.0


# ---------------------------------------------------------------- augmentation


def test_augment_identity_spec_copies():
    ds = make_shapes_dataset(3, size=16, seed=1)
    spec = AugmentationSpec((0.0, 0.0), (1.0, 1.0), (0.0, 0.0), (0.0, 0.0), count=5)
    assert spec.is_identity()
    ts = augment_base_set(ds, spec, seed=0)
    assert ts.size == 5
    np.testing.assert_array_equal(ts.images[0], ds.samples[0].image)
    np.testing.assert_array_equal(ts.images[3], ds.samples[0].image)  # wraps around


def test_augment_right_angle_rotation_exact():
    ds = make_shapes_dataset(1, size=16, seed=2)
    spec = AugmentationSpec((90.0, 90.0), (1.0, 1.0), (0.0, 0.0), (0.0, 0.0), count=1)
    ts = augment_base_set(ds, spec, seed=0)
    src = ds.samples[0].image
    assert not np.array_equal(ts.images[0], src)
    restored = np.rot90(ts.images[0], k=-1, axes=(0, 1))
    np.testing.assert_array_equal(restored, src)


def test_augment_deterministic():
    ds = make_shapes_dataset(4, size=16, seed=3)
    spec = AugmentationSpec(count=10)
    a = augment_base_set(ds, spec, seed=7)
    b = augment_base_set(ds, spec, seed=7)
    for x, y in zip(a.images, b.images):
        np.testing.assert_array_equal(x, y)
    assert a.provenance == "augmented"


def test_augment_degenerate_range_rejected():
    with pytest.raises(ValidationError):
        AugmentationSpec(rotation_deg=(10.0, -10.0))


# ---------------------------------------------------------------- quality


def test_evaluate_transfer_identical_sets():
    imgs = [np.random.default_rng(0).random((8, 8, 1)).astype(np.float32) for _ in range(3)]
    ts = TransferSet([i.copy() for i in imgs], "augmented")
    res = evaluate_transfer(ts, imgs)
    assert res["mean_mse"] == 0.0
    assert math.isinf(res["mean_psnr"])


def test_evaluate_transfer_uniform_offset():
    ref = np.full((8, 8, 1), 0.4, dtype=np.float32)
    gen = ref + 10.0 / 255.0
    res = evaluate_transfer([gen], [ref])
    assert res["mean_mse"] == pytest.approx(100.0, rel=1e-6)
    assert res["mean_psnr"] == pytest.approx(28.131, abs=1e-3)


def test_evaluate_transfer_picks_nearest_reference():
    ref_far = np.zeros((4, 4, 1), dtype=np.float32)
    ref_near = np.full((4, 4, 1), 0.5, dtype=np.float32)
    gen = np.full((4, 4, 1), 0.52, dtype=np.float32)
    res = evaluate_transfer([gen], [ref_far, ref_near])
    want_mse = float(np.mean((0.02 * 255.0) ** 2))
    assert res["mean_mse"] == pytest.approx(want_mse, rel=1e-5)
