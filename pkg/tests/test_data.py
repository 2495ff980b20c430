import numpy as np
import pytest
from PIL import Image

from segkd.data import (
    LabeledDataset,
    SegmentationSample,
    TransferSet,
    content_hash,
    load_dataset,
    load_transfer_set,
    save_dataset,
    save_transfer_set,
    subset_labels,
)
from segkd.errors import ValidationError
from segkd.shapes import make_shapes_dataset


def write_pair(root, sid, size=8, mask_value=1):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(abs(hash(sid)) % 2**32)
    img = (rng.random((size, size)) * 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(root / "images" / f"{sid}.png")
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[2:4, 2:4] = mask_value
    Image.fromarray(mask, mode="L").save(root / "masks" / f"{sid}.png")


def test_load_dataset_counts_and_order(tmp_path):
    for sid in ["b", "a", "c"]:
        write_pair(tmp_path, sid)
    ds = load_dataset(tmp_path, class_count=2)
    assert len(ds) == 3
    assert ds.ids == ["a", "b", "c"]
    assert ds.samples[0].image.dtype == np.float32
    assert ds.samples[0].image.max() <= 1.0


def test_load_dataset_missing_mask_names_orphan(tmp_path):
    write_pair(tmp_path, "a")
    img = (np.zeros((8, 8)) * 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(tmp_path / "images" / "orphan.png")
    with pytest.raises(ValidationError, match="orphan"):
        load_dataset(tmp_path, class_count=2)


def test_load_dataset_missing_image_names_orphan(tmp_path):
    write_pair(tmp_path, "a")
    Image.fromarray(np.zeros((8, 8), dtype=np.uint8), mode="L").save(
        tmp_path / "masks" / "lonely.png"
    )
    with pytest.raises(ValidationError, match="lonely"):
        load_dataset(tmp_path, class_count=2)


def test_load_dataset_mask_value_out_of_range(tmp_path):
    write_pair(tmp_path, "a", mask_value=5)
    with pytest.raises(ValidationError, match=r"5.*4|4.*5"):
        load_dataset(tmp_path, class_count=4)


def test_dataset_listing_is_pure_function_of_names(tmp_path):
    for sid in ["x", "m", "q", "a"]:
        write_pair(tmp_path, sid)
    ds1 = load_dataset(tmp_path, 2)
    ds2 = load_dataset(tmp_path, 2)
    assert ds1.ids == ds2.ids
    for s1, s2 in zip(ds1.samples, ds2.samples):
        np.testing.assert_array_equal(s1.image, s2.image)


def test_sample_invariants():
    img = np.zeros((4, 4, 1), dtype=np.float32)
    bad_mask = np.zeros((5, 4), dtype=np.int64)
    with pytest.raises(ValidationError):
        SegmentationSample(img, bad_mask, "s").validate(2)
    nan_img = img.copy()
    nan_img[0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        SegmentationSample(nan_img, np.zeros((4, 4), dtype=np.int64), "s").validate(2)


# ---------------------------------------------------------------- subsets


def make_mem_dataset(n, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        img = rng.random((8, 8, 1)).astype(np.float32)
        mask = (rng.random((8, 8)) < 0.3).astype(np.int64)
        samples.append(SegmentationSample(img, mask, f"s{i:03d}"))
    return LabeledDataset(samples, 2)


def test_subset_full_budget_identity():
    ds = make_mem_dataset(6)
    sub = subset_labels(ds, 6, seed=1)
    assert sub.ids == ds.ids


def test_subset_deterministic():
    ds = make_mem_dataset(10)
    a = subset_labels(ds, 1, seed=42)
    b = subset_labels(ds, 1, seed=42)
    assert a.ids == b.ids
    assert len(a) == 1


def test_subset_varies_across_seeds():
    ds = make_mem_dataset(10)
    subsets = {tuple(subset_labels(ds, 5, seed=s).ids) for s in range(10)}
    assert all(len(t) == 5 for t in subsets)
    assert len(subsets) >= 2


def test_subset_budget_monotone_nesting():
    ds = make_mem_dataset(12)
    for b in range(1, 12):
        small = set(subset_labels(ds, b, seed=7).ids)
        big = set(subset_labels(ds, b + 1, seed=7).ids)
        assert small <= big


def test_subset_independent_of_input_order():
    ds = make_mem_dataset(8)
    shuffled = LabeledDataset(list(reversed(ds.samples)), 2)
    assert subset_labels(ds, 3, seed=5).ids == subset_labels(shuffled, 3, seed=5).ids


def test_subset_budget_out_of_range():
    ds = make_mem_dataset(4)
    with pytest.raises(ValidationError):
        subset_labels(ds, 0, seed=1)
    with pytest.raises(ValidationError):
        subset_labels(ds, 5, seed=1)


# ---------------------------------------------------------------- transfer sets


def test_transfer_set_shape_consistency():
    good = [np.zeros((4, 4, 1), dtype=np.float32)] * 3
    ts = TransferSet(good, "augmented")
    assert ts.size == 3
    with pytest.raises(ValidationError):
        TransferSet(
            [np.zeros((4, 4, 1), dtype=np.float32), np.zeros((5, 4, 1), dtype=np.float32)],
            "augmented",
        )
    with pytest.raises(ValidationError):
        TransferSet(good, "downloaded")


def test_transfer_set_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = [rng.random((8, 8, 1)).astype(np.float32) for _ in range(4)]
    ts = TransferSet(imgs, "diffusion_sampled", seed=9, schedule_hash="abc")
    save_transfer_set(ts, tmp_path / "ts")
    back = load_transfer_set(tmp_path / "ts")
    assert back.size == 4
    assert back.provenance == "diffusion_sampled"
    assert back.seed == 9
    # 8-bit quantization bound on the png round trip
    for a, b in zip(ts.images, back.images):
        assert np.abs(a - b).max() <= 0.5 / 255.0 + 1e-9


def test_dataset_save_load_roundtrip(tmp_path):
    ds = make_shapes_dataset(5, size=32, seed=3)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d", ds.class_count)
    assert back.ids == ds.ids
    assert back.class_names == ds.class_names
    np.testing.assert_array_equal(back.masks_array(), ds.masks_array())
    assert np.abs(back.images_array() - ds.images_array()).max() <= 0.5 / 255.0 + 1e-9


def test_shapes_dataset_deterministic_and_valid(tmp_path):
    a = make_shapes_dataset(6, size=32, seed=11)
    b = make_shapes_dataset(6, size=32, seed=11)
    np.testing.assert_array_equal(a.images_array(), b.images_array())
    np.testing.assert_array_equal(a.masks_array(), b.masks_array())
    # every sample carries both foreground classes somewhere
    masks = a.masks_array()
    assert (masks == 1).any()
    assert (masks == 2).any()
    save_dataset(a, tmp_path / "d1")
    save_dataset(b, tmp_path / "d2")
    assert content_hash(tmp_path / "d1") == content_hash(tmp_path / "d2")
