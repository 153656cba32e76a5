from __future__ import annotations

import math

import pytest
import torch
import torchvision.transforms.functional as TF

from siamseg.augment import (
    GeometricAugConfig,
    GeometricParams,
    JitterParams,
    JitterStrengths,
    SelfTrainingAugConfig,
    SimAugConfig,
    apply_geometric,
    apply_jitter,
    class_mix,
    derive_seed,
    gaussian_blur,
    geometric_transform,
    make_views,
    photometric_jitter,
    replay_view,
    strong_transform,
)
from siamseg.core import IGNORE_INDEX
from siamseg.errors import AugmentationError, ShapeError


def _image(seed: int = 0, size: int = 16) -> torch.Tensor:
    return torch.rand(3, size, size, generator=torch.Generator().manual_seed(seed))


IDENTITY = SimAugConfig(
    crop_size=(16, 16),
    scale_range=(1.0, 1.0),
    jitter_prob=0.0,
    grayscale_prob=0.0,
    blur_prob=0.0,
    hflip_prob=0.0,
    vflip_prob=0.0,
)


# ---------------------------------------------------------------------------
# Views
# ---------------------------------------------------------------------------


def test_identity_pipeline_returns_input():
    x = _image()
    pair = make_views(x, IDENTITY, rng_seed=3)
    assert torch.equal(pair.view1, x)
    assert torch.equal(pair.view2, x)


def test_views_are_deterministic():
    x = _image()
    config = SimAugConfig(crop_size=(16, 16))
    a, b = make_views(x, config, 11), make_views(x, config, 11)
    assert torch.equal(a.view1, b.view1)
    assert torch.equal(a.view2, b.view2)
    assert a.provenance == b.provenance


def test_views_replay_from_provenance():
    x = _image()
    config = SimAugConfig(crop_size=(12, 12))
    pair = make_views(x, config, 5)
    assert torch.equal(replay_view(x, pair.provenance[0], config.crop_size), pair.view1)
    assert torch.equal(replay_view(x, pair.provenance[1], config.crop_size), pair.view2)
    assert pair.provenance[0].to_dict()["crop_side"] == pair.provenance[0].crop_side


def test_forced_jitter_and_blur_always_change_views():
    config = SimAugConfig(crop_size=(16, 16), jitter_prob=1.0, blur_prob=1.0)
    x = _image(1)
    for seed in range(100):
        pair = make_views(x, config, seed)
        assert (pair.view1 - x).abs().sum() > 0
        assert (pair.view2 - x).abs().sum() > 0
        assert (pair.view1 - pair.view2).abs().sum() > 0


def test_views_keep_shape_and_range():
    config = SimAugConfig(crop_size=(8, 8))
    x = _image(2)
    for seed in range(30):
        pair = make_views(x, config, seed)
        for view in (pair.view1, pair.view2):
            assert view.shape == (3, 8, 8)
            assert view.min() >= 0.0 and view.max() <= 1.0


def test_views_reject_batched_input():
    with pytest.raises(ShapeError):
        make_views(_image().unsqueeze(0), IDENTITY, 0)


def test_non_square_input_crops_its_short_edge():
    tall = torch.rand(3, 64, 32)
    for seed in range(20):
        pair = make_views(tall, SimAugConfig(crop_size=(32, 32)), seed)
        for view, params in zip((pair.view1, pair.view2), pair.provenance):
            assert view.shape == (3, 32, 32)
            assert params.crop_side <= 32
            assert params.crop_top + params.crop_side <= 64


def test_full_scale_on_a_strip_takes_the_whole_short_edge():
    narrow = torch.rand(3, 4, 100)
    pair = make_views(narrow, SimAugConfig(crop_size=(4, 4), scale_range=(1.0, 1.0)), 0)
    assert pair.provenance[0].crop_side == 4


def test_crop_below_one_pixel_fails():
    with pytest.raises(AugmentationError):
        make_views(torch.rand(3, 2, 2), SimAugConfig(crop_size=(2, 2), scale_range=(0.01, 0.01)), 0)


@pytest.mark.parametrize(
    "kwargs",
    [dict(jitter_prob=1.5), dict(scale_range=(0.9, 0.5)), dict(scale_range=(0.0, 1.0)), dict(blur_sigma=(0.0, 1.0))],
)
def test_sim_config_validation(kwargs):
    with pytest.raises(ValueError):
        SimAugConfig(**kwargs)


# ---------------------------------------------------------------------------
# Photometric primitives
# ---------------------------------------------------------------------------


def test_zero_strength_jitter_is_identity():
    x = _image()
    assert torch.equal(photometric_jitter(x, JitterStrengths(0, 0, 0, 0), 7), x)


def test_brightness_factor_scales_and_clamps():
    x = _image()
    out = apply_jitter(x, JitterParams(brightness=1.25))
    assert torch.allclose(out, (1.25 * x).clamp(0, 1), atol=1e-6)


def test_jitter_output_in_unit_range():
    for seed in range(20):
        out = photometric_jitter(_image(seed), JitterStrengths(), seed)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_jitter_commutes_with_flips():
    x = _image(4)
    params = JitterParams(brightness=1.1, contrast=0.8, saturation=1.2, hue=0.1, order=("hue", "contrast", "brightness", "saturation"))
    assert torch.allclose(apply_jitter(TF.hflip(x), params), TF.hflip(apply_jitter(x, params)), atol=1e-6)
    assert torch.allclose(apply_jitter(TF.vflip(x), params), TF.vflip(apply_jitter(x, params)), atol=1e-6)


def test_blur_leaves_constant_image():
    x = torch.full((3, 12, 12), 0.4)
    assert torch.allclose(gaussian_blur(x, (0.5, 1.0), 0), x, atol=1e-6)


def test_tiny_sigma_is_identity():
    x = _image()
    assert torch.equal(gaussian_blur(x, (0.05, 0.09), 0), x)


def test_point_blur_matches_dense_kernel():
    size, center = 15, 7
    x = torch.zeros(1, size, size, dtype=torch.float64)
    x[0, center, center] = 1.0
    out = gaussian_blur(x, (1.0, 1.0), 0)[0]

    g = [math.exp(-0.5 * d * d) for d in range(-3, 4)]
    total = sum(g)
    for i in range(size):
        for j in range(size):
            di, dj = i - center, j - center
            expected = g[di + 3] * g[dj + 3] / total**2 if abs(di) <= 3 and abs(dj) <= 3 else 0.0
            assert abs(out[i, j].item() - expected) < 1e-5


def test_strong_transform_is_seeded():
    config = SelfTrainingAugConfig(jitter_prob=1.0, blur_prob=1.0)
    x = _image()
    assert torch.equal(strong_transform(x, config, 9), strong_transform(x, config, 9))
    assert not torch.equal(strong_transform(x, config, 9), x)


# ---------------------------------------------------------------------------
# ClassMix
# ---------------------------------------------------------------------------


def test_single_class_source_takes_everything():
    src, tgt = _image(0, 8), _image(1, 8)
    label = torch.full((8, 8), 2, dtype=torch.long)
    pseudo = torch.zeros(8, 8, dtype=torch.long)
    mixed = class_mix(src, label, tgt, pseudo, 0)
    assert bool(mixed.mask.all())
    assert torch.equal(mixed.image, src)
    assert torch.equal(mixed.label, label)


def test_all_ignore_source_returns_target():
    src, tgt = _image(0, 8), _image(1, 8)
    label = torch.full((8, 8), IGNORE_INDEX, dtype=torch.long)
    pseudo = torch.ones(8, 8, dtype=torch.long)
    mixed = class_mix(src, label, tgt, pseudo, 0)
    assert not bool(mixed.mask.any())
    assert torch.equal(mixed.image, tgt)
    assert torch.equal(mixed.label, pseudo)


def test_four_classes_select_two_and_mix_exactly():
    src, tgt = _image(0, 8), _image(1, 8)
    label = torch.arange(64).reshape(8, 8) % 4
    pseudo = torch.randint(0, 4, (8, 8), generator=torch.Generator().manual_seed(0))
    for seed in range(10):
        mixed = class_mix(src, label, tgt, pseudo, seed)
        picked = torch.unique(label[mixed.mask])
        assert picked.numel() == 2
        assert torch.equal(mixed.mask, torch.isin(label, picked))
        for r in range(8):
            for c in range(8):
                if mixed.mask[r, c]:
                    assert torch.equal(mixed.image[:, r, c], src[:, r, c])
                    assert mixed.label[r, c] == label[r, c]
                else:
                    assert torch.equal(mixed.image[:, r, c], tgt[:, r, c])
                    assert mixed.label[r, c] == pseudo[r, c]


def test_ignore_pixels_never_selected():
    src, tgt = _image(0, 4), _image(1, 4)
    label = torch.tensor([[0, 0, IGNORE_INDEX, IGNORE_INDEX]] * 4)
    mixed = class_mix(src, label, tgt, torch.zeros(4, 4, dtype=torch.long), 0)
    assert bool(mixed.mask[:, :2].all())
    assert not bool(mixed.mask[:, 2:].any())


def test_class_mix_shape_checks():
    with pytest.raises(ShapeError):
        class_mix(_image(0, 8), torch.zeros(8, 8, dtype=torch.long), _image(1, 6), torch.zeros(6, 6, dtype=torch.long), 0)


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------


def test_derive_seed_is_stable_and_tag_sensitive():
    assert derive_seed(0, 5, 1, "views") == derive_seed(0, 5, 1, "views")
    assert derive_seed(0, 5, 1, "views") != derive_seed(0, 5, 1, "classmix")
    assert 0 <= derive_seed(123, 0, 0, "x") < 2**63


# ---------------------------------------------------------------------------
# Geometric training augmentation
# ---------------------------------------------------------------------------


def _blocks(size: int = 16) -> torch.Tensor:
    """Asymmetric 0/1 pattern of 4 x 4 blocks."""
    r = torch.arange(size).view(-1, 1) // 4
    c = torch.arange(size).view(1, -1) // 4
    return ((r + 2 * c) % 3 == 0).long()


@pytest.mark.parametrize("seed", range(10))
def test_upscaled_image_and_label_stay_aligned(seed):
    label = _blocks()
    image = label.float().expand(3, -1, -1).clone()
    config = GeometricAugConfig(enabled=True, ratio_range=(2.0, 2.0), hflip_prob=0.5)
    out_image, out_label = geometric_transform(image, label, config, seed)
    assert out_image.shape == image.shape
    assert out_label.shape == label.shape
    assert torch.equal(out_image[0] > 0.5, out_label == 1)


def test_flip_moves_image_and_label_together():
    label = _blocks()
    image = label.float().expand(3, -1, -1).clone()
    out_image, out_label = apply_geometric(image, label, GeometricParams(1.0, 0, 0, hflip=True))
    assert torch.equal(out_label, label.flip(-1))
    assert torch.allclose(out_image, image.flip(-1))


def test_downscale_pads_bottom_right_with_ignore():
    label = torch.zeros(16, 16, dtype=torch.long)
    image = torch.ones(3, 16, 16)
    out_image, out_label = apply_geometric(image, label, GeometricParams(0.5, 0, 0, hflip=True))
    assert (out_label[:8, :8] == 0).all()
    assert (out_label[8:, :] == IGNORE_INDEX).all()
    assert (out_label[:, 8:] == IGNORE_INDEX).all()
    assert torch.allclose(out_image[:, :8, :8], torch.ones(3, 8, 8))
    assert (out_image[:, 8:, :] == 0).all()


def test_upscaled_labels_keep_their_class_set():
    label = torch.arange(64).reshape(8, 8) % 5
    _, out = geometric_transform(torch.rand(3, 8, 8), label, GeometricAugConfig(ratio_range=(1.3, 1.7)), 3)
    assert set(out.unique().tolist()) <= set(range(5))


def test_geometric_transform_is_seeded_and_handles_unlabelled_tiles():
    image = _image(1)
    config = GeometricAugConfig(enabled=True)
    a, no_label = geometric_transform(image, None, config, 7)
    b, _ = geometric_transform(image, None, config, 7)
    assert no_label is None
    assert torch.equal(a, b)


@pytest.mark.parametrize("kwargs", [dict(ratio_range=(0.0, 1.0)), dict(ratio_range=(2.0, 1.0)), dict(hflip_prob=1.5)])
def test_geometric_config_validation(kwargs):
    with pytest.raises(ValueError):
        GeometricAugConfig(**kwargs)


def test_geometric_transform_shape_checks():
    with pytest.raises(ShapeError):
        geometric_transform(_image(), torch.zeros(8, 8, dtype=torch.long), GeometricAugConfig(), 0)
