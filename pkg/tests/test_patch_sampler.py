import numpy as np
import pytest

from deform import DeformationStack, apply_deformation
from errors import PatchSamplingError, ShapeError
from patch_sampler import (AugmentationParams, AugmentationRanges, center_translation,
                           effective_patch_size, extract_pair, sample_augmentation)
from tensor_autodiff import Tensor, backward, l1_loss, parameter


def ramp_pair(h, w, r, a=0.013, b=-0.007):
    """Guide ramp and its r x r block-mean modality, both linear in position."""
    gy, gx = np.mgrid[0:r * h, 0:r * w].astype(np.float64)
    guide = 0.5 + a * gx + b * gy
    modality = guide.reshape(h, r, w, r).mean(axis=(1, 3))
    return (Tensor(modality[None, None], dtype=np.float64),
            Tensor(np.repeat(guide[None, None], 3, axis=1), dtype=np.float64))


# ==================== Extraction ====================

def test_identity_footprint_is_the_centre_crop(rng):
    h, w, r, s = 20, 26, 2, 8
    modality = Tensor(rng.uniform(size=(1, 1, h, w)))
    guide = Tensor(rng.uniform(size=(1, 3, r * h, r * w)))
    aug = sample_augmentation(rng, AugmentationRanges.none(), s, h, w)
    pair = extract_pair(modality, guide, aug, s, r)

    top, left = (h - s) // 2, (w - s) // 2
    assert np.abs(pair.modality_patch.data[0, 0] - modality.data[0, 0, top:top + s, left:left + s]).max() < 1e-5
    expected_guide = guide.data[0, :, r * top:r * (top + s), r * left:r * (left + s)]
    assert np.abs(pair.guide_patch.data[0] - expected_guide).max() < 1e-5


def test_guide_blocks_match_modality_pixels(rng):
    h, w, r, s = 24, 24, 3, 8
    modality, guide = ramp_pair(h, w, r)
    ranges = AugmentationRanges(translation=0.5)
    for _ in range(20):
        aug = sample_augmentation(rng, ranges, s, h, w)
        pair = extract_pair(modality, guide, aug, s, r)
        blocks = pair.guide_patch.data[0, 0].reshape(s, r, s, r).mean(axis=(1, 3))
        assert np.abs(blocks - pair.modality_patch.data[0, 0]).max() < 1e-9


def test_patch_shapes(rng):
    modality = Tensor(rng.uniform(size=(1, 1, 30, 40)))
    guide = Tensor(rng.uniform(size=(1, 3, 120, 160)))
    aug = sample_augmentation(rng, AugmentationRanges(), 12, 30, 40)
    pair = extract_pair(modality, guide, aug, 12, 4)
    assert pair.modality_patch.shape == (1, 1, 12, 12)
    assert pair.guide_patch.shape == (1, 3, 48, 48)


def test_extract_rejects_bad_inputs(rng):
    modality = Tensor(rng.uniform(size=(1, 1, 16, 16)))
    guide = Tensor(rng.uniform(size=(1, 3, 32, 32)))
    with pytest.raises(ShapeError):
        extract_pair(modality, Tensor(np.zeros((1, 3, 30, 32))), AugmentationParams(), 8, 2)
    with pytest.raises(PatchSamplingError):
        extract_pair(modality, guide, AugmentationParams(tx=0.9), 8, 2)


def test_guide_patch_carries_gradient_to_the_deformation(rng):
    h, w, r, s = 16, 16, 2, 8
    modality = Tensor(rng.uniform(size=(1, 1, h, w)))
    stack = DeformationStack.create(cells=(2, 2), tps_k=3)
    warped = apply_deformation(stack, Tensor(rng.uniform(size=(1, 3, r * h, r * w))))
    aug = sample_augmentation(rng, AugmentationRanges(), s, h, w)
    pair = extract_pair(modality, warped, aug, s, r)
    target = Tensor(rng.uniform(size=pair.guide_patch.shape))
    backward(l1_loss(pair.guide_patch, target))
    assert np.abs(stack.affine.matrix.grad).sum() > 0


def test_guide_patch_gradient_reaches_the_image(rng):
    guide = parameter(rng.uniform(size=(1, 3, 32, 32)))
    modality = Tensor(rng.uniform(size=(1, 1, 16, 16)))
    aug = sample_augmentation(rng, AugmentationRanges(), 8, 16, 16)
    pair = extract_pair(modality, guide, aug, 8, 2)
    backward(l1_loss(pair.guide_patch, Tensor(np.zeros(pair.guide_patch.shape))))
    assert np.count_nonzero(guide.grad) > 0


# ==================== Sampling ====================

def test_sampling_is_deterministic_per_seed():
    draws = [sample_augmentation(np.random.default_rng(7), AugmentationRanges(), 8, 32, 32)
             for _ in range(2)]
    assert draws[0] == draws[1]


def test_rotation_is_centred_on_zero(rng):
    rotations = [sample_augmentation(rng, AugmentationRanges(), 8, 64, 64).rotation
                 for _ in range(10000)]
    assert abs(np.mean(rotations)) < 0.5
    assert -15.0 <= min(rotations) and max(rotations) <= 15.0


def test_impossible_footprint_raises(rng):
    with pytest.raises(PatchSamplingError, match="100 draws"):
        sample_augmentation(rng, AugmentationRanges(scale=(1.5, 2.0)), 30, 32, 32)


def test_zero_translation_stays_at_the_centre(rng):
    ranges = AugmentationRanges(translation=0.0)
    aug = sample_augmentation(rng, ranges, 8, 21, 30)
    assert (aug.tx, aug.ty) == pytest.approx(center_translation(21, 30, 8))


def test_effective_patch_size():
    assert effective_patch_size(32, 40, 60, 4) == 20
    assert effective_patch_size(32, 20, 20, 2) == 10
    assert effective_patch_size(16, 100, 100, 3) == 15
    with pytest.raises(PatchSamplingError):
        effective_patch_size(32, 12, 12, 4)
