"""
Patch Sampler for the CMSR super-resolution engine
Draws random augmented patch pairs from the single training pair.

A patch footprint is an affine map (scale, rotation, shear) around a centre
point. Both the modality patch (s x s) and the guide patch (rs x rs) are read
through the same footprint map, one lattice r times finer than the other, so
the two patches cover the same area of the scene. Cropping is done by grid
sampling, which keeps the guide patch differentiable w.r.t. the warped guide.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from errors import ConfigError, PatchSamplingError, ShapeError
from tensor_autodiff import Tensor, grid_sample_bilinear

logger = logging.getLogger(__name__)

MAX_REJECTIONS = 100
MIN_PATCH_SIZE = 8


@dataclass
class AugmentationRanges:
    """
    Uniform sampling ranges for the footprint transform.

    `translation` is the fraction of the valid placement range used for the
    footprint centre: 1.0 spans the whole image, 0.0 always takes the centre crop.
    """
    scale: Tuple[float, float] = (0.9, 1.1)
    rotation: Tuple[float, float] = (-15.0, 15.0)  # degrees
    shear: Tuple[float, float] = (-0.1, 0.1)
    translation: float = 1.0

    def validate(self) -> None:
        for name in ("scale", "rotation", "shear"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is empty: ({lo}, {hi})")
        if self.scale[0] <= 0:
            raise ConfigError(f"scale range must be positive, got {self.scale}")
        if not 0.0 <= self.translation <= 1.0:
            raise ConfigError(f"translation fraction must be in [0, 1], got {self.translation}")

    @classmethod
    def none(cls) -> "AugmentationRanges":
        """Identity footprint at the image centre."""
        return cls(scale=(1.0, 1.0), rotation=(0.0, 0.0), shear=(0.0, 0.0), translation=0.0)


@dataclass
class AugmentationParams:
    """Footprint transform; (tx, ty) is the footprint centre in normalized coordinates."""
    scale: float = 1.0
    rotation: float = 0.0
    shear: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def linear_map(self) -> np.ndarray:
        """2x2 map from patch offsets to image offsets, both in modality pixels."""
        theta = math.radians(self.rotation)
        rot = np.array([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]])
        shear = np.array([[1.0, self.shear], [0.0, 1.0]])
        return self.scale * rot @ shear


@dataclass
class PatchPair:
    modality_patch: Tensor  # 1 x 1 x s x s
    guide_patch: Tensor     # 1 x 3 x rs x rs


# ==================== Footprint Geometry ====================

def effective_patch_size(patch_size: int, h: int, w: int, r: int) -> int:
    """
    Clamp the configured modality patch side to the image.

    The side is at most half the shorter image side and a multiple of r so the
    downsampling-based scheme can shrink it exactly.
    """
    s = min(patch_size, min(h, w) // 2)
    s -= s % r
    if s < max(MIN_PATCH_SIZE, 2 * r):
        raise PatchSamplingError(
            f"image {h}x{w} too small for patch training at ratio {r} "
            f"(effective patch side {s})")
    return s


def footprint_half_extent(linear: np.ndarray, s: int) -> Tuple[float, float]:
    """Half-width and half-height (modality pixels) of the transformed s x s footprint."""
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64) * (s / 2.0)
    mapped = corners @ linear.T
    return float(np.abs(mapped[:, 0]).max()), float(np.abs(mapped[:, 1]).max())


def center_translation(h: int, w: int, s: int) -> Tuple[float, float]:
    """Normalized centre of the pixel-aligned centre crop."""
    left, top = (w - s) // 2, (h - s) // 2
    cx = left + (s - 1) / 2.0
    cy = top + (s - 1) / 2.0
    return 2.0 * (cx + 0.5) / w - 1.0, 2.0 * (cy + 0.5) / h - 1.0


def footprint_in_bounds(aug: AugmentationParams, s: int, h: int, w: int) -> bool:
    ex, ey = footprint_half_extent(aug.linear_map(), s)
    tol = 1e-9
    return (abs(aug.tx) + 2.0 * ex / w <= 1.0 + tol
            and abs(aug.ty) + 2.0 * ey / h <= 1.0 + tol)


def sample_augmentation(rng: np.random.Generator, ranges: AugmentationRanges,
                        patch_size: int, h: int, w: int) -> AugmentationParams:
    """
    Draw one footprint transform whose footprint lies inside the image.

    Args:
        rng: Generator owned by the training session
        ranges: Sampling ranges
        patch_size: Modality patch side s
        h, w: Modality image size

    Raises:
        PatchSamplingError: after MAX_REJECTIONS consecutive rejections
    """
    cx, cy = center_translation(h, w, patch_size)
    for attempt in range(MAX_REJECTIONS):
        scale = rng.uniform(*ranges.scale)
        rotation = rng.uniform(*ranges.rotation)
        shear = rng.uniform(*ranges.shear)
        aug = AugmentationParams(scale, rotation, shear, cx, cy)
        ex, ey = footprint_half_extent(aug.linear_map(), patch_size)
        limit_x = 1.0 - 2.0 * ex / w
        limit_y = 1.0 - 2.0 * ey / h
        if limit_x < 0 or limit_y < 0 or abs(cx) > limit_x or abs(cy) > limit_y:
            logger.debug("Rejected augmentation %d (extent %.1fx%.1f px)", attempt, ex, ey)
            continue
        frac = ranges.translation
        aug.tx = rng.uniform(cx + frac * (-limit_x - cx), cx + frac * (limit_x - cx))
        aug.ty = rng.uniform(cy + frac * (-limit_y - cy), cy + frac * (limit_y - cy))
        return aug
    raise PatchSamplingError(
        f"no valid {patch_size}x{patch_size} footprint in a {h}x{w} image after "
        f"{MAX_REJECTIONS} draws; reduce the patch size or the scale range")


# ==================== Extraction ====================

def footprint_grid(aug: AugmentationParams, side: int, step: float,
                   h: int, w: int) -> np.ndarray:
    """
    Normalized sampling grid (1, 2, side, side) of a footprint.

    `step` is the lattice spacing in modality pixels (1 for the modality
    patch, 1/r for the guide patch); `h`, `w` is the modality image size.
    """
    offsets = (np.arange(side, dtype=np.float64) - (side - 1) / 2.0) * step
    ox, oy = np.meshgrid(offsets, offsets)
    linear = aug.linear_map()
    dx = linear[0, 0] * ox + linear[0, 1] * oy
    dy = linear[1, 0] * ox + linear[1, 1] * oy
    return np.stack([aug.tx + 2.0 * dx / w, aug.ty + 2.0 * dy / h])[None]


def extract_pair(modality: Tensor, warped_guide: Tensor, aug: AugmentationParams,
                 patch_size: int, r: int) -> PatchPair:
    """
    Crop corresponding patches from the modality image and the warped guide.

    Modality pixel (i, j) and the r x r guide block starting at (ri, rj) map
    to the same scene point.
    """
    h, w = modality.shape[2:]
    if warped_guide.shape[2:] != (r * h, r * w):
        raise ShapeError(
            f"guide {warped_guide.shape[2:]} is not {r}x modality {modality.shape[2:]}")
    if patch_size < MIN_PATCH_SIZE:
        raise PatchSamplingError(f"patch side must be >= {MIN_PATCH_SIZE}, got {patch_size}")
    if not footprint_in_bounds(aug, patch_size, h, w):
        raise PatchSamplingError(f"footprint {aug} leaves the image")

    dtype = modality.dtype
    modality_grid = Tensor(footprint_grid(aug, patch_size, 1.0, h, w), dtype=dtype)
    guide_grid = Tensor(footprint_grid(aug, r * patch_size, 1.0 / r, h, w), dtype=dtype)
    return PatchPair(
        modality_patch=grid_sample_bilinear(modality, modality_grid),
        guide_patch=grid_sample_bilinear(warped_guide, guide_grid),
    )
