"""
Synthetic Scenes for the CMSR super-resolution engine
Deterministic test pairs with known ground truth: a smooth single-band
"modality" scene, an RGB guide of the same scene (different contrast, extra
RGB-only texture, optionally displaced by a known rigid motion) and the
HR modality image to score against.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import expit

from image_io import ImageBuffer, ImagePair
from tensor_autodiff import DEFAULT_DTYPE, Tensor, no_grad, resize_bicubic


@dataclass
class Blob:
    """Soft-edged ellipse in normalized scene coordinates."""
    cx: float
    cy: float
    rx: float
    ry: float
    angle: float
    value: float


@dataclass
class SceneParams:
    blobs: List[Blob] = field(default_factory=list)
    gradient: Tuple[float, float, float] = (0.0, 0.0, 0.3)
    softness: float = 0.04

    @classmethod
    def random(cls, seed: int, n_blobs: int = 6) -> "SceneParams":
        rng = np.random.default_rng(seed)
        blobs = [
            Blob(cx=rng.uniform(-0.7, 0.7), cy=rng.uniform(-0.7, 0.7),
                 rx=rng.uniform(0.12, 0.4), ry=rng.uniform(0.12, 0.4),
                 angle=rng.uniform(0.0, math.pi), value=rng.uniform(-0.5, 0.6))
            for _ in range(n_blobs)
        ]
        gradient = (rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), rng.uniform(0.3, 0.5))
        return cls(blobs, gradient)


@dataclass
class RigidMotion:
    """Guide displacement: rotation (degrees) about the centre then shift (HR pixels)."""
    shift: Tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0


@dataclass
class BenchmarkPair:
    pair: ImagePair
    ground_truth: ImageBuffer
    true_grid: np.ndarray  # (1, 2, H, W) grid aligning the guide to the modality
    scene: SceneParams


# ==================== Rendering ====================

def _pixel_offsets(h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel-centre offsets from the image centre."""
    u = np.arange(w) - (w - 1) / 2.0
    v = np.arange(h) - (h - 1) / 2.0
    return np.meshgrid(u, v)


def _move(u: np.ndarray, v: np.ndarray, motion: RigidMotion) -> Tuple[np.ndarray, np.ndarray]:
    theta = math.radians(motion.rotation)
    c, s = math.cos(theta), math.sin(theta)
    return c * u - s * v + motion.shift[0], s * u + c * v + motion.shift[1]


def scene_value(params: SceneParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Scene intensity at normalized coordinates, clipped to [0, 1]."""
    gx, gy, g0 = params.gradient
    value = gx * x + gy * y + g0
    for b in params.blobs:
        c, s = math.cos(b.angle), math.sin(b.angle)
        dx, dy = x - b.cx, y - b.cy
        ex = (c * dx + s * dy) / b.rx
        ey = (-s * dx + c * dy) / b.ry
        radius = np.sqrt(ex * ex + ey * ey)
        value = value + b.value * expit((1.0 - radius) / params.softness)
    return np.clip(value, 0.0, 1.0)


def render_scene(params: SceneParams, h: int, w: int,
                 motion: Optional[RigidMotion] = None) -> np.ndarray:
    """H x W modality rendering; `motion` displaces the sampling positions."""
    u, v = _pixel_offsets(h, w)
    if motion is not None:
        u, v = _move(u, v, motion)
    return scene_value(params, 2.0 * u / w, 2.0 * v / h)


def render_guide(params: SceneParams, h: int, w: int, motion: Optional[RigidMotion] = None,
                 texture: float = 0.15, texture_period: float = 3.0) -> np.ndarray:
    """
    H x W x 3 guide of the same scene.

    Red follows the scene, green is a compressed copy and blue is inverted
    (cross-modality contrast). Green and blue also carry a fine stripe
    texture that does not exist in the modality.
    """
    scene = render_scene(params, h, w, motion)
    u, v = _pixel_offsets(h, w)
    if motion is not None:
        u, v = _move(u, v, motion)
    stripes = texture * np.sin(2.0 * math.pi * (u + 0.5 * v) / texture_period)
    red = scene
    green = 0.7 * scene + 0.15 + stripes
    blue = 1.0 - 0.8 * scene + 0.5 * stripes
    return np.clip(np.stack([red, green, blue], axis=-1), 0.0, 1.0)


def noise_guide(h: int, w: int, seed: int) -> np.ndarray:
    """Uncorrelated uniform RGB noise."""
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(h, w, 3))


def true_alignment_grid(h: int, w: int, motion: RigidMotion) -> np.ndarray:
    """
    Normalized grid G with guide(G(x)) = scene(x) for a guide rendered with `motion`.
    """
    u, v = _pixel_offsets(h, w)
    theta = math.radians(motion.rotation)
    c, s = math.cos(theta), math.sin(theta)
    du, dv = u - motion.shift[0], v - motion.shift[1]
    su, sv = c * du + s * dv, -s * du + c * dv
    return np.stack([2.0 * su / w, 2.0 * sv / h])[None]


def downscale(hr: np.ndarray, r: int) -> np.ndarray:
    """Antialiased bicubic reduction of an H x W image."""
    with no_grad():
        t = Tensor(hr[None, None])
        return resize_bicubic(t, hr.shape[0] // r, hr.shape[1] // r).data[0, 0]


def make_benchmark_pair(h: int = 64, w: int = 64, r: int = 2, seed: int = 0,
                        motion: Optional[RigidMotion] = None, texture: float = 0.15,
                        noise: bool = False) -> BenchmarkPair:
    """
    Build an LR modality (h x w), an HR guide (rh x rw) and the HR ground truth.

    Args:
        h, w: LR modality size
        r: Scale ratio
        seed: Scene seed
        motion: Known guide displacement (HR pixels)
        texture: Amplitude of the RGB-only stripes
        noise: Replace the guide with uncorrelated noise
    """
    motion = motion or RigidMotion()
    params = SceneParams.random(seed)
    gt = render_scene(params, r * h, r * w)
    lr = np.clip(downscale(gt, r), 0.0, 1.0)
    if noise:
        guide = noise_guide(r * h, r * w, seed + 1)
    else:
        guide = render_guide(params, r * h, r * w, motion, texture)
    pair = ImagePair(ImageBuffer(lr.astype(DEFAULT_DTYPE)),
                     ImageBuffer(guide.astype(DEFAULT_DTYPE)), r)
    return BenchmarkPair(pair, ImageBuffer(gt.astype(DEFAULT_DTYPE)),
                         true_alignment_grid(r * h, r * w, motion), params)
