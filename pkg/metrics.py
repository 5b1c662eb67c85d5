"""
Quality Metrics for the CMSR super-resolution engine
PSNR and SSIM on single-channel images in [0, 1], plus report records.
"""

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
from scipy.signal import correlate2d

from errors import ShapeError
from image_io import ImageBuffer

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class QualityReport:
    name: str
    psnr: float
    ssim: float

    def to_dict(self) -> Dict:
        return asdict(self)


def _plane(img: Union[ImageBuffer, np.ndarray]) -> np.ndarray:
    data = img.data if isinstance(img, ImageBuffer) else np.asarray(img)
    if data.ndim == 3:
        if data.shape[2] != 1:
            raise ShapeError(f"metrics need a single-channel image, got {data.shape[2]} channels")
        data = data[:, :, 0]
    if data.ndim != 2:
        raise ShapeError(f"metrics need a 2-D image, got shape {data.shape}")
    return data.astype(np.float64)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image size mismatch: {a.shape} vs {b.shape}")


def psnr(a: Union[ImageBuffer, np.ndarray], b: Union[ImageBuffer, np.ndarray],
         peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical images give math.inf."""
    x, y = _plane(a), _plane(b)
    _check_pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(a: Union[ImageBuffer, np.ndarray], b: Union[ImageBuffer, np.ndarray],
         window_size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         k1: float = SSIM_K1, k2: float = SSIM_K2, peak: float = 1.0) -> float:
    """Mean SSIM over every position where the Gaussian window fits inside the image."""
    x, y = _plane(a), _plane(b)
    _check_pair(x, y)
    if min(x.shape) < window_size:
        raise ShapeError(f"image {x.shape} smaller than the {window_size}x{window_size} SSIM window")

    window = gaussian_window(window_size, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2

    def filt(z: np.ndarray) -> np.ndarray:
        return correlate2d(z, window, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    numerator = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(numerator / denominator))


# ==================== Reports ====================

def evaluate_pair(sr: ImageBuffer, gt: ImageBuffer, name: str = "image") -> QualityReport:
    return QualityReport(name, psnr(sr, gt), ssim(sr, gt))


def aggregate(reports: Sequence[QualityReport]) -> QualityReport:
    """Arithmetic means; a single infinite PSNR makes the mean infinite."""
    if not reports:
        raise ValueError("no reports to aggregate")
    return QualityReport(
        "mean",
        float(np.mean([r.psnr for r in reports])),
        float(np.mean([r.ssim for r in reports])),
    )


def format_value(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def write_quality_report(path: Union[str, Path], reports: List[QualityReport]) -> None:
    """One `name=... psnr=... ssim=...` record per image, then the mean row."""
    rows = list(reports)
    if len(rows) > 1:
        rows.append(aggregate(rows))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(
        f"name={r.name} psnr={format_value(r.psnr)} ssim={r.ssim:.6f}\n" for r in rows))
