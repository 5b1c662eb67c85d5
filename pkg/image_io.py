"""
Image I/O for the CMSR super-resolution engine
Loads and saves PNG / PGM / PPM images, converts them to and from Tensors,
and builds the LR-modality / HR-guide training pair.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from errors import ImageIOError, PairError, ShapeError
from tensor_autodiff import DEFAULT_DTYPE, Tensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SUPPORTED_SUFFIXES = {".png", ".pgm", ".ppm", ".pnm"}

# PIL mode -> (channels, bit depth)
_MODE_INFO = {
    "1": (1, 8),
    "L": (1, 8),
    "I;16": (1, 16),
    "I;16B": (1, 16),
    "I;16L": (1, 16),
    "I": (1, 16),
    "RGB": (3, 8),
}


@dataclass
class ImageBuffer:
    """H x W x C float image with values in [0, 1]."""
    data: np.ndarray
    source_bit_depth: int = 8

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ShapeError(f"image must be HxWx1 or HxWx3, got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_tensor(self) -> Tensor:
        """1 x C x H x W tensor."""
        return Tensor(np.transpose(self.data, (2, 0, 1))[None])

    @classmethod
    def from_tensor(cls, tensor: Tensor, bit_depth: int = 8) -> "ImageBuffer":
        """Export a 1 x C x H x W tensor, clamping to [0, 1]."""
        data = np.clip(tensor.data[0], 0.0, 1.0).transpose(1, 2, 0)
        return cls(data.astype(DEFAULT_DTYPE), bit_depth)


@dataclass
class ImagePair:
    """LR target-modality image, HR RGB guide, integer ratio and optional blur kernel."""
    modality_lr: ImageBuffer
    guide_rgb_hr: ImageBuffer
    r: int
    blur_kernel: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.r < 2:
            raise PairError(f"scale ratio must be >= 2, got {self.r}")
        m, g = self.modality_lr, self.guide_rgb_hr
        if (g.height, g.width) != (self.r * m.height, self.r * m.width):
            raise PairError(
                f"guide {g.height}x{g.width} is not {self.r}x modality {m.height}x{m.width}")
        if self.blur_kernel is not None and abs(float(self.blur_kernel.sum()) - 1.0) > 1e-6:
            raise PairError("blur kernel must sum to 1")

    def modality_tensor(self) -> Tensor:
        return self.modality_lr.to_tensor()

    def guide_tensor(self) -> Tensor:
        return self.guide_rgb_hr.to_tensor()


# ==================== Loading / Saving ====================

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _stored_colour_depth(path: Path) -> int:
    """
    Bit depth a colour file declares in its header (8 when unknown).

    Pillow decodes 16-bit colour PNG / PPM files to 8 bits per channel.
    """
    with open(path, "rb") as f:
        head = f.read(512)
    if head.startswith(_PNG_SIGNATURE) and head[12:16] == b"IHDR" and len(head) >= 26:
        depth, colour_type = head[24], head[25]
        return 16 if depth == 16 and colour_type in (2, 4, 6) else 8
    if head[:2] == b"P6":
        tokens = []
        for line in head.split(b"\n"):
            tokens += line.split(b"#", 1)[0].split()
            if len(tokens) >= 4:
                break
        if len(tokens) >= 4 and tokens[3].isdigit() and int(tokens[3]) > 255:
            return 16
    return 8


def load_image(path: PathLike) -> ImageBuffer:
    """
    Load an 8- or 16-bit PNG / PGM / PPM image scaled to [0, 1].

    Grayscale files yield one channel, colour files three.
    """
    path = Path(path)
    if not path.exists():
        raise ImageIOError(path, "file not found")
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise ImageIOError(path, f"unsupported format {path.suffix or '(none)'}")
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("P", "RGBA", "LA", "PA"):
                img = img.convert("RGB" if mode != "LA" else "L")
                mode = img.mode
            if mode not in _MODE_INFO:
                raise ImageIOError(path, f"unsupported pixel mode {mode}")
            channels, depth = _MODE_INFO[mode]
            array = np.asarray(img)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        if isinstance(exc, ImageIOError):
            raise
        raise ImageIOError(path, f"cannot decode image ({exc})") from exc

    if mode == "I" and array.max(initial=0) > 65535:
        raise ImageIOError(path, "pixel values exceed 16 bits")
    if depth == 8 and _stored_colour_depth(path) == 16:
        logger.warning("%s: 16-bit colour image loaded with 8-bit precision", path)
    max_code = float(2 ** depth - 1)
    data = array.astype(np.float64) / max_code
    if mode == "1":
        data = array.astype(np.float64)
    logger.debug("Loaded %s (%s, %d-bit, %dx%d)", path, mode, depth, data.shape[1], data.shape[0])
    return ImageBuffer(data.astype(DEFAULT_DTYPE), depth)


def save_image(img: ImageBuffer, path: PathLike, bit_depth: int = 8) -> None:
    """Clamp to [0, 1], round to the nearest code and write the file."""
    path = Path(path)
    if bit_depth not in (8, 16):
        raise ImageIOError(path, f"bit depth must be 8 or 16, got {bit_depth}")
    max_code = 2 ** bit_depth - 1
    codes = np.rint(np.clip(img.data.astype(np.float64), 0.0, 1.0) * max_code)

    if img.channels == 1:
        if bit_depth == 8:
            pil = Image.fromarray(codes[:, :, 0].astype(np.uint8), mode="L")
        else:
            pil = Image.fromarray(codes[:, :, 0].astype(np.uint16))
    else:
        if bit_depth == 16:
            raise ImageIOError(path, "16-bit RGB output is not supported")
        pil = Image.fromarray(codes.astype(np.uint8), mode="RGB")

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        pil.save(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ImageIOError(path, f"cannot write image ({exc})") from exc


def load_kernel(path: PathLike) -> np.ndarray:
    """Plain-text row-major blur kernel, normalized to sum to one."""
    path = Path(path)
    try:
        kernel = np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ImageIOError(path, f"cannot read kernel ({exc})") from exc
    total = kernel.sum()
    if not np.all(np.isfinite(kernel)) or total <= 0:
        raise ImageIOError(path, "kernel must be finite with a positive sum")
    return kernel / total


# ==================== Pairing ====================

def as_modality(img: ImageBuffer, source: PathLike = "<modality>") -> ImageBuffer:
    """Collapse a grey image stored as RGB to one channel; reject true colour."""
    if img.channels == 1:
        return img
    data = img.data
    if np.array_equal(data[:, :, 0], data[:, :, 1]) and np.array_equal(data[:, :, 0], data[:, :, 2]):
        return ImageBuffer(data[:, :, :1].copy(), img.source_bit_depth)
    raise PairError(f"{source}: target modality must be single-band, got a colour image")


def as_guide(img: ImageBuffer) -> ImageBuffer:
    if img.channels == 3:
        return img
    return ImageBuffer(np.repeat(img.data, 3, axis=2), img.source_bit_depth)


def center_crop(img: ImageBuffer, height: int, width: int) -> ImageBuffer:
    top = (img.height - height) // 2
    left = (img.width - width) // 2
    return ImageBuffer(img.data[top:top + height, left:left + width].copy(), img.source_bit_depth)


def pair_from_buffers(modality: ImageBuffer, guide: ImageBuffer, r: int,
                      kernel: Optional[np.ndarray] = None) -> ImagePair:
    """Center-crop the guide to exactly r times the modality size."""
    if r < 2:
        raise PairError(f"scale ratio must be >= 2, got {r}")
    modality = as_modality(modality)
    guide = as_guide(guide)
    target_h, target_w = r * modality.height, r * modality.width
    if guide.height < target_h or guide.width < target_w:
        raise PairError(
            f"guide {guide.height}x{guide.width} smaller than {r}x modality "
            f"({target_h}x{target_w})")
    if (guide.height, guide.width) != (target_h, target_w):
        logger.info("Center-cropping guide from %dx%d to %dx%d",
                    guide.height, guide.width, target_h, target_w)
        guide = center_crop(guide, target_h, target_w)
    if kernel is not None:
        kernel = np.asarray(kernel, dtype=np.float64)
        kernel = kernel / kernel.sum()
    return ImagePair(modality, guide, r, kernel)


def make_pair(modality_path: PathLike, guide_path: PathLike, r: int,
              kernel_path: Optional[PathLike] = None) -> ImagePair:
    """Load and validate a training pair from disk."""
    modality = as_modality(load_image(modality_path), modality_path)
    guide = load_image(guide_path)
    kernel = load_kernel(kernel_path) if kernel_path else None
    return pair_from_buffers(modality, guide, r, kernel)
