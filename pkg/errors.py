"""
Error types for the CMSR Cross-Modality Super-Resolution engine.
Every module raises one of these so the CLI can report failures uniformly.
"""

from typing import Optional


class CmsrError(Exception):
    """Base class for all engine errors."""


class ShapeError(CmsrError, ValueError):
    """Shape, channel count or scale-ratio mismatch between operands."""


class NonFiniteError(CmsrError, ArithmeticError):
    """A forward result contained NaN or Inf."""


class MissingGradientError(CmsrError):
    """An optimizer step was requested for a parameter without gradient."""


class ImageIOError(CmsrError, OSError):
    """Image or kernel file could not be read or written."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class PairError(CmsrError, ValueError):
    """An LR modality / HR guide pair violates the pairing rules."""


class TessellationError(CmsrError, ValueError):
    """Degenerate tessellation or singular thin-plate-spline system."""


class PatchSamplingError(CmsrError):
    """Augmented patch footprint could not be placed inside the image."""


class ConfigError(CmsrError, ValueError):
    """Invalid or unknown configuration value."""


class TrainingDivergedError(CmsrError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, scheme: Optional[str], loss: float):
        self.iteration = iteration
        self.scheme = scheme
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss} at iteration {iteration} (scheme: {scheme})"
        )
