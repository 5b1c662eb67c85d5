"""
Inference for the CMSR super-resolution engine
Full-image super-resolution with a trained network and deformation stack,
geometric self-ensemble, iterative back-projection and gradual multi-stage SR.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from deform import DeformationStack, apply_deformation
from errors import ConfigError
from image_io import ImageBuffer, ImagePair
from sr_net import NetworkWeights, cmsr_forward, fe2_residual
from tensor_autodiff import (Tensor, bicubic_shrink_inverse, downsample, no_grad, resize_bicubic,
                             upsample)
from trainer import TrainConfig, TrainingReport, build_stack, train

logger = logging.getLogger(__name__)

AGGREGATES = ("median", "mean")
N_DIHEDRAL = 8


@dataclass
class InferenceConfig:
    ensemble: bool = True
    aggregate: str = "median"
    ensemble_workers: int = 1
    back_projection_iters: int = 8
    back_projection_tol: float = 1e-5
    stage_factor: int = 2

    def validate(self) -> None:
        if self.aggregate not in AGGREGATES:
            raise ConfigError(f"aggregate must be one of {AGGREGATES}, got {self.aggregate!r}")
        if self.ensemble_workers < 1:
            raise ConfigError(f"ensemble_workers must be >= 1, got {self.ensemble_workers}")
        if self.back_projection_iters < 0:
            raise ConfigError(f"back_projection_iters must be >= 0, got {self.back_projection_iters}")
        if self.stage_factor < 2:
            raise ConfigError(f"stage_factor must be >= 2, got {self.stage_factor}")


@dataclass
class StageResult:
    """Outcome of one gradual-SR stage."""
    index: int
    ratio: int
    sr: Tensor
    weights: NetworkWeights
    stack: DeformationStack
    report: TrainingReport
    back_projection_trace: List[float] = field(default_factory=list)
    ensemble_members: int = 1


@dataclass
class SrResult:
    sr: ImageBuffer
    stages: List[StageResult] = field(default_factory=list)
    fe2_residual: Optional[Tensor] = None
    warped_guide: Optional[Tensor] = None


# ==================== Single Pass ====================

def warp_guide(stack: DeformationStack, guide: Tensor) -> Tensor:
    with no_grad():
        return apply_deformation(stack, guide) if stack.active_layers() else guide


def super_resolve(weights: NetworkWeights, stack: DeformationStack, pair: ImagePair) -> Tensor:
    """Align the full guide, then run the network on the full images (unclamped)."""
    warped = warp_guide(stack, pair.guide_tensor())
    with no_grad():
        return cmsr_forward(weights, pair.modality_tensor(), warped, pair.r)


# ==================== Self-Ensemble ====================

def dihedral(x: np.ndarray, index: int) -> np.ndarray:
    """Transform `index` in 0..7: optional horizontal flip, then `index % 4` quarter turns."""
    if index >= 4:
        x = x[..., ::-1]
    return np.ascontiguousarray(np.rot90(x, index % 4, axes=(2, 3)))


def inverse_dihedral(x: np.ndarray, index: int) -> np.ndarray:
    x = np.rot90(x, -(index % 4), axes=(2, 3))
    if index >= 4:
        x = x[..., ::-1]
    return np.ascontiguousarray(x)


def ensemble_members(weights: NetworkWeights, modality: Tensor, warped_guide: Tensor,
                     r: int, workers: int = 1) -> List[np.ndarray]:
    """Network outputs for all 8 dihedral transforms, mapped back to the input frame."""

    def member(index: int) -> np.ndarray:
        # each worker thread has its own tape
        with no_grad():
            out = cmsr_forward(weights,
                               Tensor(dihedral(modality.data, index), dtype=modality.dtype),
                               Tensor(dihedral(warped_guide.data, index), dtype=warped_guide.dtype),
                               r)
        return inverse_dihedral(out.data, index)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=min(workers, N_DIHEDRAL)) as pool:
            return list(pool.map(member, range(N_DIHEDRAL)))
    return [member(i) for i in range(N_DIHEDRAL)]


def geometric_self_ensemble(weights: NetworkWeights, stack: DeformationStack, pair: ImagePair,
                            aggregate: str = "median", workers: int = 1) -> Tensor:
    """Pixelwise median (or mean) of the 8 dihedral ensemble members."""
    if aggregate not in AGGREGATES:
        raise ConfigError(f"aggregate must be one of {AGGREGATES}, got {aggregate!r}")
    modality = pair.modality_tensor()
    warped = warp_guide(stack, pair.guide_tensor())
    members = np.stack(ensemble_members(weights, modality, warped, pair.r, workers))
    combined = np.median(members, axis=0) if aggregate == "median" else members.mean(axis=0)
    return Tensor(combined, dtype=modality.dtype)


# ==================== Back-Projection ====================

def _spread_residual(error: Tensor, r: int, kernel: Optional[np.ndarray]) -> Tensor:
    """
    Bring an LR residual to HR size. Against the bicubic shrink this is its
    right inverse, so one correction removes the residual; a user kernel
    gets plain bicubic upsampling.
    """
    if kernel is not None:
        return upsample(error, r)
    h, w = error.shape[2], error.shape[3]
    rows = bicubic_shrink_inverse(r * h, h).astype(error.dtype)
    cols = bicubic_shrink_inverse(r * w, w).astype(error.dtype)
    return Tensor(rows @ error.data @ cols.T, dtype=error.dtype)


def iterative_back_projection(sr: Tensor, modality_lr: Tensor, r: int,
                              kernel: Optional[np.ndarray] = None, n_iters: int = 8,
                              tol: float = 1e-5,
                              history: Optional[List[float]] = None) -> Tensor:
    """
    Repeatedly add the upsampled LR residual to `sr`.

    Args:
        sr: Current estimate, r x the LR size
        modality_lr: LR input the estimate must be consistent with
        r: Scale ratio
        kernel: Optional blur kernel used for downsampling
        n_iters: Maximum number of corrections
        tol: Stop once the mean absolute consistency error is below this
        history: If given, receives the consistency error before each
            correction and after the last one
    """
    if sr.shape[2:] != (r * modality_lr.shape[2], r * modality_lr.shape[3]):
        raise ConfigError(f"sr {sr.shape[2:]} is not {r}x lr {modality_lr.shape[2:]}")
    with no_grad():
        for _ in range(n_iters):
            error = modality_lr - downsample(sr, r, kernel)
            consistency = float(np.abs(error.data).mean())
            if history is not None:
                history.append(consistency)
            if consistency < tol:
                return sr
            sr = sr + _spread_residual(error, r, kernel)
        if history is not None and n_iters > 0:
            history.append(float(np.abs((modality_lr - downsample(sr, r, kernel)).data).mean()))
    return sr


# ==================== Gradual SR ====================

def stage_count(target_r: int, factor: int) -> int:
    """Number of stages needed to reach `target_r` in steps of `factor`."""
    if target_r < 2:
        raise ConfigError(f"target ratio must be >= 2, got {target_r}")
    n = round(math.log(target_r, factor))
    if n < 1 or factor ** n != target_r:
        raise ConfigError(f"ratio {target_r} is not a power of the stage factor {factor}")
    return n


def _buffer(tensor: Tensor) -> ImageBuffer:
    return ImageBuffer(tensor.data[0].transpose(1, 2, 0).copy())


def gradual_sr(pair: ImagePair, train_config: TrainConfig,
               inference_config: Optional[InferenceConfig] = None,
               on_stage: Optional[Callable[[StageResult], None]] = None) -> SrResult:
    """
    Reach `pair.r` through stages of `stage_factor`, retraining at every stage.

    Each stage trains a fresh network and deformation (affine warm-started
    from the previous stage) on the current modality and the guide shrunk
    to the stage resolution, super-resolves with the self-ensemble, and
    back-projects against the stage's LR input. The final stage uses the
    guide at native resolution.
    """
    inference_config = inference_config or InferenceConfig()
    inference_config.validate()
    factor = inference_config.stage_factor
    n_stages = stage_count(pair.r, factor)

    guide_native = pair.guide_tensor()
    current = pair.modality_tensor()
    previous_stack: Optional[DeformationStack] = None
    stages: List[StageResult] = []

    for k in range(1, n_stages + 1):
        h, w = current.shape[2] * factor, current.shape[3] * factor
        with no_grad():
            guide = guide_native if k == n_stages else resize_bicubic(guide_native, h, w)
        kernel = pair.blur_kernel if n_stages == 1 else None
        stage_pair = ImagePair(_buffer(current), _buffer(guide), factor, kernel)
        config = replace(train_config, r=factor, seed=train_config.seed + k - 1)

        logger.info("Stage %d/%d: %dx%d -> %dx%d", k, n_stages,
                    current.shape[2], current.shape[3], h, w)
        stack = build_stack(config)
        if previous_stack is not None and config.learn_deformation:
            stack.warm_start_affine(previous_stack)
        trained = train(stage_pair, config, stack)

        if inference_config.ensemble:
            sr = geometric_self_ensemble(trained.weights, trained.stack, stage_pair,
                                         inference_config.aggregate,
                                         inference_config.ensemble_workers)
            members = N_DIHEDRAL
        else:
            sr = super_resolve(trained.weights, trained.stack, stage_pair)
            members = 1
        trace: List[float] = []
        sr = iterative_back_projection(sr, current, factor, kernel,
                                       inference_config.back_projection_iters,
                                       inference_config.back_projection_tol, trace)
        if trace:
            logger.info("Stage %d back-projection: consistency %.2e -> %.2e", k, trace[0], trace[-1])

        stage = StageResult(k, factor ** k, sr, trained.weights, trained.stack,
                            trained.report, trace, members)
        stages.append(stage)
        if on_stage is not None:
            on_stage(stage)
        previous_stack = trained.stack
        current = sr

    last = stages[-1]
    warped = warp_guide(last.stack, guide_native)
    with no_grad():
        residual = fe2_residual(last.weights, warped)
    return SrResult(ImageBuffer.from_tensor(current, pair.modality_lr.source_bit_depth),
                    stages, residual, warped)
