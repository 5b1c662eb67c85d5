"""
Trainer for the CMSR super-resolution engine
Self-supervised training on a single LR-modality / HR-guide pair.

Each iteration warps the guide, crops an augmented patch pair and trains the
network to undo a synthetic downscaling of the modality patch. Two schemes
alternate at random:

  downsampling-based  inputs down(m), down(g); ground truth m
  upsampling-based    inputs down(up(m)), g;   ground truth up(m)

The learning rate drops tenfold whenever the recent loss curve flattens.

With `guide_blur` set, the guide is Gaussian-smoothed while the coarse
layers settle; the blur fades out linearly and is gone once the full stack
is active.
"""

import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Deque, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from deform import (LAYER_ORDER, DeformationStack, DeformationStage, LayerFlags,
                    apply_deformation)
from errors import ConfigError, NonFiniteError, TrainingDivergedError
from image_io import ImagePair
from patch_sampler import (AugmentationRanges, effective_patch_size, extract_pair,
                           sample_augmentation)
from sr_net import FeatureExtractorConfig, NetworkWeights, cmsr_forward, init_weights
from tensor_autodiff import Adam, ParamGroup, Tensor, downsample, get_tape, l1_loss, upsample

logger = logging.getLogger(__name__)


class Scheme(Enum):
    DOWNSAMPLING = "downsampling"
    UPSAMPLING = "upsampling"


@dataclass
class TrainConfig:
    """Every training hyperparameter; defaults are the engine's reference settings."""
    r: int = 2
    patch_size: int = 32
    base_lr: float = 1e-4
    min_lr: float = 1e-6
    lr_factors: Dict[str, float] = field(
        default_factory=lambda: {"affine": 1.0, "cpab": 1.0, "tps": 0.5})
    p_alt: float = 0.3
    max_iters: int = 3000
    plateau_window: int = 100
    slope_threshold: float = 1.5
    augmentation: AugmentationRanges = field(default_factory=AugmentationRanges)
    stage_fractions: Tuple[float, float] = (0.2, 0.5)
    seed: int = 0

    # Deformation
    learn_deformation: bool = True
    layers: LayerFlags = field(default_factory=LayerFlags)
    cpab_cells: Tuple[int, int] = (4, 4)
    cpab_steps: int = 32
    tps_k: int = 5
    tps_lambda: float = 0.0
    guide_blur: float = 0.0  # initial Gaussian sigma in guide pixels

    # Network
    fe1_width: int = 64
    fe1_layers: int = 8
    fe2_width: int = 64
    fe2_layers: int = 6

    log_every: int = 100

    def validate(self) -> None:
        if self.r < 2:
            raise ConfigError(f"r must be >= 2, got {self.r}")
        if not 0.0 <= self.p_alt <= 1.0:
            raise ConfigError(f"p_alt must be in [0, 1], got {self.p_alt}")
        if not (self.min_lr > 0 and self.base_lr >= self.min_lr):
            raise ConfigError(f"need base_lr >= min_lr > 0, got {self.base_lr}, {self.min_lr}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be positive, got {self.max_iters}")
        if self.plateau_window < 3:
            raise ConfigError(f"plateau_window must be >= 3, got {self.plateau_window}")
        if self.slope_threshold < 0:
            raise ConfigError(f"slope_threshold must be >= 0, got {self.slope_threshold}")
        f0, f1 = self.stage_fractions
        if not 0.0 <= f0 <= f1 <= 1.0:
            raise ConfigError(f"stage_fractions must satisfy 0 <= a <= b <= 1, got {self.stage_fractions}")
        unknown = set(self.lr_factors) - set(LAYER_ORDER)
        if unknown:
            raise ConfigError(f"unknown deformation layers in lr_factors: {sorted(unknown)}")
        if any(v < 0 for v in self.lr_factors.values()):
            raise ConfigError(f"lr factors must be >= 0, got {self.lr_factors}")
        if self.patch_size < 8:
            raise ConfigError(f"patch_size must be >= 8, got {self.patch_size}")
        if self.log_every < 1:
            raise ConfigError(f"log_every must be positive, got {self.log_every}")
        if self.guide_blur < 0:
            raise ConfigError(f"guide_blur must be >= 0, got {self.guide_blur}")
        self.augmentation.validate()

    def fe1_config(self) -> FeatureExtractorConfig:
        return FeatureExtractorConfig.fe1(self.fe1_width, self.fe1_layers)

    def fe2_config(self) -> FeatureExtractorConfig:
        return FeatureExtractorConfig.fe2(self.fe2_width, self.fe2_layers)

    def to_dict(self) -> Dict:
        return asdict(self)


def displaced_pair(config: TrainConfig) -> TrainConfig:
    """
    Settings for pairs whose guide is off by several pixels: much faster
    affine and CPAB learning, and a smoothed guide while they settle.
    """
    return replace(config, lr_factors={"affine": 50.0, "cpab": 2.0, "tps": 0.5},
                   guide_blur=2.0)


TRAIN_PRESETS: Dict[str, Callable[[TrainConfig], TrainConfig]] = {
    "displaced": displaced_pair,
}


@dataclass
class TrainState:
    """Mutable progress of one training session."""
    rng: np.random.Generator
    lr: float
    iteration: int = 0
    losses: Deque[float] = field(default_factory=deque)
    since_decay: int = 0
    decays: int = 0
    plateau_at_min: bool = False
    stage: DeformationStage = DeformationStage.AFFINE
    optimizer: Adam = field(default_factory=Adam)

    @classmethod
    def fresh(cls, config: TrainConfig) -> "TrainState":
        return cls(rng=np.random.default_rng(config.seed), lr=config.base_lr,
                   losses=deque(maxlen=2 * config.plateau_window))


@dataclass
class TrainingReport:
    final_loss: float
    iterations: int
    wall_time: float
    seed: int
    stopped_by: str
    loss_trace: List[float] = field(default_factory=list)
    lr_trace: List[Tuple[int, float]] = field(default_factory=list)
    scheme_counts: Dict[str, int] = field(default_factory=dict)
    stage_transitions: List[Tuple[int, str]] = field(default_factory=list)
    config: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_record(self) -> str:
        """key=value lines; lists are comma separated."""
        lines = [
            f"final_loss={self.final_loss:.6g}",
            f"iterations={self.iterations}",
            f"wall_time={self.wall_time:.3f}",
            f"seed={self.seed}",
            f"stopped_by={self.stopped_by}",
            "lr_trace=" + ",".join(f"{it}:{lr:.3g}" for it, lr in self.lr_trace),
            "loss_trace=" + ",".join(f"{loss:.6g}" for loss in self.loss_trace),
            "stage_transitions=" + ",".join(f"{it}:{name}" for it, name in self.stage_transitions),
        ]
        lines += [f"scheme_{name}={count}" for name, count in sorted(self.scheme_counts.items())]
        lines += [f"config.{key}={value}" for key, value in sorted(_flatten(self.config).items())]
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_record())


def _flatten(d: Dict, prefix: str = "") -> Dict[str, object]:
    flat = {}
    for key, value in d.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        elif isinstance(value, (list, tuple)):
            flat[name] = ",".join(str(v) for v in value)
        else:
            flat[name] = value
    return flat


@dataclass
class TrainingResult:
    weights: NetworkWeights
    stack: DeformationStack
    report: TrainingReport


# ==================== Schedule ====================

def select_scheme(rng: np.random.Generator, p_alt: float) -> Scheme:
    """Bernoulli(p_alt) choice of the upsampling-based scheme."""
    return Scheme.UPSAMPLING if rng.random() < p_alt else Scheme.DOWNSAMPLING


def stage_for_iteration(iteration: int, config: TrainConfig) -> DeformationStage:
    f0, f1 = config.stage_fractions
    if iteration < f0 * config.max_iters:
        return DeformationStage.AFFINE
    if iteration < f1 * config.max_iters:
        return DeformationStage.AFFINE_CPAB
    return DeformationStage.FULL


def guide_blur_sigma(iteration: int, config: TrainConfig) -> float:
    """Linear fade from `guide_blur` at iteration 0 to zero where the FULL stage starts."""
    end = config.stage_fractions[1] * config.max_iters
    if config.guide_blur <= 0 or iteration >= end:
        return 0.0
    return config.guide_blur * (1.0 - iteration / end)


def blur_guide(guide: Tensor, sigma: float) -> Tensor:
    """Spatial Gaussian smoothing of every guide channel (constant, no gradient)."""
    if sigma <= 0:
        return guide
    data = gaussian_filter(guide.data.astype(np.float64), sigma=(0, 0, sigma, sigma), mode="nearest")
    return Tensor(data, dtype=guide.dtype)


def loss_plateaued(losses: np.ndarray, threshold: float) -> bool:
    """
    Least-squares line through `losses`; flat when the slope is within
    `threshold` x (residual std / window length) of zero.
    """
    window = losses.size
    x = np.arange(window, dtype=np.float64)
    slope, intercept = np.polyfit(x, losses, 1)
    residual_std = float(np.std(losses - (slope * x + intercept)))
    return abs(slope) <= threshold * residual_std / window


def lr_schedule_update(state: TrainState, config: TrainConfig) -> float:
    """Divide lr by ten on a plateau of the last `plateau_window` losses, down to min_lr."""
    window = config.plateau_window
    if state.since_decay < window or len(state.losses) < window:
        return state.lr
    recent = np.fromiter(list(state.losses)[-window:], dtype=np.float64, count=window)
    if not loss_plateaued(recent, config.slope_threshold):
        return state.lr
    state.since_decay = 0
    if state.lr <= config.min_lr:
        state.plateau_at_min = True
        logger.info("Plateau at minimum lr %.1e (iteration %d)", state.lr, state.iteration)
        return state.lr
    state.decays += 1
    state.lr = max(config.base_lr / 10 ** state.decays, config.min_lr)
    logger.info("Iteration %d: loss plateau, lr -> %.1e", state.iteration, state.lr)
    return state.lr


def should_stop(state: TrainState, config: TrainConfig) -> bool:
    if state.iteration >= config.max_iters:
        return True
    return (state.plateau_at_min and state.lr <= config.min_lr
            and state.stage == DeformationStage.FULL)


# ==================== Step ====================

def _deformation_groups(stack: DeformationStack, config: TrainConfig) -> List[ParamGroup]:
    if not config.learn_deformation:
        return []
    return stack.param_groups(config.lr_factors)


def train_step(state: TrainState, weights: NetworkWeights, stack: DeformationStack,
               pair: ImagePair, scheme: Scheme, config: TrainConfig,
               modality: Optional[Tensor] = None, guide: Optional[Tensor] = None) -> float:
    """
    One optimization step on a freshly sampled patch pair.

    Returns:
        The L1 loss of the step

    Raises:
        TrainingDivergedError: the loss (or any intermediate) is not finite
    """
    r = pair.r
    modality = modality if modality is not None else pair.modality_tensor()
    guide = guide if guide is not None else pair.guide_tensor()
    h, w = modality.shape[2:]
    s = effective_patch_size(config.patch_size, h, w, r)

    tape = get_tape()
    tape.clear()
    groups = [ParamGroup("network", weights.parameters())] + _deformation_groups(stack, config)
    try:
        warped = apply_deformation(stack, guide) if stack.active_layers() else guide
        aug = sample_augmentation(state.rng, config.augmentation, s, h, w)
        patches = extract_pair(modality, warped, aug, s, r)
        m, g = patches.modality_patch, patches.guide_patch
        if scheme is Scheme.DOWNSAMPLING:
            target = m
            modality_in = downsample(m, r, pair.blur_kernel)
            guide_in = downsample(g, r)
        else:
            target = upsample(m, r)
            modality_in = downsample(target, r, pair.blur_kernel)
            guide_in = g
        loss = l1_loss(cmsr_forward(weights, modality_in, guide_in, r), target)
    except NonFiniteError as exc:
        tape.clear()
        raise TrainingDivergedError(state.iteration, scheme.value, float("nan")) from exc

    value = loss.item()
    if not np.isfinite(value):
        tape.clear()
        raise TrainingDivergedError(state.iteration, scheme.value, value)

    Adam.zero_grad(groups)
    tape.backward(loss)
    state.optimizer.step(groups, state.lr)
    tape.clear()
    return value


# ==================== Loop ====================

def build_stack(config: TrainConfig) -> DeformationStack:
    enabled = config.layers if config.learn_deformation else LayerFlags(False, False, False)
    return DeformationStack.create(config.cpab_cells, config.cpab_steps, config.tps_k,
                                   config.tps_lambda, enabled=LayerFlags(**asdict(enabled)))


def train(pair: ImagePair, config: TrainConfig,
          stack: Optional[DeformationStack] = None) -> TrainingResult:
    """
    Train a fresh network (and deformation stack) on one pair until should_stop.

    Args:
        pair: Training pair; its ratio overrides config.r
        config: Hyperparameters
        stack: Optional pre-built stack (e.g. warm-started); a new identity
            stack is created otherwise
    """
    config = replace(config, r=pair.r)
    config.validate()
    state = TrainState.fresh(config)
    weights = init_weights(config.fe1_config(), config.fe2_config(), state.rng)
    stack = stack or build_stack(config)
    modality, guide = pair.modality_tensor(), pair.guide_tensor()

    loss_trace: List[float] = []
    lr_trace: List[Tuple[int, float]] = [(0, state.lr)]
    scheme_counts = {scheme.value: 0 for scheme in Scheme}
    transitions: List[Tuple[int, str]] = []
    stage = None
    blur_sigma, step_guide = 0.0, guide
    started = time.perf_counter()
    logger.info("Training %dx CMSR on %dx%d modality (seed %d, max %d iterations)",
                pair.r, modality.shape[2], modality.shape[3], config.seed, config.max_iters)

    while not should_stop(state, config):
        new_stage = stage_for_iteration(state.iteration, config)
        if new_stage != stage:
            stage = state.stage = stack.stage = new_stage
            state.plateau_at_min = False
            transitions.append((state.iteration, new_stage.value))
            logger.info("Iteration %d: deformation stage %s (active: %s)", state.iteration,
                        new_stage.value, ", ".join(stack.active_layers()) or "none")

        sigma = round(guide_blur_sigma(state.iteration, config), 2)
        if sigma != blur_sigma:
            blur_sigma, step_guide = sigma, blur_guide(guide, sigma)
            if sigma == 0:
                logger.info("Iteration %d: guide blur off", state.iteration)

        scheme = select_scheme(state.rng, config.p_alt)
        loss = train_step(state, weights, stack, pair, scheme, config, modality, step_guide)
        scheme_counts[scheme.value] += 1
        state.losses.append(loss)
        loss_trace.append(loss)
        state.iteration += 1
        state.since_decay += 1

        previous_lr = state.lr
        lr_schedule_update(state, config)
        if state.lr != previous_lr:
            lr_trace.append((state.iteration, state.lr))
        if state.iteration % config.log_every == 0:
            logger.info("Iteration %d [%s] loss=%.5f lr=%.1e stage=%s", state.iteration,
                        scheme.value, loss, state.lr, state.stage.value)

    stopped_by = "max_iters" if state.iteration >= config.max_iters else "plateau"
    report = TrainingReport(
        final_loss=loss_trace[-1],
        iterations=state.iteration,
        wall_time=time.perf_counter() - started,
        seed=config.seed,
        stopped_by=stopped_by,
        loss_trace=loss_trace,
        lr_trace=lr_trace,
        scheme_counts=scheme_counts,
        stage_transitions=transitions,
        config=config.to_dict(),
    )
    logger.info("Training finished after %d iterations (%s), final loss %.5f, %.1fs",
                report.iterations, stopped_by, report.final_loss, report.wall_time)
    return TrainingResult(weights, stack, report)
