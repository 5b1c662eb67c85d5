"""
Experiments for the CMSR super-resolution engine
Desk-scale studies on synthetic pairs: CMSR against bicubic, the
alternation-probability sweep and the deformation-layer ablation.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from deform import DeformationStack, LayerFlags, deformation_grid
from image_io import ImageBuffer
from inference import InferenceConfig, gradual_sr
from metrics import psnr, ssim
from synthetic import BenchmarkPair
from tensor_autodiff import no_grad, upsample
from trainer import TrainConfig

logger = logging.getLogger(__name__)

# (label, learn_deformation, layer flags)
ABLATION_LAYERS = (
    ("none", False, LayerFlags(False, False, False)),
    ("affine", True, LayerFlags(True, False, False)),
    ("affine+cpab", True, LayerFlags(True, True, False)),
    ("affine+cpab+tps", True, LayerFlags(True, True, True)),
)


@dataclass
class BenchmarkResult:
    psnr_cmsr: float
    psnr_bicubic: float
    ssim_cmsr: float
    ssim_bicubic: float
    stack: Optional[DeformationStack] = None

    @property
    def gain(self) -> float:
        return self.psnr_cmsr - self.psnr_bicubic


@dataclass
class StudyRow:
    label: str
    psnr_values: List[float] = field(default_factory=list)

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr_values))


def endpoint_error(stack: DeformationStack, true_grid: np.ndarray, h: int, w: int) -> float:
    """Mean distance in pixels between the learned composed grid and a reference grid."""
    with no_grad():
        grid = deformation_grid(stack, h, w).data.astype(np.float64)
    dx = (grid[0, 0] - true_grid[0, 0]) * w / 2.0
    dy = (grid[0, 1] - true_grid[0, 1]) * h / 2.0
    return float(np.mean(np.sqrt(dx * dx + dy * dy)))


def bicubic_baseline(bench: BenchmarkPair) -> ImageBuffer:
    with no_grad():
        up = upsample(bench.pair.modality_tensor(), bench.pair.r)
    return ImageBuffer.from_tensor(up)


def benchmark_sr(bench: BenchmarkPair, config: TrainConfig,
                 inference_config: Optional[InferenceConfig] = None) -> BenchmarkResult:
    """Train CMSR on the benchmark pair and score it and bicubic against the ground truth."""
    result = gradual_sr(bench.pair, config, inference_config)
    baseline = bicubic_baseline(bench)
    gt = bench.ground_truth
    outcome = BenchmarkResult(psnr(result.sr, gt), psnr(baseline, gt),
                              ssim(result.sr, gt), ssim(baseline, gt),
                              result.stages[-1].stack)
    logger.info("CMSR %.2f dB vs bicubic %.2f dB (gain %+.2f dB)",
                outcome.psnr_cmsr, outcome.psnr_bicubic, outcome.gain)
    return outcome


def run_alternation_study(bench: BenchmarkPair, p_values: Sequence[float], seeds: Sequence[int],
                          config: TrainConfig,
                          inference_config: Optional[InferenceConfig] = None) -> List[StudyRow]:
    """Mean SR PSNR for each upsampling-scheme probability."""
    rows = []
    for p in p_values:
        row = StudyRow(f"p={p:g}")
        for seed in seeds:
            outcome = benchmark_sr(bench, replace(config, p_alt=p, seed=seed), inference_config)
            row.psnr_values.append(outcome.psnr_cmsr)
        logger.info("%s: %.3f dB", row.label, row.psnr_mean)
        rows.append(row)
    return rows


def run_layer_ablation(bench: BenchmarkPair, seeds: Sequence[int], config: TrainConfig,
                       inference_config: Optional[InferenceConfig] = None) -> List[StudyRow]:
    """Mean SR PSNR adding one deformation layer at a time."""
    rows = []
    for label, learn, flags in ABLATION_LAYERS:
        row = StudyRow(label)
        for seed in seeds:
            cfg = replace(config, seed=seed, learn_deformation=learn,
                          layers=LayerFlags(flags.affine, flags.cpab, flags.tps))
            row.psnr_values.append(benchmark_sr(bench, cfg, inference_config).psnr_cmsr)
        logger.info("%s: %.3f dB", row.label, row.psnr_mean)
        rows.append(row)
    return rows


def format_table(rows: Sequence[StudyRow], baseline: Optional[float] = None) -> str:
    lines = [f"{'setting':<20} {'mean PSNR':>10}  runs"]
    for row in rows:
        runs = ", ".join(f"{v:.2f}" for v in row.psnr_values)
        lines.append(f"{row.label:<20} {row.psnr_mean:>10.3f}  {runs}")
    if baseline is not None:
        lines.append(f"{'bicubic':<20} {baseline:>10.3f}")
    return "\n".join(lines)
