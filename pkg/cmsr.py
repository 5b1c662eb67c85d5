#!/usr/bin/env python3
"""
CMSR command line
Train-and-super-resolve a weakly aligned modality/RGB pair, evaluate results
against ground truth, inspect the learned alignment and run synthetic studies.

Usage:
    python3 cmsr.py sr --modality m.png --guide g.png --scale 4 --out sr.png
    python3 cmsr.py eval --sr sr.png --gt gt.png
    python3 cmsr.py warp-debug --modality m.png --guide g.png --scale 4 --out debug/
    python3 cmsr.py bench --study alternation
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config_manager import ConfigManager, RunConfig
from deform import overlay_rg
from errors import CmsrError, ConfigError
from experiments import (bicubic_baseline, benchmark_sr, endpoint_error, format_table,
                         run_alternation_study, run_layer_ablation)
from image_io import SUPPORTED_SUFFIXES, ImageBuffer, load_image, make_pair, save_image
from inference import StageResult, gradual_sr, warp_guide
from metrics import (QualityReport, aggregate, evaluate_pair, format_value, psnr,
                     write_quality_report)
from sr_net import save_checkpoint
from synthetic import RigidMotion, make_benchmark_pair
from trainer import TRAIN_PRESETS, train


def _banner(title: str) -> None:
    print("")
    print("=" * 50)
    print(title)
    print("=" * 50)


def _resolve_config(args: argparse.Namespace, overrides: Dict) -> Tuple[ConfigManager, RunConfig]:
    manager = ConfigManager(args.config, args.preset)
    manager.apply_overrides(overrides)
    return manager, manager.run_config()


def _common_overrides(args: argparse.Namespace) -> Dict:
    return {
        "modality": args.modality,
        "guide": args.guide,
        "scale": args.scale,
        "kernel": args.kernel,
        "seed": args.seed,
        "p_alt": args.p_alt,
        "max_iters": args.max_iters,
        "debug": True if args.debug else None,
    }


def _require(run: RunConfig, *names: str) -> None:
    missing = [name for name in names if not getattr(run, name)]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")


def _residual_image(residual) -> ImageBuffer:
    """Signed residual mapped around mid-grey."""
    return ImageBuffer(np.clip(0.5 + residual.data[0].transpose(1, 2, 0), 0.0, 1.0))


# ==================== sr ====================

def cmd_sr(args: argparse.Namespace) -> int:
    manager, run = _resolve_config(args, {**_common_overrides(args), "out": args.out})
    _require(run, "modality", "guide", "out")
    out = Path(run.out)
    pair = make_pair(run.modality, run.guide, run.scale, run.kernel)

    _banner("CMSR Super-Resolution")
    print(f"Modality: {run.modality} ({pair.modality_lr.width}x{pair.modality_lr.height})")
    print(f"Guide:    {run.guide} ({pair.guide_rgb_hr.width}x{pair.guide_rgb_hr.height})")
    print(f"Scale:    {run.scale}x   Seed: {run.train.seed}")

    def write_stage(stage: StageResult) -> None:
        if not args.no_checkpoint:
            weights_path = out.with_name(f"{out.stem}.stage{stage.index}.npz")
            save_checkpoint(stage.weights, weights_path)
            print(f"Stage {stage.index} weights saved to {weights_path}")
        if run.debug:
            path = out.with_name(f"{out.stem}.stage{stage.index}{out.suffix}")
            save_image(ImageBuffer.from_tensor(stage.sr), path)
            print(f"Stage {stage.index} ({stage.ratio}x) written to {path}")

    result = gradual_sr(pair, run.train, run.inference, on_stage=write_stage)
    bit_depth = 16 if pair.modality_lr.source_bit_depth == 16 else 8
    save_image(result.sr, out, bit_depth)

    report_path = out.with_suffix(".report.txt")
    lines = []
    for stage in result.stages:
        record = stage.report.to_record().splitlines()
        lines += [f"stage{stage.index}.{line}" for line in record]
        lines.append(f"stage{stage.index}.ensemble_members={stage.ensemble_members}")
        lines.append("stage{}.back_projection={}".format(
            stage.index, ",".join(f"{e:.3g}" for e in stage.back_projection_trace)))
    report_path.write_text("\n".join(lines) + "\n")
    config_path = manager.save(args.save_config or out.with_suffix(".config.json"))

    if run.debug:
        save_image(ImageBuffer.from_tensor(result.warped_guide), out.with_name(f"{out.stem}.warped_guide.png"))
        save_image(overlay_rg(result.warped_guide, pair.modality_tensor()),
                   out.with_name(f"{out.stem}.overlay.png"))
        save_image(_residual_image(result.fe2_residual), out.with_name(f"{out.stem}.rgb_residual.png"))

    print(f"\nSR image:   {out} ({result.sr.width}x{result.sr.height})")
    print(f"Report:     {report_path}")
    print(f"Config:     {config_path}")
    return 0


# ==================== eval ====================

def _eval_pairs(sr: Path, gt: Path) -> List[Tuple[str, Path, Path]]:
    if sr.is_dir() != gt.is_dir():
        raise ConfigError("--sr and --gt must both be files or both be directories")
    if not sr.is_dir():
        return [(sr.name, sr, gt)]
    pairs = []
    for path in sorted(sr.iterdir()):
        if path.suffix.lower() in SUPPORTED_SUFFIXES and (gt / path.name).exists():
            pairs.append((path.name, path, gt / path.name))
    if not pairs:
        raise ConfigError(f"no images in {sr} have a same-named ground truth in {gt}")
    return pairs


def cmd_eval(args: argparse.Namespace) -> int:
    reports: List[QualityReport] = []
    for name, sr_path, gt_path in _eval_pairs(Path(args.sr), Path(args.gt)):
        reports.append(evaluate_pair(load_image(sr_path), load_image(gt_path), name))

    _banner("CMSR Evaluation")
    for report in reports:
        print(f"{report.name:30} PSNR {format_value(report.psnr):>9} dB   SSIM {report.ssim:.4f}")
    if len(reports) > 1:
        mean = aggregate(reports)
        print(f"{mean.name:30} PSNR {format_value(mean.psnr):>9} dB   SSIM {mean.ssim:.4f}")

    report_path = Path(args.report) if args.report else (
        Path(args.sr) / "quality.txt" if Path(args.sr).is_dir()
        else Path(args.sr).with_suffix(".quality.txt"))
    write_quality_report(report_path, reports)
    print(f"\nReport: {report_path}")
    return 0


# ==================== warp-debug ====================

def cmd_warp_debug(args: argparse.Namespace) -> int:
    manager, run = _resolve_config(args, _common_overrides(args))
    _require(run, "modality", "guide")
    out_dir = Path(args.out or "warp_debug")
    pair = make_pair(run.modality, run.guide, run.scale, run.kernel)
    modality, guide = pair.modality_tensor(), pair.guide_tensor()

    _banner("CMSR Deformation Debug")
    save_image(overlay_rg(guide, modality), out_dir / "overlay_before.png")
    try:
        trained = train(pair, run.train)
        warped = warp_guide(trained.stack, guide)
        print(f"Trained {trained.report.iterations} iterations, "
              f"final loss {trained.report.final_loss:.5f}")
        trained.report.write(out_dir / "report.txt")
        print("Affine matrix:")
        for row in trained.stack.affine.matrix.data:
            print("  " + "  ".join(f"{v:+.4f}" for v in row))
    except CmsrError as exc:
        # best effort: fall back to the unaligned guide so both overlays exist
        print(f"Alignment failed: {exc}", file=sys.stderr)
        warped = guide
    save_image(overlay_rg(warped, modality), out_dir / "overlay_after.png")
    save_image(ImageBuffer.from_tensor(warped), out_dir / "warped_guide.png")
    manager.save(args.save_config or out_dir / "config.json")
    print(f"\nOverlays, warped guide and report written to {out_dir}/")
    return 0


# ==================== bench ====================

def cmd_bench(args: argparse.Namespace) -> int:
    manager, run = _resolve_config(args, {"seed": args.seed, "p_alt": args.p_alt,
                                          "max_iters": args.max_iters, "scale": args.scale})
    motion = RigidMotion((args.shift, args.shift), args.rotation)
    bench = make_benchmark_pair(args.size, args.size, run.scale, seed=run.train.seed, motion=motion)
    seeds = [run.train.seed + i for i in range(args.seeds)]
    baseline = psnr(bicubic_baseline(bench), bench.ground_truth)

    _banner(f"CMSR Benchmark ({args.study})")
    print(f"Synthetic {args.size}x{args.size} -> {run.scale}x, seeds {seeds}")
    if args.study == "alternation":
        rows = run_alternation_study(bench, args.p_values, seeds, run.train, run.inference)
        print(format_table(rows, baseline))
    elif args.study == "ablation":
        rows = run_layer_ablation(bench, seeds, run.train, run.inference)
        print(format_table(rows, baseline))
    else:
        outcome = benchmark_sr(bench, run.train, run.inference)
        h, w = bench.pair.guide_rgb_hr.height, bench.pair.guide_rgb_hr.width
        print(f"CMSR     {outcome.psnr_cmsr:.3f} dB  SSIM {outcome.ssim_cmsr:.4f}")
        print(f"bicubic  {outcome.psnr_bicubic:.3f} dB  SSIM {outcome.ssim_bicubic:.4f}")
        if outcome.stack is not None:
            print(f"endpoint error {endpoint_error(outcome.stack, bench.true_grid, h, w):.3f} px")
    if args.save_config:
        manager.save(args.save_config)
    return 0


# ==================== Entry Point ====================

def _add_pair_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("--modality", help="LR target-modality image (PNG/PGM)")
    p.add_argument("--guide", help="HR RGB guide image (PNG/PPM)")
    p.add_argument("--scale", type=int, help="Integer SR ratio (default 4)")
    p.add_argument("--kernel", help="Optional blur kernel, plain-text row-major floats")


def _add_run_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="Flat JSON config file")
    p.add_argument("--preset", choices=sorted(TRAIN_PRESETS),
                   help="Tuned training settings, applied under the config file "
                        "(displaced: guide off by several pixels)")
    p.add_argument("--seed", type=int, help="Seed for all randomized behaviour")
    p.add_argument("--p-alt", dest="p_alt", type=float,
                   help="Probability of the upsampling-based scheme (default 0.3)")
    p.add_argument("--max-iters", dest="max_iters", type=int, help="Iteration cap (default 3000)")
    p.add_argument("--save-config", dest="save_config", help="Where to write the config echo")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmsr", description="Cross-modality super-resolution from a single weakly aligned pair")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    sr = commands.add_parser("sr", help="Train on the pair and super-resolve the modality")
    _add_pair_arguments(sr)
    _add_run_arguments(sr)
    sr.add_argument("--out", help="Output SR image path")
    sr.add_argument("--debug", action="store_true",
                    help="Also write stage, warped-guide, overlay and RGB-residual images")
    sr.add_argument("--no-checkpoint", dest="no_checkpoint", action="store_true",
                    help="Do not save the per-stage network weights")
    sr.set_defaults(handler=cmd_sr)

    ev = commands.add_parser("eval", help="PSNR / SSIM against ground truth")
    ev.add_argument("--sr", required=True, help="SR image or directory")
    ev.add_argument("--gt", required=True, help="Ground-truth image or directory")
    ev.add_argument("--report", help="Quality report path")
    ev.set_defaults(handler=cmd_eval)

    wd = commands.add_parser("warp-debug", help="Before/after alignment overlays")
    _add_pair_arguments(wd)
    _add_run_arguments(wd)
    wd.add_argument("--out", help="Output directory (default warp_debug/)")
    wd.add_argument("--debug", action="store_true", help=argparse.SUPPRESS)
    wd.set_defaults(handler=cmd_warp_debug)

    bench = commands.add_parser("bench", help="Synthetic benchmark studies")
    _add_run_arguments(bench)
    bench.add_argument("--study", choices=["sr", "alternation", "ablation"], default="sr")
    bench.add_argument("--scale", type=int, default=2)
    bench.add_argument("--size", type=int, default=32, help="LR side of the synthetic scene")
    bench.add_argument("--seeds", type=int, default=3, help="Number of seeds to average")
    bench.add_argument("--p-values", dest="p_values", type=float, nargs="+", default=[0.0, 0.3])
    bench.add_argument("--shift", type=float, default=0.0, help="Guide shift in HR pixels")
    bench.add_argument("--rotation", type=float, default=0.0, help="Guide rotation in degrees")
    bench.set_defaults(handler=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s")
    try:
        return args.handler(args)
    except (CmsrError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
