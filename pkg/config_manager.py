"""
Configuration Manager for the CMSR super-resolution engine
Loads flat JSON run configurations, merges them over the defaults, applies
command-line overrides and writes the resolved config echo.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from deform import LAYER_ORDER, LayerFlags
from errors import ConfigError
from inference import InferenceConfig
from patch_sampler import AugmentationRanges
from trainer import TRAIN_PRESETS, TrainConfig

logger = logging.getLogger(__name__)

# TrainConfig fields stored under their own name
_TRAIN_SCALARS = (
    "patch_size", "base_lr", "min_lr", "p_alt", "max_iters", "plateau_window",
    "slope_threshold", "stage_fractions", "seed", "learn_deformation", "cpab_cells",
    "cpab_steps", "tps_k", "tps_lambda", "guide_blur", "fe1_width", "fe1_layers",
    "fe2_width", "fe2_layers", "log_every",
)
_AUGMENTATION_KEYS = ("scale", "rotation", "shear", "translation")
_INFERENCE_KEYS = ("ensemble", "aggregate", "ensemble_workers", "back_projection_iters",
                   "back_projection_tol", "stage_factor")


@dataclass
class RunConfig:
    """One CLI run: paths and flags plus the training and inference settings."""
    modality: Optional[str] = None
    guide: Optional[str] = None
    scale: int = 4
    out: Optional[str] = None
    kernel: Optional[str] = None
    debug: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def validate(self) -> None:
        if self.scale < 2:
            raise ConfigError(f"scale must be >= 2, got {self.scale}")
        self.train.validate()
        self.inference.validate()


# ==================== Flat Key Mapping ====================

def flatten_config(run: RunConfig) -> Dict[str, Any]:
    """RunConfig to the flat key -> value form stored in config files."""
    train = run.train
    flat: Dict[str, Any] = {
        "modality": run.modality,
        "guide": run.guide,
        "scale": run.scale,
        "out": run.out,
        "kernel": run.kernel,
        "debug": run.debug,
    }
    for key in _TRAIN_SCALARS:
        value = getattr(train, key)
        flat[key] = list(value) if isinstance(value, tuple) else value
    for layer in LAYER_ORDER:
        flat[f"lr_factor_{layer}"] = train.lr_factors.get(layer, 1.0)
        flat[f"layer_{layer}"] = getattr(train.layers, layer)
    for key in _AUGMENTATION_KEYS:
        value = getattr(train.augmentation, key)
        flat[f"aug_{key}"] = list(value) if isinstance(value, tuple) else value
    for key in _INFERENCE_KEYS:
        flat[key] = getattr(run.inference, key)
    return flat


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Check `value` against the type of its default."""
    if default is None:
        if value is None or isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected a path string, got {value!r}")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, (list, tuple)) and len(value) == len(default):
            return [_coerce(f"{key}[{i}]", v, d) for i, (v, d) in enumerate(zip(value, default))]
    raise ConfigError(f"{key}: invalid value {value!r} (expected like {default!r})")


def unflatten_config(flat: Dict[str, Any]) -> RunConfig:
    train_kwargs = {}
    for key in _TRAIN_SCALARS:
        value = flat[key]
        train_kwargs[key] = tuple(value) if isinstance(value, list) else value
    train_kwargs["r"] = flat["scale"]
    train_kwargs["lr_factors"] = {layer: flat[f"lr_factor_{layer}"] for layer in LAYER_ORDER}
    train_kwargs["layers"] = LayerFlags(**{layer: flat[f"layer_{layer}"] for layer in LAYER_ORDER})
    train_kwargs["augmentation"] = AugmentationRanges(
        **{key: tuple(flat[f"aug_{key}"]) if isinstance(flat[f"aug_{key}"], list)
           else flat[f"aug_{key}"] for key in _AUGMENTATION_KEYS})
    return RunConfig(
        modality=flat["modality"],
        guide=flat["guide"],
        scale=flat["scale"],
        out=flat["out"],
        kernel=flat["kernel"],
        debug=flat["debug"],
        train=TrainConfig(**train_kwargs),
        inference=InferenceConfig(**{key: flat[key] for key in _INFERENCE_KEYS}),
    )


def preset_values(name: str) -> Dict[str, Any]:
    """Flat keys a named training preset changes relative to the defaults."""
    try:
        tune = TRAIN_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(sorted(TRAIN_PRESETS))})")
    defaults = flatten_config(RunConfig())
    tuned = flatten_config(RunConfig(train=tune(TrainConfig())))
    return {key: value for key, value in tuned.items() if value != defaults[key]}


class ConfigManager:
    """
    Flat JSON configuration merged over the built-in defaults.

    Precedence, lowest first: defaults, preset, config file, command line.
    """

    def __init__(self, config_path: Optional[Path] = None, preset: Optional[str] = None):
        self.config_path = Path(config_path) if config_path else None
        self.preset = preset
        self.config: Dict[str, Any] = self._load_config()

    def _default_config(self) -> Dict[str, Any]:
        config = flatten_config(RunConfig())
        if self.preset:
            config.update(preset_values(self.preset))
            logger.debug("Applied preset %s", self.preset)
        return config

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from JSON file; unknown keys are rejected."""
        config = self._default_config()
        if self.config_path is None:
            return config
        try:
            with open(self.config_path, "r") as f:
                loaded = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"{self.config_path}: config file not found")
        except (json.JSONDecodeError, OSError) as exc:
            raise ConfigError(f"{self.config_path}: cannot read config ({exc})")
        if not isinstance(loaded, dict):
            raise ConfigError(f"{self.config_path}: config must be a JSON object")
        self._merge(config, loaded, source=str(self.config_path))
        logger.debug("Loaded %d config keys from %s", len(loaded), self.config_path)
        return config

    @staticmethod
    def _merge(config: Dict[str, Any], values: Dict[str, Any], source: str) -> None:
        unknown = sorted(set(values) - set(config))
        if unknown:
            raise ConfigError(f"{source}: unknown config keys {', '.join(unknown)}")
        defaults = flatten_config(RunConfig())
        for key, value in values.items():
            config[key] = _coerce(key, value, defaults[key])

    def apply_overrides(self, overrides: Dict[str, Any]) -> None:
        """Command-line values win over file values; None means "not given"."""
        given = {key: value for key, value in overrides.items() if value is not None}
        self._merge(self.config, given, source="command line")

    def get(self, key: str) -> Any:
        return self.config[key]

    def run_config(self) -> RunConfig:
        run = unflatten_config(self.config)
        run.validate()
        return run

    def save(self, path: Optional[Path] = None) -> Path:
        """Write the resolved configuration (the config echo)."""
        path = Path(path) if path else self.config_path
        if path is None:
            raise ConfigError("no path to save the configuration to")
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.config, f, indent=2, sort_keys=True)
        return path
