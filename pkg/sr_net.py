"""
SR Network for the CMSR super-resolution engine
Two convolutional feature extractors and the three-way residual sum:

    sr = up + FE1(up) + FE2(guide),   up = bicubic(modality, x r)

FE1 refines the naively upsampled modality, FE2 contributes detail taken
from the (aligned) RGB guide.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from errors import ImageIOError, ShapeError
from tensor_autodiff import Tensor, add, conv2d, parameter, relu, upsample

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cmsr-weights"
CHECKPOINT_VERSION = 1


@dataclass
class FeatureExtractorConfig:
    """
    Layer stack of one feature extractor.

    `channels[i]` is the output width of layer i; the last entry must be 1.
    `activations[i]` says whether ReLU follows layer i.
    """
    in_channels: int
    channels: List[int]
    kernel_sizes: List[int]
    activations: List[bool]

    def __post_init__(self):
        n = len(self.channels)
        if n == 0 or len(self.kernel_sizes) != n or len(self.activations) != n:
            raise ShapeError("channels, kernel_sizes and activations must have equal non-zero length")
        if self.channels[-1] != 1:
            raise ShapeError(f"feature extractor must end in 1 channel, got {self.channels[-1]}")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ShapeError(f"kernel sizes must be odd, got {self.kernel_sizes}")

    @property
    def n_layers(self) -> int:
        return len(self.channels)

    def layer_shapes(self) -> List[Tuple[int, int, int, int]]:
        shapes = []
        c_in = self.in_channels
        for c_out, k in zip(self.channels, self.kernel_sizes):
            shapes.append((c_out, c_in, k, k))
            c_in = c_out
        return shapes

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def fe1(cls, width: int = 64, hidden: int = 8) -> "FeatureExtractorConfig":
        """Modality branch: `hidden` 3x3 ReLU layers then a 3x3 head to 1 channel."""
        return cls(1, [width] * (hidden - 1) + [1], [3] * hidden,
                   [True] * (hidden - 1) + [False])

    @classmethod
    def fe2(cls, width: int = 64, hidden: int = 6) -> "FeatureExtractorConfig":
        """RGB branch: 3x3 ReLU layers then a linear 1x1 head to 1 channel."""
        if not 4 <= hidden <= 8:
            raise ShapeError(f"FE2 needs 4 to 8 layers, got {hidden}")
        if not 4 <= width <= 128:
            raise ShapeError(f"FE2 width must be in [4, 128], got {width}")
        return cls(3, [width] * (hidden - 1) + [1], [3] * (hidden - 1) + [1],
                   [True] * (hidden - 1) + [False])


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    activation: bool


@dataclass
class NetworkWeights:
    fe1_config: FeatureExtractorConfig = field(default_factory=FeatureExtractorConfig.fe1)
    fe2_config: FeatureExtractorConfig = field(default_factory=FeatureExtractorConfig.fe2)
    fe1: List[ConvLayer] = field(default_factory=list)
    fe2: List[ConvLayer] = field(default_factory=list)

    def parameters(self) -> List[Tensor]:
        params = []
        for layer in self.fe1 + self.fe2:
            params.extend([layer.weight, layer.bias])
        return params

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


# ==================== Initialization ====================

def _init_extractor(cfg: FeatureExtractorConfig, rng: np.random.Generator) -> List[ConvLayer]:
    layers = []
    shapes = cfg.layer_shapes()
    for i, (shape, act) in enumerate(zip(shapes, cfg.activations)):
        c_out, c_in, k, _ = shape
        std = np.sqrt(2.0 / (c_in * k * k))
        w = rng.normal(0.0, std, size=shape)
        if i == len(shapes) - 1:
            w *= 0.1
        layers.append(ConvLayer(parameter(w), parameter(np.zeros(c_out)), act))
    return layers


def init_weights(fe1_config: FeatureExtractorConfig, fe2_config: FeatureExtractorConfig,
                 rng: np.random.Generator) -> NetworkWeights:
    """He-normal kernels, final layer of each extractor scaled by 0.1, zero biases."""
    weights = NetworkWeights(fe1_config, fe2_config,
                             _init_extractor(fe1_config, rng),
                             _init_extractor(fe2_config, rng))
    logger.debug("Initialized CMSR network with %d parameters", weights.n_parameters())
    return weights


# ==================== Forward ====================

def feature_extractor_forward(layers: List[ConvLayer], x: Tensor) -> Tensor:
    """Sequential same-size conv / ReLU stack."""
    if not layers:
        raise ShapeError("feature extractor has no layers")
    expected = layers[0].weight.shape[1]
    if x.data.ndim != 4 or x.shape[1] != expected:
        raise ShapeError(f"feature extractor expects {expected} input channels, got {x.shape}")
    for layer in layers:
        x = conv2d(x, layer.weight, layer.bias)
        if layer.activation:
            x = relu(x)
    return x


def cmsr_forward(w: NetworkWeights, modality_lr: Tensor, guide_hr: Tensor, r: int) -> Tensor:
    """
    Super-resolve `modality_lr` by `r` with help from `guide_hr`.

    Args:
        w: Network weights
        modality_lr: 1 x 1 x h x w
        guide_hr: 1 x 3 x rh x rw
        r: Integer scale ratio
    """
    h, wd = modality_lr.shape[2:]
    if guide_hr.shape[2:] != (r * h, r * wd):
        raise ShapeError(
            f"guide {guide_hr.shape[2:]} must be exactly {r}x modality {modality_lr.shape[2:]}")
    up = upsample(modality_lr, r)
    return add(add(up, feature_extractor_forward(w.fe1, up)),
               feature_extractor_forward(w.fe2, guide_hr))


def fe2_residual(w: NetworkWeights, guide_hr: Tensor) -> Tensor:
    """Detail contributed by the RGB branch alone."""
    return feature_extractor_forward(w.fe2, guide_hr)


# ==================== Checkpoints ====================

def save_checkpoint(w: NetworkWeights, path: Union[str, Path]) -> None:
    """
    Write weights as a .npz archive.

    Layout: `header` holds a JSON document (format, version, both extractor
    configs); arrays are named `fe1_<i>_weight`, `fe1_<i>_bias` and so on.
    """
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "fe1": w.fe1_config.to_dict(),
        "fe2": w.fe2_config.to_dict(),
    }
    arrays = {"header": np.array(json.dumps(header))}
    for name, layers in (("fe1", w.fe1), ("fe2", w.fe2)):
        for i, layer in enumerate(layers):
            arrays[f"{name}_{i}_weight"] = layer.weight.data
            arrays[f"{name}_{i}_bias"] = layer.bias.data
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            np.savez(f, **arrays)
    except OSError as exc:
        raise ImageIOError(path, f"cannot write checkpoint ({exc})") from exc


def load_checkpoint(path: Union[str, Path]) -> NetworkWeights:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            header = json.loads(str(archive["header"]))
            arrays = {key: archive[key] for key in archive.files if key != "header"}
    except (OSError, KeyError, ValueError) as exc:
        raise ImageIOError(path, f"cannot read checkpoint ({exc})") from exc

    if header.get("format") != CHECKPOINT_FORMAT:
        raise ImageIOError(path, f"not a CMSR checkpoint (format {header.get('format')!r})")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ImageIOError(path, f"unsupported checkpoint version {header.get('version')}")

    weights = NetworkWeights(FeatureExtractorConfig(**header["fe1"]),
                             FeatureExtractorConfig(**header["fe2"]))
    for name, cfg, layers in (("fe1", weights.fe1_config, weights.fe1),
                              ("fe2", weights.fe2_config, weights.fe2)):
        for i, (shape, act) in enumerate(zip(cfg.layer_shapes(), cfg.activations)):
            try:
                kernel = arrays[f"{name}_{i}_weight"]
                bias = arrays[f"{name}_{i}_bias"]
            except KeyError as exc:
                raise ImageIOError(path, f"missing array {exc}") from exc
            if kernel.shape != shape or bias.shape != (shape[0],):
                raise ImageIOError(path, f"{name} layer {i} has shape {kernel.shape}, expected {shape}")
            layers.append(ConvLayer(parameter(kernel), parameter(bias), act))
    return weights
