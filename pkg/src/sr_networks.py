#!/usr/bin/env python3
"""
Multi-frame super-resolution network

Feature extractor (per frame) -> face warping (adjacent frames only) ->
stacking in frame order -> reconstruction of the central frame.
"""

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

import config
from constants import SectionNames
from exceptions import ConfigError, ShapeError
from models import DegradationSpec, FrameSequence, ModelVariant
from nn_layers import (
    Conv2dParams,
    ConvTranspose2dParams,
    LayerSpec,
    LinearParams,
    conv2d,
    conv_transpose2d,
    init_params,
    layer_tensors,
    linear,
    relu,
    same_conv,
    sigmoid,
    upsampling_deconv,
)
from tensor_autodiff import Tensor, as_tensor, concat, reshape
from tps_warp import ControlGrid, TpsParams, TpsSystem, grid_sample, tps_grid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Sizes of every sub-network"""
    name: str = 'full'
    lr_size: int = config.LR_SIZE
    hr_size: int = config.HR_SIZE
    blur_sigma: float = config.BLUR_SIGMA
    feature_channels: int = 16
    extractor_hidden: int = 256
    warp_stream_filters: int = 20
    warp_trunk_filters: int = 100
    warp_trunk_layers: int = 5
    warp_hidden: int = 256
    warp_hidden_layers: int = 3
    warp_head_gain: float = 0.0
    recon_filters: Tuple[int, ...] = (16, 32, 64, 64, 64, 32, 16, 3)
    recon_kernels: Tuple[int, ...] = (5, 7, 7, 7, 7, 7, 5, 5)
    control_points_per_side: int = config.CONTROL_POINTS_PER_SIDE

    def __post_init__(self):
        if self.hr_size % self.lr_size:
            raise ConfigError(f"hr_size {self.hr_size} must be a multiple of lr_size {self.lr_size}")
        if self.feature_channels < 2:
            raise ConfigError("feature_channels must be >= 2 (deconv stream + FC stream)")
        if len(self.recon_filters) != len(self.recon_kernels) or self.recon_filters[-1] != 3:
            raise ConfigError("Reconstruction needs one kernel per layer and 3 output channels")

    @property
    def magnification(self) -> int:
        return self.hr_size // self.lr_size

    @property
    def control_points(self) -> int:
        return self.control_points_per_side ** 2

    def degradation(self, apply_blur: bool = True) -> DegradationSpec:
        return DegradationSpec(self.hr_size, self.lr_size, self.blur_sigma, apply_blur)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> 'ModelConfig':
        values = dict(values)
        for key in ('recon_filters', 'recon_kernels'):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values)


# Registry of model profiles
PROFILE_REGISTRY: Dict[str, ModelConfig] = {
    'full': ModelConfig(),
    'tiny': ModelConfig(
        name='tiny',
        lr_size=8,
        hr_size=32,
        blur_sigma=config.BLUR_SIGMA / 2,
        feature_channels=8,
        extractor_hidden=128,
        warp_stream_filters=10,
        warp_trunk_filters=50,
        warp_hidden=128,
        recon_filters=(8, 16, 32, 32, 32, 16, 8, 3),
    ),
    # Gradient checks and unit tests
    'micro': ModelConfig(
        name='micro',
        lr_size=4,
        hr_size=8,
        blur_sigma=config.BLUR_SIGMA / 4,
        feature_channels=3,
        extractor_hidden=6,
        warp_stream_filters=2,
        warp_trunk_filters=3,
        warp_trunk_layers=1,
        warp_hidden=6,
        warp_hidden_layers=1,
        recon_filters=(4, 3),
        recon_kernels=(3, 3),
    ),
}


def create_profile(name: str, **overrides) -> ModelConfig:
    """
    Look up a model profile

    Raises:
        ConfigError: If the profile is not registered
    """
    if name not in PROFILE_REGISTRY:
        raise ConfigError(f"Unknown profile '{name}'. Available: {list(PROFILE_REGISTRY)}")
    overrides = {key: value for key, value in overrides.items() if value is not None}
    return replace(PROFILE_REGISTRY[name], **overrides)


def register_profile(name: str, model_config: ModelConfig) -> None:
    """Register a new profile (for experiments)"""
    PROFILE_REGISTRY[name] = model_config


def get_available_profiles() -> List[str]:
    return list(PROFILE_REGISTRY)


@lru_cache(maxsize=None)
def get_tps_system(per_side: int) -> TpsSystem:
    """Shared, immutable TPS system per grid size"""
    return TpsSystem(ControlGrid(per_side))


@dataclass
class ExtractorParams:
    """Stream A: one upsampling deconvolution; stream B: four FC layers"""
    upsample: ConvTranspose2dParams
    fc: List[LinearParams]

    def named_tensors(self) -> Dict[str, Tensor]:
        out = layer_tensors('upsample', self.upsample)
        for i, layer in enumerate(self.fc):
            out.update(layer_tensors(f'fc{i}', layer))
        return out


@dataclass
class WarpPredictorParams:
    """Two per-frame conv streams, a conv trunk and an FC head producing 2C shifts"""
    reference_stream: List[Conv2dParams]
    moving_stream: List[Conv2dParams]
    trunk: List[Conv2dParams]
    fc: List[LinearParams]

    @property
    def head(self) -> LinearParams:
        return self.fc[-1]

    def named_tensors(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for prefix, layers in (('ref', self.reference_stream), ('mov', self.moving_stream),
                               ('trunk', self.trunk), ('fc', self.fc)):
            for i, layer in enumerate(layers):
                out.update(layer_tensors(f'{prefix}{i}', layer))
        return out


@dataclass
class ReconstructionParams:
    convs: List[Conv2dParams]

    @property
    def in_channels(self) -> int:
        return self.convs[0].in_channels

    def named_tensors(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for i, layer in enumerate(self.convs):
            out.update(layer_tensors(f'conv{i}', layer))
        return out


@dataclass
class ModelParams:
    """θ_F0, θ_Fadj (shared by every adjacent frame), θ_P, θ_R"""
    model_config: ModelConfig
    variant: ModelVariant
    central: ExtractorParams
    adjacent: ExtractorParams
    warp: WarpPredictorParams
    reconstruction: ReconstructionParams

    def groups(self) -> Dict[str, Dict[str, Tensor]]:
        return OrderedDict([
            (SectionNames.CENTRAL, self.central.named_tensors()),
            (SectionNames.ADJACENT, self.adjacent.named_tensors()),
            (SectionNames.WARP, self.warp.named_tensors()),
            (SectionNames.RECONSTRUCTION, self.reconstruction.named_tensors()),
        ])

    def named_tensors(self) -> 'OrderedDict[str, Tensor]':
        """Every parameter as '<group>/<layer>.<weight|bias>'"""
        out: 'OrderedDict[str, Tensor]' = OrderedDict()
        for group, tensors in self.groups().items():
            for name, tensor in tensors.items():
                out[f'{group}/{name}'] = tensor
        return out

    def trainable(self, variant: Optional[ModelVariant] = None,
                  freeze_warp: bool = False) -> 'OrderedDict[str, Tensor]':
        """Parameters the variant's forward pass depends on"""
        variant = variant or self.variant
        skip = set()
        if variant.frames == 1:
            skip.add(SectionNames.ADJACENT)
        if not variant.uses_warp or freeze_warp:
            skip.add(SectionNames.WARP)
        return OrderedDict(
            (name, tensor) for name, tensor in self.named_tensors().items()
            if name.split('/', 1)[0] not in skip)

    def load_arrays(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """Overwrite parameter values from named arrays (shapes must match)"""
        tensors = self.named_tensors()
        for name, array in arrays.items():
            if name not in tensors:
                if strict:
                    raise ShapeError(f"Unexpected parameter '{name}'")
                continue
            target = tensors[name]
            if target.shape != array.shape:
                raise ShapeError(f"Parameter '{name}' has the wrong shape", target.shape, array.shape)
            target.data = np.array(array, dtype=target.dtype)
        if strict:
            missing = [name for name in tensors if name not in arrays]
            if missing:
                raise ShapeError(f"Missing parameters: {', '.join(missing[:5])}")


def _seed_stream(seed: int):
    rng = np.random.default_rng(seed)
    while True:
        yield int(rng.integers(0, 2 ** 31 - 1))


def _init_extractor(cfg: ModelConfig, seeds) -> ExtractorParams:
    lr_pixels = 3 * cfg.lr_size * cfg.lr_size
    widths = [lr_pixels, cfg.extractor_hidden, cfg.extractor_hidden, cfg.extractor_hidden,
              cfg.hr_size * cfg.hr_size]
    upsample = init_params(upsampling_deconv(3, cfg.feature_channels - 1, cfg.magnification), next(seeds))
    fc = [init_params(LayerSpec('linear', widths[i], widths[i + 1]), next(seeds)) for i in range(4)]
    return ExtractorParams(upsample, fc)


def _init_warp_predictor(cfg: ModelConfig, seeds) -> WarpPredictorParams:
    def stream():
        f = cfg.warp_stream_filters
        return [init_params(same_conv(3, f, 3), next(seeds)),
                init_params(same_conv(f, f, 3), next(seeds)),
                init_params(same_conv(f, f, 1), next(seeds))]

    reference, moving = stream(), stream()
    trunk = []
    channels = 2 * cfg.warp_stream_filters
    for _ in range(cfg.warp_trunk_layers):
        trunk.append(init_params(same_conv(channels, cfg.warp_trunk_filters, 3), next(seeds)))
        channels = cfg.warp_trunk_filters

    widths = [channels * cfg.lr_size * cfg.lr_size] + [cfg.warp_hidden] * cfg.warp_hidden_layers
    fc = [init_params(LayerSpec('linear', widths[i], widths[i + 1]), next(seeds))
          for i in range(cfg.warp_hidden_layers)]
    # Zero head: the predictor starts at the identity warp
    fc.append(init_params(LayerSpec('linear', widths[-1], 2 * cfg.control_points), next(seeds),
                          gain=cfg.warp_head_gain))
    return WarpPredictorParams(reference, moving, trunk, fc)


def _init_reconstruction(cfg: ModelConfig, in_channels: int, seeds) -> ReconstructionParams:
    convs = []
    for filters, kernel in zip(cfg.recon_filters, cfg.recon_kernels):
        convs.append(init_params(same_conv(in_channels, filters, kernel), next(seeds)))
        in_channels = filters
    return ReconstructionParams(convs)


def init_model(model_config: ModelConfig, variant: ModelVariant, seed: int = 0) -> ModelParams:
    """
    Initialize all four parameter groups deterministically

    The reconstruction input width is (2k+1)·D for the given variant.
    """
    seeds = _seed_stream(seed)
    central = _init_extractor(model_config, seeds)
    adjacent = _init_extractor(model_config, seeds)
    warp = _init_warp_predictor(model_config, seeds)
    reconstruction = _init_reconstruction(model_config, variant.frames * model_config.feature_channels, seeds)
    logger.debug(f"Initialized {variant.name} ({model_config.name}) from seed {seed}")
    return ModelParams(model_config, variant, central, adjacent, warp, reconstruction)


def _check_frame(frame: Tensor, cfg: ModelConfig, what: str) -> None:
    expected = (3, cfg.lr_size, cfg.lr_size)
    if frame.shape != expected:
        raise ShapeError(f"{what}: wrong input frame shape", frame.shape, expected)


def extract_features(frame: Tensor, which: str, params: ModelParams) -> Tensor:
    """
    D×H×W features of one frame

    Args:
        frame: 3×h×w low-resolution frame
        which: 'central' (θ_F0) or 'adjacent' (θ_Fadj)
        params: Model parameters

    Returns:
        Concatenation of the deconvolution stream (D−1 maps) and the FC stream (1 map)
    """
    cfg = params.model_config
    frame = as_tensor(frame)
    _check_frame(frame, cfg, 'extract_features')
    if which == 'central':
        extractor = params.central
    elif which == 'adjacent':
        extractor = params.adjacent
    else:
        raise ValueError(f"which must be 'central' or 'adjacent', got {which!r}")

    stream_a = conv_transpose2d(frame, extractor.upsample)

    hidden = reshape(frame, (frame.size,))
    for layer in extractor.fc[:-1]:
        hidden = relu(linear(hidden, layer))
    stream_b = reshape(linear(hidden, extractor.fc[-1]), (1, cfg.hr_size, cfg.hr_size))

    return concat([stream_a, stream_b], axis=0)


def predict_warp(reference: Tensor, moving: Tensor, params: ModelParams) -> Tensor:
    """
    Control-point shifts aligning `moving` (s_i) to `reference` (s_0)

    Returns:
        Tensor of length 2C, interleaved (Δx, Δy) per control point
    """
    cfg = params.model_config
    reference, moving = as_tensor(reference), as_tensor(moving)
    _check_frame(reference, cfg, 'predict_warp')
    _check_frame(moving, cfg, 'predict_warp')
    warp = params.warp

    ref, mov = reference, moving
    for layer in warp.reference_stream:
        ref = relu(conv2d(ref, layer))
    for layer in warp.moving_stream:
        mov = relu(conv2d(mov, layer))

    hidden = concat([ref, mov], axis=0)
    for layer in warp.trunk:
        hidden = relu(conv2d(hidden, layer))

    hidden = reshape(hidden, (hidden.size,))
    for layer in warp.fc[:-1]:
        hidden = relu(linear(hidden, layer))
    return linear(hidden, warp.head)


def reconstruct(stacked: Tensor, params: ModelParams) -> Tensor:
    """Eight same-padded convolutions, ReLU between, sigmoid last"""
    expected = params.reconstruction.in_channels
    if stacked.ndim != 3 or stacked.shape[0] != expected:
        raise ShapeError(f"reconstruct: expected {expected} stacked channels", stacked.shape)
    x = stacked
    convs = params.reconstruction.convs
    for layer in convs[:-1]:
        x = relu(conv2d(x, layer))
    return sigmoid(conv2d(x, convs[-1]))


WarpOverride = Mapping[int, Union[Tensor, TpsParams, np.ndarray]]


def _override_tensor(value) -> Tensor:
    if isinstance(value, TpsParams):
        return value.as_tensor()
    return as_tensor(value)


def forward(seq: FrameSequence, params: ModelParams, variant: Optional[ModelVariant] = None,
            warp_override: Optional[WarpOverride] = None) -> Tensor:
    """
    Reconstruct the central frame s_0^R

    Args:
        seq: Low-resolution sequence of exactly variant.frames frames
        params: Model parameters
        variant: Defaults to the variant the params were built for
        warp_override: Optional warp parameters by frame offset i (i ≠ 0),
            used instead of the predictor's output

    Returns:
        3×H×W image with every value in (0, 1)
    """
    variant = variant or params.variant
    if len(seq) != variant.frames:
        raise ShapeError(f"{variant.name} needs {variant.frames} frames, got {len(seq)}")

    cfg = params.model_config
    frames = [Tensor(frame) for frame in seq.frames]
    k = seq.central_index
    system = get_tps_system(cfg.control_points_per_side) if variant.uses_warp else None

    features = []
    for i, frame in enumerate(frames):
        if i == k:
            features.append(extract_features(frame, 'central', params))
            continue
        f_i = extract_features(frame, 'adjacent', params)
        if variant.uses_warp:
            offset = i - k
            if warp_override is not None and offset in warp_override:
                p_i = _override_tensor(warp_override[offset])
            else:
                p_i = predict_warp(frames[k], frame, params)
            f_i = grid_sample(f_i, tps_grid(p_i, system, (cfg.hr_size, cfg.hr_size)))
        features.append(f_i)

    return reconstruct(concat(features, axis=0), params)


def predict_warps(seq: FrameSequence, params: ModelParams) -> Dict[int, np.ndarray]:
    """Predicted shifts for every adjacent frame, keyed by offset"""
    frames = [Tensor(frame) for frame in seq.frames]
    k = seq.central_index
    return {i - k: predict_warp(frames[k], frame, params).data.copy()
            for i, frame in enumerate(frames) if i != k}
