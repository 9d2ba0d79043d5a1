#!/usr/bin/env python3
"""
Data models for WarpSR
"""

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, NamedTuple, Optional

import numpy as np

import config
from constants import LambdaPresets, LossModes, TapNames
from exceptions import ConfigError, ShapeError


class VariantKind(Enum):
    """Architecture families"""
    SINGLE = "f1"
    STACKED = "f"
    WARPED = "warp"


@dataclass(frozen=True)
class ModelVariant:
    """One of f1 / fK / fKwarp"""
    kind: VariantKind
    frames: int

    def __post_init__(self):
        if self.frames < 1 or self.frames % 2 == 0:
            raise ConfigError(f"Sequence length must be odd and >= 1, got {self.frames}")
        if self.kind is VariantKind.SINGLE and self.frames != 1:
            raise ConfigError(f"f1 takes exactly one frame, got {self.frames}")
        if self.kind is VariantKind.WARPED and self.frames < 3:
            raise ConfigError(f"Warp variants need at least 3 frames, got {self.frames}")

    @property
    def name(self) -> str:
        if self.kind is VariantKind.SINGLE:
            return "f1"
        suffix = "warp" if self.kind is VariantKind.WARPED else ""
        return f"f{self.frames}{suffix}"

    @property
    def uses_warp(self) -> bool:
        return self.kind is VariantKind.WARPED

    @property
    def half_window(self) -> int:
        """k in s_{-k}..s_k"""
        return self.frames // 2

    @classmethod
    def parse(cls, name: str) -> 'ModelVariant':
        """Parse names like f1, f5, f25warp"""
        match = re.fullmatch(r'f(\d+)(warp)?', name.strip().lower())
        if not match:
            raise ConfigError(f"Unknown variant '{name}', expected f1, fK or fKwarp")
        frames = int(match.group(1))
        if match.group(2):
            return cls(VariantKind.WARPED, frames)
        if frames == 1:
            return cls(VariantKind.SINGLE, 1)
        return cls(VariantKind.STACKED, frames)

    def __str__(self) -> str:
        return self.name


@dataclass
class FrameSequence:
    """2k+1 low-resolution frames plus the optional central ground truth"""
    frames: List[np.ndarray]
    ground_truth: Optional[np.ndarray] = None
    sample_id: str = ""
    identity: str = ""
    track_id: str = ""

    def __post_init__(self):
        if not self.frames or len(self.frames) % 2 == 0:
            raise ShapeError(f"Frame sequence length must be odd, got {len(self.frames)}")
        first = self.frames[0].shape
        for frame in self.frames:
            if frame.ndim != 3 or frame.shape[0] != 3:
                raise ShapeError("Frames must be 3xHxW RGB", frame.shape)
            if frame.shape != first:
                raise ShapeError("All frames must share one shape", first, frame.shape)
            if frame.min() < 0.0 or frame.max() > 1.0:
                raise ValueError("Frame pixel values must lie in [0, 1]")
        if self.ground_truth is not None and self.ground_truth.shape[0] != 3:
            raise ShapeError("Ground truth must be 3xHxW RGB", self.ground_truth.shape)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def central_index(self) -> int:
        return len(self.frames) // 2

    @property
    def central(self) -> np.ndarray:
        return self.frames[self.central_index]

    def window(self, frames: int) -> 'FrameSequence':
        """Centered sub-sequence of the given odd length"""
        if frames > len(self.frames) or frames % 2 == 0:
            raise ShapeError(f"Cannot take a {frames}-frame window from {len(self.frames)} frames")
        start = self.central_index - frames // 2
        return FrameSequence(self.frames[start:start + frames], self.ground_truth,
                             self.sample_id, self.identity, self.track_id)


@dataclass(frozen=True)
class DegradationSpec:
    """Blur + downsample protocol"""
    hr_size: int = config.HR_SIZE
    lr_size: int = config.LR_SIZE
    blur_sigma: float = config.BLUR_SIGMA
    apply_blur: bool = True

    def __post_init__(self):
        if self.lr_size <= 0 or self.hr_size % self.lr_size != 0:
            raise ConfigError(f"hr_size {self.hr_size} must be a multiple of lr_size {self.lr_size}")
        if self.apply_blur and self.blur_sigma <= 0:
            raise ConfigError(f"blur_sigma must be positive, got {self.blur_sigma}")

    @property
    def magnification(self) -> int:
        return self.hr_size // self.lr_size


@dataclass(frozen=True)
class MotionSpec:
    """Bounds of the synthetic per-frame deformation"""
    max_shift: float = 0.05
    max_translation: float = 0.05

    def __post_init__(self):
        if self.max_shift < 0 or self.max_translation < 0:
            raise ConfigError("Motion bounds must be non-negative")


@dataclass
class LossWeights:
    """λ per active feature tap"""
    lambda_by_layer: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for tap, value in self.lambda_by_layer.items():
            if tap not in TapNames.ALL:
                raise ConfigError(f"Unknown tap '{tap}', expected one of {TapNames.ALL}")
            if value < 0:
                raise ConfigError(f"λ for {tap} must be non-negative, got {value}")

    @property
    def active(self) -> List[str]:
        return [tap for tap in TapNames.ALL if self.lambda_by_layer.get(tap, 0.0) > 0.0]

    @classmethod
    def from_mode(cls, mode: str, value: float = config.LAMBDA_LFW) -> 'LossWeights':
        """Build weights from a mode string and one shared λ"""
        if mode not in LossModes.ACTIVE_TAPS:
            raise ConfigError(f"Unknown loss mode '{mode}', expected one of {list(LossModes.ACTIVE_TAPS)}")
        return cls({tap: float(value) for tap in LossModes.ACTIVE_TAPS[mode]})

    @classmethod
    def from_preset(cls, mode: str, preset: str) -> 'LossWeights':
        """Mode combined with the lfw (1e3) or ytf (1e5) λ regime"""
        values = {LambdaPresets.LFW: config.LAMBDA_LFW, LambdaPresets.YTF: config.LAMBDA_YTF}
        if preset not in values:
            raise ConfigError(f"Unknown λ preset '{preset}', expected one of {list(values)}")
        return cls.from_mode(mode, values[preset])


@dataclass
class TrainConfig:
    """Training run configuration"""
    variant: ModelVariant = field(default_factory=lambda: ModelVariant(VariantKind.SINGLE, 1))
    profile: str = config.DEFAULT_PROFILE
    feature_channels: Optional[int] = None
    loss_mode: str = config.DEFAULT_LOSS_MODE
    loss_weights: LossWeights = field(default_factory=lambda: LossWeights.from_mode(config.DEFAULT_LOSS_MODE))
    lr: float = config.ADAM_LR
    epochs: int = 50
    batch_size: int = config.BATCH_SIZE
    seed: int = 0
    threads: int = 1
    checkpoint_every: int = 0
    freeze_warp: bool = False
    pretrained_warp: Optional[str] = None
    feature_net_weights: Optional[str] = None
    feature_net_seed: int = config.FEATURE_NET_SEED

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> 'TrainConfig':
        """Build from a flat run-config mapping (see config.load_run_config)"""
        values = dict(values)
        variant = ModelVariant.parse(values.pop('variant', 'f1'))
        frames = values.pop('frames', None)
        if frames is not None and frames != variant.frames:
            raise ConfigError(f"frames={frames} does not match variant {variant.name}")

        mode = values.pop('loss_mode', config.DEFAULT_LOSS_MODE)
        weights = LossWeights.from_mode(mode)
        for tap in TapNames.ALL:
            key = f'lambda_{tap}'
            if key in values:
                weights.lambda_by_layer[tap] = float(values.pop(key))
        weights = LossWeights(weights.lambda_by_layer)
        return cls(variant=variant, loss_mode=mode, loss_weights=weights, **values)

    def to_mapping(self) -> Dict[str, Any]:
        """Flat, JSON-serializable view"""
        out = asdict(self)
        out['variant'] = self.variant.name
        out.pop('loss_weights')
        for tap in TapNames.ALL:
            out[f'lambda_{tap}'] = float(self.loss_weights.lambda_by_layer.get(tap, 0.0))
        return out

    def config_hash(self) -> str:
        """Stable hash of everything that influences the training trajectory"""
        mapping = self.to_mapping()
        # threads does not change results, checkpoint cadence neither
        mapping.pop('threads', None)
        mapping.pop('checkpoint_every', None)
        payload = json.dumps(mapping, sort_keys=True).encode('utf-8')
        return hashlib.sha256(payload).hexdigest()


class ScoredPair(NamedTuple):
    """One verification pair"""
    similarity: float
    same_identity: bool


@dataclass
class EpochStats:
    """Statistics for one training epoch"""
    epoch: int
    mean_loss: float
    wall_time_s: float
    samples: int = 0

    def to_dict(self) -> Dict[str, float]:
        return {'epoch': self.epoch, 'mean_loss': self.mean_loss, 'wall_time_s': self.wall_time_s}
