#!/usr/bin/env python3
"""
Pixel plus feature-space training objective

The feature network is a frozen VGG-like stack (conv + ReLU + 2×2 pool
blocks, global pooling, two FC layers) with taps pool3, pool4 and fc7.
Weights come from a seed or from a container file with 'vgg/...' sections.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

import config
from constants import SectionNames, TapNames
from exceptions import ConfigError, ShapeError
from models import LossWeights, TrainConfig
from nn_layers import (
    Conv2dParams,
    LayerSpec,
    LinearParams,
    conv2d,
    global_avg_pool,
    init_params,
    linear,
    max_pool2d,
    relu,
    same_conv,
)
from tensor_autodiff import Tensor, as_tensor, mse, no_grad
from tensor_io import read_container, write_container

logger = logging.getLogger(__name__)

DEFAULT_WIDTHS = (8, 16, 32, 64)
DEFAULT_FC_WIDTH = 128

# Block index after whose pool each spatial tap is taken
_POOL_TAPS = {TapNames.POOL3: 2, TapNames.POOL4: 3}


@dataclass
class FeatureNetwork:
    """Frozen feature extractor; its tensors never require gradients"""
    blocks: List[Conv2dParams]
    fc: List[LinearParams]

    def __post_init__(self):
        if len(self.blocks) != 4 or len(self.fc) != 2:
            raise ShapeError("Feature network needs 4 conv blocks and 2 FC layers",
                             (len(self.blocks), len(self.fc)))
        for tensor in self.named_tensors().values():
            tensor.requires_grad = False

    @classmethod
    def from_seed(cls, seed: int = config.FEATURE_NET_SEED, widths: Sequence[int] = DEFAULT_WIDTHS,
                  fc_width: int = DEFAULT_FC_WIDTH) -> 'FeatureNetwork':
        """Deterministic random-weight network"""
        rng = np.random.default_rng(seed)
        seeds = iter(int(s) for s in rng.integers(0, 2 ** 31 - 1, size=len(widths) + 2))
        blocks, channels = [], 3
        for width in widths:
            # He-style gain
            blocks.append(init_params(same_conv(channels, width, 3), next(seeds), gain=np.sqrt(2.0)))
            channels = width
        fc = [init_params(LayerSpec('linear', channels, fc_width), next(seeds), gain=np.sqrt(2.0)),
              init_params(LayerSpec('linear', fc_width, fc_width), next(seeds))]
        return cls(blocks, fc)

    def named_tensors(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            out[f'{SectionNames.FEATURE_NET}/conv{i}.weight'] = block.weight
            out[f'{SectionNames.FEATURE_NET}/conv{i}.bias'] = block.bias
        for i, layer in enumerate(self.fc):
            out[f'{SectionNames.FEATURE_NET}/fc{i + 6}.weight'] = layer.weight
            out[f'{SectionNames.FEATURE_NET}/fc{i + 6}.bias'] = layer.bias
        return out

    def save(self, path: Union[str, Path]) -> None:
        write_container(path, self.named_tensors(), {'kind': 'feature_network'})

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'FeatureNetwork':
        """
        Load weights from a container with 'vgg/conv{0..3}' and 'vgg/fc{6,7}' sections

        Raises:
            ShapeError: If a section is missing or layer shapes do not chain
        """
        sections, _ = read_container(path)
        prefix = SectionNames.FEATURE_NET

        def take(name: str) -> np.ndarray:
            key = f'{prefix}/{name}'
            if key not in sections:
                raise ShapeError(f"Feature network file {path} has no section '{key}'")
            return sections[key]

        blocks = []
        for i in range(4):
            weight = take(f'conv{i}.weight')
            if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
                raise ShapeError(f"conv{i} weight must be out×in×k×k with odd k", weight.shape)
            blocks.append(Conv2dParams(Tensor(weight), Tensor(take(f'conv{i}.bias')),
                                       1, (weight.shape[2] - 1) // 2))
        fc = [LinearParams(Tensor(take(f'fc{i}.weight')), Tensor(take(f'fc{i}.bias'))) for i in (6, 7)]
        logger.info(f"Loaded feature network weights from {path}")
        return cls(blocks, fc)

    def taps(self, img: Tensor, names: Iterable[str]) -> Dict[str, Tensor]:
        """
        Features at several taps from one pass

        Args:
            img: 3×H×W image, H and W multiples of 16
            names: Tap names

        Returns:
            Mapping tap name -> feature tensor
        """
        names = list(names)
        for name in names:
            if name not in TapNames.ALL:
                raise ConfigError(f"Unknown tap '{name}', expected one of {TapNames.ALL}")
        img = as_tensor(img)
        if img.ndim != 3 or img.shape[0] != 3 or img.shape[1] % 16 or img.shape[2] % 16:
            raise ShapeError("Feature network expects a 3×H×W image with H, W divisible by 16", img.shape)

        out: Dict[str, Tensor] = {}
        if not names:
            return out
        x = img
        for i, block in enumerate(self.blocks):
            x = max_pool2d(relu(conv2d(x, block)))
            for tap, index in _POOL_TAPS.items():
                if index == i and tap in names:
                    out[tap] = x
            if len(out) == len(set(names)):
                return out

        hidden = relu(linear(global_avg_pool(x), self.fc[0]))
        out[TapNames.FC7] = linear(hidden, self.fc[1])
        return out


def tap_features(img: Tensor, net: FeatureNetwork, tap: str) -> Tensor:
    """Features of one tap; differentiable w.r.t. img only"""
    return net.taps(img, [tap])[tap]


def total_loss(s0R: Tensor, s0G: Union[Tensor, np.ndarray], net: FeatureNetwork,
               weights: LossWeights) -> Tensor:
    """
    mse(s0R, s0G) + Σ_l λ_l · mse(tap_l(s0R), tap_l(s0G))

    Every term is a per-element mean squared error, so λ_l weighs a mean and
    not a sum: the loss does not grow with the image or feature map size. The
    ground truth is treated as a constant.

    Raises:
        ShapeError: If the two images differ in shape
    """
    s0R = as_tensor(s0R)
    target = Tensor(s0G.data if isinstance(s0G, Tensor) else s0G, dtype=s0R.dtype)
    if s0R.shape != target.shape:
        raise ShapeError("total_loss: prediction and ground truth differ", s0R.shape, target.shape)

    loss = mse(s0R, target)
    active = weights.active
    if not active:
        return loss

    with no_grad():
        target_features = net.taps(target, active)
    predicted_features = net.taps(s0R, active)
    for tap in active:
        term = mse(predicted_features[tap], target_features[tap].detach())
        loss = loss + term * weights.lambda_by_layer[tap]
    return loss


def build_feature_network(train_config: Optional[TrainConfig] = None) -> FeatureNetwork:
    """Load weights if the config names a file, otherwise use the seeded stand-in"""
    if train_config is not None and train_config.feature_net_weights:
        return FeatureNetwork.load(train_config.feature_net_weights)
    seed = train_config.feature_net_seed if train_config is not None else config.FEATURE_NET_SEED
    logger.debug(f"Using seeded feature network (seed {seed})")
    return FeatureNetwork.from_seed(seed)
