#!/usr/bin/env python3
"""
Differentiable layers on top of the tape

Convolutions use the shift-and-accumulate form: one tensordot per kernel
offset, so memory stays at one activation-sized buffer instead of a full
im2col matrix.
"""

import logging
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Union

import numpy as np
from scipy.special import expit

from exceptions import ShapeError
from tensor_autodiff import Tensor, default_dtype, matmul, record_op, reshape

logger = logging.getLogger(__name__)


@dataclass
class Conv2dParams:
    """weight: out×in×kh×kw"""
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def tensors(self) -> Dict[str, Tensor]:
        return {'weight': self.weight, 'bias': self.bias}


@dataclass
class ConvTranspose2dParams:
    """weight: in×out×kh×kw; stride is the upsampling factor"""
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]

    def tensors(self) -> Dict[str, Tensor]:
        return {'weight': self.weight, 'bias': self.bias}


@dataclass
class LinearParams:
    """weight: out×in"""
    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("Linear weight/bias disagree", self.weight.shape, self.bias.shape)

    def tensors(self) -> Dict[str, Tensor]:
        return {'weight': self.weight, 'bias': self.bias}


LayerParams = Union[Conv2dParams, ConvTranspose2dParams, LinearParams]


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """
    Cross-correlation plus bias

    Args:
        x: C×H×W input
        p: Layer parameters

    Returns:
        C'×H'×W' with H' = ⌊(H + 2·pad − kh)/stride⌋ + 1
    """
    if x.ndim != 3:
        raise ShapeError("conv2d expects a C×H×W input", x.shape)
    w, b = p.weight.data, p.bias.data
    out_ch, in_ch, kh, kw = w.shape
    channels, height, width = x.shape
    if in_ch != channels:
        raise ShapeError("conv2d: input channels differ from weight", x.shape, w.shape)
    s, pad = p.stride, p.padding
    if height + 2 * pad < kh or width + 2 * pad < kw:
        raise ShapeError("conv2d: kernel larger than padded input", x.shape, w.shape)

    out_h = (height + 2 * pad - kh) // s + 1
    out_w = (width + 2 * pad - kw) // s + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))

    out = np.zeros((out_ch, out_h, out_w), dtype=np.result_type(xp, w))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s]
            out += np.tensordot(w[:, :, i, j], patch, axes=([1], [0]))
    out += b[:, None, None]

    def backward(g):
        grad_xp = np.zeros_like(xp)
        grad_w = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + s * (out_h - 1) + 1, s)
                cols = slice(j, j + s * (out_w - 1) + 1, s)
                grad_w[:, :, i, j] = np.tensordot(g, xp[:, rows, cols], axes=([1, 2], [1, 2]))
                grad_xp[:, rows, cols] += np.tensordot(w[:, :, i, j], g, axes=([0], [0]))
        grad_x = grad_xp[:, pad:pad + height, pad:pad + width]
        return grad_x, grad_w, g.sum(axis=(1, 2))

    return record_op(out, (x, p.weight, p.bias), 'conv2d', backward)


def conv_transpose2d(x: Tensor, p: ConvTranspose2dParams) -> Tensor:
    """
    Transposed convolution (scatter form)

    Output size is (H − 1)·stride + kh − 2·pad, i.e. exactly H·stride when
    kh − 2·pad = stride.
    """
    if x.ndim != 3:
        raise ShapeError("conv_transpose2d expects a C×H×W input", x.shape)
    w, b = p.weight.data, p.bias.data
    in_ch, out_ch, kh, kw = w.shape
    channels, height, width = x.shape
    if in_ch != channels:
        raise ShapeError("conv_transpose2d: input channels differ from weight", x.shape, w.shape)
    s, pad = p.stride, p.padding
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {s}")

    full_h = (height - 1) * s + kh
    full_w = (width - 1) * s + kw
    if full_h <= 2 * pad or full_w <= 2 * pad:
        raise ShapeError(f"conv_transpose2d: padding {pad} removes the whole output", x.shape, w.shape)

    full = np.zeros((out_ch, full_h, full_w), dtype=np.result_type(x.data, w))
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + s * (height - 1) + 1, s)
            cols = slice(j, j + s * (width - 1) + 1, s)
            full[:, rows, cols] += np.tensordot(w[:, :, i, j], x.data, axes=([0], [0]))
    out = full[:, pad:full_h - pad, pad:full_w - pad] + b[:, None, None]
    x_data = x.data

    def backward(g):
        grad_full = np.zeros_like(full)
        grad_full[:, pad:full_h - pad, pad:full_w - pad] = g
        grad_x = np.zeros_like(x_data)
        grad_w = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + s * (height - 1) + 1, s)
                cols = slice(j, j + s * (width - 1) + 1, s)
                window = grad_full[:, rows, cols]
                grad_x += np.tensordot(w[:, :, i, j], window, axes=([1], [0]))
                grad_w[:, :, i, j] = np.tensordot(x_data, window, axes=([1, 2], [1, 2]))
        return grad_x, grad_w, g.sum(axis=(1, 2))

    return record_op(out, (x, p.weight, p.bias), 'conv_transpose2d', backward)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """W·x + b for a 1-D input"""
    out_features, in_features = p.weight.shape
    if x.ndim != 1 or x.shape[0] != in_features:
        raise ShapeError("linear: input size differs from weight", x.shape, p.weight.shape)
    column = matmul(p.weight, reshape(x, (in_features, 1)))
    return reshape(column, (out_features,)) + p.bias


def relu(x: Tensor) -> Tensor:
    """max(0, x)"""
    mask = x.data > 0
    return record_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), 'relu', lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """1 / (1 + e^−x), kept strictly inside (0, 1)"""
    dtype = x.dtype
    low = np.finfo(dtype).tiny
    high = np.nextafter(dtype.type(1), dtype.type(0))
    y = np.clip(expit(x.data), low, high).astype(dtype)
    return record_op(y, (x,), 'sigmoid', lambda g: (g * y * (1 - y),))


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping size×size max pooling; H and W must be multiples of size"""
    channels, height, width = x.shape
    if height % size or width % size:
        raise ShapeError(f"max_pool2d: spatial size not divisible by {size}", x.shape)
    oh, ow = height // size, width // size
    blocks = x.data.reshape(channels, oh, size, ow, size).transpose(0, 1, 3, 2, 4)
    blocks = blocks.reshape(channels, oh, ow, size * size)
    idx = np.argmax(blocks, axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        grad_blocks = np.zeros((channels, oh, ow, size * size), dtype=g.dtype)
        np.put_along_axis(grad_blocks, idx, g[..., None], axis=-1)
        grad = grad_blocks.reshape(channels, oh, ow, size, size).transpose(0, 1, 3, 2, 4)
        return (grad.reshape(channels, height, width),)

    return record_op(out, (x,), 'max_pool2d', backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """C×H×W -> C"""
    channels, height, width = x.shape
    n = height * width
    return record_op(x.data.mean(axis=(1, 2)), (x,), 'global_avg_pool',
                     lambda g: (np.broadcast_to(g[:, None, None] / n, x.shape).copy(),))


class LayerSpec(NamedTuple):
    """Shape of one layer to initialize"""
    kind: str  # 'conv2d' | 'conv_transpose2d' | 'linear'
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform in ±√(6 / (fan_in + fan_out))"""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(default_dtype())


def init_params(spec: LayerSpec, seed: int, gain: float = 1.0) -> LayerParams:
    """
    Deterministic initialization for one layer

    Args:
        spec: Layer shape
        seed: Seed for this layer
        gain: Multiplier on the weights (0 gives an all-zero layer)

    Returns:
        Layer parameters with zero biases
    """
    rng = np.random.default_rng(seed)
    area = spec.kernel * spec.kernel

    if spec.kind == 'conv2d':
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        weight = glorot_uniform(shape, spec.in_channels * area, spec.out_channels * area, rng)
    elif spec.kind == 'conv_transpose2d':
        shape = (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
        weight = glorot_uniform(shape, spec.in_channels * area, spec.out_channels * area, rng)
    elif spec.kind == 'linear':
        shape = (spec.out_channels, spec.in_channels)
        weight = glorot_uniform(shape, spec.in_channels, spec.out_channels, rng)
    else:
        raise ValueError(f"Unknown layer kind '{spec.kind}'")

    weight = Tensor(weight * gain, requires_grad=True)
    bias = Tensor(np.zeros(spec.out_channels), requires_grad=True)
    if spec.kind == 'conv2d':
        return Conv2dParams(weight, bias, spec.stride, spec.padding)
    if spec.kind == 'conv_transpose2d':
        return ConvTranspose2dParams(weight, bias, spec.stride, spec.padding)
    return LinearParams(weight, bias)


def same_conv(in_channels: int, out_channels: int, kernel: int) -> LayerSpec:
    """Stride-1 conv with padding (k − 1)/2; kernel must be odd"""
    if kernel % 2 == 0:
        raise ValueError(f"'same' convolutions need an odd kernel, got {kernel}")
    return LayerSpec('conv2d', in_channels, out_channels, kernel, 1, (kernel - 1) // 2)


def upsampling_deconv(in_channels: int, out_channels: int, factor: int) -> LayerSpec:
    """Transposed conv with kernel 2·factor and padding factor/2 (exact ×factor)"""
    if factor < 2 or factor % 2:
        raise ValueError(f"Upsampling factor must be even and >= 2, got {factor}")
    return LayerSpec('conv_transpose2d', in_channels, out_channels, 2 * factor, factor, factor // 2)


def apply_layer(x: Tensor, params: LayerParams) -> Tensor:
    """Dispatch on the parameter type"""
    if isinstance(params, Conv2dParams):
        return conv2d(x, params)
    if isinstance(params, ConvTranspose2dParams):
        return conv_transpose2d(x, params)
    return linear(x, params)


def layer_tensors(prefix: str, params: Optional[LayerParams]) -> Dict[str, Tensor]:
    """Name the tensors of a layer as '<prefix>.weight' / '<prefix>.bias'"""
    if params is None:
        return {}
    return {f"{prefix}.{name}": tensor for name, tensor in params.tensors().items()}
