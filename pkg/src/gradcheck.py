#!/usr/bin/env python3
"""
Finite-difference gradient checks

Each registered check builds a scalar function of a few input tensors. The
analytic gradient from the tape is compared with central differences in
64-bit mode.
"""

import logging
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import config
from constants import LogMessages, TapNames
from exceptions import ConfigError
from models import FrameSequence, LossWeights, ModelVariant
from nn_layers import (
    LayerSpec,
    conv2d,
    conv_transpose2d,
    global_avg_pool,
    init_params,
    linear,
    max_pool2d,
    relu,
    same_conv,
    sigmoid,
    upsampling_deconv,
)
from perceptual_loss import FeatureNetwork, total_loss
from sr_networks import create_profile, forward, get_tps_system, init_model, predict_warp
from tensor_autodiff import (
    Tape,
    Tensor,
    concat,
    elementwise,
    float64_mode,
    gradients,
    matmul,
    mean,
    mse,
    no_grad,
    reduce_sum,
    reshape,
    transpose,
)
from tps_warp import grid_sample, identity_field, tps_grid

logger = logging.getLogger(__name__)

ScalarFn = Callable[[], Tensor]
# A check returns (fn, inputs to differentiate, eps)
CheckBuilder = Callable[[np.random.Generator], Tuple[ScalarFn, Sequence[Tensor], float]]

MAX_ENTRIES = 24


class GradcheckResult(NamedTuple):
    module: str
    op: str
    error: float
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a − n| scaled by the largest magnitude of either (floored at 1e-8)"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def _evaluate(fn: ScalarFn) -> float:
    with no_grad():
        return fn().item()


def check_gradients(fn: ScalarFn, inputs: Sequence[Tensor], eps: float = config.GRADCHECK_EPS,
                    max_entries: Optional[int] = MAX_ENTRIES, seed: int = 0) -> float:
    """
    Worst relative error between tape and central-difference gradients

    Args:
        fn: Builds a scalar tensor from the current values of inputs
        inputs: Tensors to perturb (their data is modified and restored)
        eps: Finite-difference step
        max_entries: Check a random subset of this many entries per input
        seed: Chooses the subset

    Returns:
        Largest relative_error over all inputs
    """
    with Tape():
        analytic = gradients(fn(), list(inputs))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor, grad in zip(inputs, analytic):
        flat = tensor.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            indices = np.arange(flat.size)
        else:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))

        numeric = np.empty(len(indices))
        for n, i in enumerate(indices):
            original = flat[i]
            flat[i] = original + eps
            plus = _evaluate(fn)
            flat[i] = original - eps
            minus = _evaluate(fn)
            flat[i] = original
            numeric[n] = (plus - minus) / (2.0 * eps)
        worst = max(worst, relative_error(grad.reshape(-1)[indices], numeric))
    return worst


# Registry of checks: module -> op -> builder
CHECKS: Dict[str, Dict[str, CheckBuilder]] = {}


def register_check(module: str, op: str) -> Callable[[CheckBuilder], CheckBuilder]:
    """Decorator adding a check builder to the registry"""
    def decorator(builder: CheckBuilder) -> CheckBuilder:
        CHECKS.setdefault(module, {})[op] = builder
        return builder
    return decorator


def get_available_modules() -> List[str]:
    return list(CHECKS)


def _param(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _away_from_zero(rng: np.random.Generator, *shape: int) -> Tensor:
    magnitude = rng.uniform(0.1, 1.0, size=shape)
    return Tensor(magnitude * rng.choice([-1.0, 1.0], size=shape), requires_grad=True)


def rng_fixed(rng: np.random.Generator, *shape: int) -> Tensor:
    """A constant tensor drawn once, so repeated evaluations see the same values"""
    return Tensor(rng.normal(size=shape))


@register_check('tensor_autodiff', 'add')
def _check_add(rng):
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    r = rng.normal(size=(3, 4))
    return (lambda: reduce_sum(elementwise('mul', elementwise('add', a, b), Tensor(r)))), [a, b], 1e-6


@register_check('tensor_autodiff', 'sub')
def _check_sub(rng):
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    r = rng.normal(size=(3, 4))
    return (lambda: reduce_sum(elementwise('mul', elementwise('sub', a, b), Tensor(r)))), [a, b], 1e-6


@register_check('tensor_autodiff', 'mul')
def _check_mul(rng):
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    return (lambda: reduce_sum(elementwise('mul', a, b))), [a, b], 1e-6


@register_check('tensor_autodiff', 'scale')
def _check_scale(rng):
    a = _param(rng, 5)
    r = rng.normal(size=5)
    return (lambda: reduce_sum(elementwise('mul', elementwise('scale', a, 2.5), Tensor(r)))), [a], 1e-6


@register_check('tensor_autodiff', 'matmul')
def _check_matmul(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    r = rng_fixed(rng, 3, 2)
    return (lambda: reduce_sum(elementwise('mul', matmul(a, b), r))), [a, b], 1e-6


@register_check('tensor_autodiff', 'mse')
def _check_mse(rng):
    a, b = _param(rng, 2, 5), _param(rng, 2, 5)
    return (lambda: mse(a, b)), [a, b], 1e-6


@register_check('tensor_autodiff', 'mean')
def _check_mean(rng):
    a = _param(rng, 4, 3)
    return (lambda: mean(elementwise('mul', a, a))), [a], 1e-6


@register_check('tensor_autodiff', 'reshape_transpose_concat')
def _check_views(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 2)
    r = rng_fixed(rng, 5, 2)

    def fn():
        joined = concat([a, b], axis=1)           # 2×5
        moved = transpose(reshape(joined, (2, 5)))  # 5×2
        return reduce_sum(elementwise('mul', moved, r))
    return fn, [a, b], 1e-6


@register_check('nn_layers', 'composite')
def _check_composite(rng):
    x = _param(rng, 2, 6, 6)
    conv = init_params(same_conv(2, 3, 3), 11)
    fc = init_params(LayerSpec('linear', 3 * 6 * 6, 4), 12)
    target = rng.normal(size=4)

    def fn():
        hidden = relu(conv2d(x, conv))
        return mse(linear(reshape(hidden, (hidden.size,)), fc), target)
    return fn, [x, conv.weight, conv.bias, fc.weight, fc.bias], 1e-6


@register_check('nn_layers', 'conv2d')
def _check_conv2d(rng):
    x = _param(rng, 2, 5, 5)
    layer = init_params(same_conv(2, 3, 3), 21)
    strided = init_params(LayerSpec('conv2d', 3, 2, 3, 2, 1), 22)
    r = rng_fixed(rng, 2, 3, 3)
    return (lambda: reduce_sum(elementwise('mul', conv2d(conv2d(x, layer), strided), r))), \
        [x, layer.weight, layer.bias, strided.weight], 1e-6


@register_check('nn_layers', 'conv_transpose2d')
def _check_conv_transpose2d(rng):
    x = _param(rng, 2, 3, 3)
    layer = init_params(upsampling_deconv(2, 3, 2), 23)
    r = rng_fixed(rng, 3, 6, 6)
    return (lambda: reduce_sum(elementwise('mul', conv_transpose2d(x, layer), r))), \
        [x, layer.weight, layer.bias], 1e-6


@register_check('nn_layers', 'linear')
def _check_linear(rng):
    x = _param(rng, 5)
    layer = init_params(LayerSpec('linear', 5, 3), 24)
    r = rng_fixed(rng, 3)
    return (lambda: reduce_sum(elementwise('mul', linear(x, layer), r))), [x, layer.weight, layer.bias], 1e-6


@register_check('nn_layers', 'relu')
def _check_relu(rng):
    x = _away_from_zero(rng, 3, 4)
    r = rng_fixed(rng, 3, 4)
    return (lambda: reduce_sum(elementwise('mul', relu(x), r))), [x], 1e-6


@register_check('nn_layers', 'sigmoid')
def _check_sigmoid(rng):
    x = _param(rng, 3, 4, scale=2.0)
    r = rng_fixed(rng, 3, 4)
    return (lambda: reduce_sum(elementwise('mul', sigmoid(x), r))), [x], 1e-6


@register_check('nn_layers', 'max_pool2d')
def _check_max_pool2d(rng):
    # Distinct values at least 0.1 apart, so no tie is within eps
    values = rng.permutation(2 * 4 * 4).astype(np.float64) * 0.1
    x = Tensor(values.reshape(2, 4, 4), requires_grad=True)
    r = rng_fixed(rng, 2, 2, 2)
    return (lambda: reduce_sum(elementwise('mul', max_pool2d(x), r))), [x], 1e-6


@register_check('nn_layers', 'global_avg_pool')
def _check_global_avg_pool(rng):
    x = _param(rng, 3, 2, 4)
    r = rng_fixed(rng, 3)
    return (lambda: reduce_sum(elementwise('mul', global_avg_pool(x), r))), [x], 1e-6


@register_check('tps_warp', 'tps_grid')
def _check_tps_grid(rng):
    system = get_tps_system(config.CONTROL_POINTS_PER_SIDE)
    shifts = Tensor(rng.uniform(-0.2, 0.2, size=2 * system.count), requires_grad=True)
    r = rng_fixed(rng, 2, 6, 6)
    return (lambda: reduce_sum(elementwise('mul', tps_grid(shifts, system, (6, 6)), r))), [shifts], 1e-6


@register_check('tps_warp', 'grid_sample')
def _check_grid_sample(rng):
    size = 6
    f = _param(rng, 2, size, size)
    # Quarter-pixel offset keeps every sample away from the bilinear kinks
    offset = 0.25 * 2.0 / size
    field = Tensor(identity_field(size, size) + offset, requires_grad=True)
    r = rng_fixed(rng, 2, size, size)
    return (lambda: reduce_sum(elementwise('mul', grid_sample(f, field), r))), [f, field], 1e-6


def _micro_sequence(rng: np.random.Generator, frames: int, size: int) -> FrameSequence:
    return FrameSequence([rng.uniform(0.0, 1.0, size=(3, size, size)) for _ in range(frames)])


def _micro_warp_params(rng: np.random.Generator, variant: ModelVariant):
    """Micro model whose warp head predicts about a quarter-pixel translation"""
    model_config = create_profile('micro')
    params = init_model(model_config, variant, seed=int(rng.integers(1 << 30)))
    head = params.warp.head
    quarter_pixel = 0.25 * 2.0 / model_config.hr_size
    head.weight.data = rng.normal(0.0, 1e-3, size=head.weight.shape)
    head.bias.data = np.full(head.bias.shape, quarter_pixel)
    return params


@register_check('sr_networks', 'predict_warp')
def _check_predict_warp(rng):
    params = _micro_warp_params(rng, ModelVariant.parse('f3warp'))
    seq = _micro_sequence(rng, 2, params.model_config.lr_size)
    reference, moving = Tensor(seq.frames[0]), Tensor(seq.frames[1])
    r = rng_fixed(rng, 2 * params.model_config.control_points)
    warp = params.warp
    inputs = [warp.reference_stream[0].weight, warp.moving_stream[1].weight, warp.trunk[0].weight, warp.fc[0].weight]
    return (lambda: reduce_sum(elementwise('mul', predict_warp(reference, moving, params), r))), inputs, 1e-6


@register_check('sr_networks', 'forward_f5warp')
def _check_forward_f5warp(rng):
    variant = ModelVariant.parse('f5warp')
    params = _micro_warp_params(rng, variant)
    seq = _micro_sequence(rng, 5, params.model_config.lr_size)
    hr = params.model_config.hr_size
    target = rng.uniform(0.0, 1.0, size=(3, hr, hr))
    inputs = [
        params.central.upsample.weight,
        params.adjacent.fc[0].weight,
        params.warp.trunk[0].weight,
        params.warp.head.weight,
        params.reconstruction.convs[0].weight,
    ]
    return (lambda: mse(forward(seq, params, variant), target)), inputs, 1e-6


@register_check('perceptual_loss', 'total_loss')
def _check_total_loss(rng):
    net = FeatureNetwork.from_seed(int(rng.integers(1 << 30)))
    prediction = Tensor(rng.uniform(0.2, 0.8, size=(3, 16, 16)), requires_grad=True)
    target = rng.uniform(0.0, 1.0, size=(3, 16, 16))
    weights = LossWeights({TapNames.POOL3: 10.0, TapNames.POOL4: 10.0, TapNames.FC7: 10.0})
    return (lambda: total_loss(prediction, target, net, weights)), [prediction], 1e-6


def run_gradchecks(seed: int = 0, module: Optional[str] = None,
                   tolerance: float = config.GRADCHECK_TOLERANCE) -> List[GradcheckResult]:
    """
    Run the registered checks in 64-bit mode

    Args:
        seed: Seeds every check's inputs
        module: Restrict to one module's checks
        tolerance: Largest passing relative error

    Raises:
        ConfigError: Unknown module name
    """
    if module is not None and module not in CHECKS:
        raise ConfigError(f"No gradient checks for module '{module}'. Available: {get_available_modules()}")
    modules = [module] if module is not None else list(CHECKS)

    results = []
    with float64_mode():
        for name in modules:
            for op, builder in CHECKS[name].items():
                rng = np.random.default_rng([seed, len(results)])
                fn, inputs, eps = builder(rng)
                error = check_gradients(fn, inputs, eps, seed=seed)
                passed = bool(np.isfinite(error) and error < tolerance)
                results.append(GradcheckResult(name, op, error, passed))
                logger.info(LogMessages.GRADCHECK_RESULT.format(
                    op=f"{name}.{op}", error=error, status='ok' if passed else 'FAILED'))
    return results
