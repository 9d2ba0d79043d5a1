#!/usr/bin/env python3
"""
ADAM, unsupervised warp-predictor pretraining, end-to-end training and checkpoints
"""

import asyncio
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import pandas as pd

import config
from constants import LogMessages, SectionNames
from exceptions import ConfigError, NonFiniteError, ShapeError, VersionMismatchError
from models import EpochStats, FrameSequence, ModelVariant, TrainConfig
from perceptual_loss import FeatureNetwork, build_feature_network, total_loss
from sr_networks import (
    ModelConfig,
    ModelParams,
    create_profile,
    forward,
    get_tps_system,
    init_model,
    predict_warp,
)
from tensor_autodiff import Tape, Tensor, gradients, mse
from tensor_io import read_container, write_container
from tps_warp import grid_sample, tps_grid
from utils import log_epoch_statistics, log_run_start, log_run_summary

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

Item = TypeVar('Item')
LossAndGrads = Tuple[float, List[np.ndarray]]


@dataclass
class AdamState:
    """Moment buffers keyed by parameter name, stored in the parameter dtype"""
    lr: float = config.ADAM_LR
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    eps: float = config.ADAM_EPS
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    v: Dict[str, np.ndarray] = field(default_factory=OrderedDict)

    def hyperparameters(self) -> Dict[str, float]:
        return {'lr': self.lr, 'beta1': self.beta1, 'beta2': self.beta2, 'eps': self.eps}


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> AdamState:
    """
    One bias-corrected ADAM update, in place on the parameter tensors

    Args:
        params: Parameters by name
        grads: Gradient per parameter name (same shapes)
        state: Moment buffers; updated and returned

    Raises:
        ShapeError: A gradient's shape differs from its parameter
        NonFiniteError: A gradient contains NaN/Inf (names the parameter)
    """
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient for '{name}' has the wrong shape", param.shape, grad.shape)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"Gradient for '{name}' is not finite")

    state.t += 1
    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t

    for name, param in params.items():
        dtype = param.dtype
        grad = np.asarray(grads[name], dtype=dtype)
        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)

        m = (state.beta1 * state.m[name] + (1.0 - state.beta1) * grad).astype(dtype)
        v = (state.beta2 * state.v[name] + (1.0 - state.beta2) * (grad * grad)).astype(dtype)
        state.m[name], state.v[name] = m, v

        m_hat = m / bias1
        v_hat = v / bias2
        updated = (param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(dtype)
        if not np.all(np.isfinite(updated)):
            raise NonFiniteError(f"ADAM produced non-finite values for '{name}'")
        param.data = updated
    return state


class TrainResult(NamedTuple):
    params: ModelParams
    state: AdamState
    history: List[EpochStats]


def _map_samples(fn: Callable[[Item], LossAndGrads], items: Sequence[Item], threads: int) -> List[LossAndGrads]:
    """Apply fn to every item, concurrently when threads > 1; results keep item order"""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    async def run_all() -> List[LossAndGrads]:
        semaphore = asyncio.Semaphore(threads)

        async def run_with_semaphore(item: Item) -> LossAndGrads:
            async with semaphore:
                return await asyncio.to_thread(fn, item)

        return await asyncio.gather(*(run_with_semaphore(item) for item in items))

    return asyncio.run(run_all())


def _merge(results: Sequence[LossAndGrads]) -> Tuple[List[float], List[np.ndarray]]:
    """Sum gradients in sample order, then divide by the batch size"""
    losses = [loss for loss, _ in results]
    merged = [grad.copy() for grad in results[0][1]]
    for _, grads in results[1:]:
        for total, grad in zip(merged, grads):
            total += grad
    return losses, [total / len(results) for total in merged]


def _run_epochs(what: str, items: Sequence[Item], loss_and_grads: Callable[[Item], LossAndGrads],
                trainable: Mapping[str, Tensor], state: AdamState, train_config: TrainConfig,
                start_epoch: int = 0, epochs: Optional[int] = None,
                on_epoch_end: Optional[Callable[[int], None]] = None) -> List[EpochStats]:
    """Shuffled mini-batch loop shared by training and warp pretraining"""
    epochs = train_config.epochs if epochs is None else epochs
    names = list(trainable)
    history: List[EpochStats] = []

    for epoch in range(start_epoch, epochs):
        start_time = time.time()
        # One generator per epoch, so a run resumed at an epoch boundary sees the same order
        order = np.random.default_rng([train_config.seed, epoch]).permutation(len(items))
        epoch_losses: List[float] = []

        for start in range(0, len(order), train_config.batch_size):
            batch = [items[i] for i in order[start:start + train_config.batch_size]]
            losses, grads = _merge(_map_samples(loss_and_grads, batch, train_config.threads))
            adam_step(trainable, dict(zip(names, grads)), state)
            epoch_losses.extend(losses)

        stats = EpochStats(epoch + 1, float(np.mean(epoch_losses)), time.time() - start_time, len(items))
        history.append(stats)
        log_epoch_statistics(stats, epochs, logger)
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1)

    log_run_summary(what, history, logger)
    return history


def fit_sequence(seq: FrameSequence, variant: ModelVariant) -> FrameSequence:
    """
    Central window of the variant's length

    Raises:
        ShapeError: The sequence is shorter than the variant
    """
    if len(seq) == variant.frames:
        return seq
    if len(seq) < variant.frames:
        raise ShapeError(f"{variant.name} needs {variant.frames} frames, sample {seq.sample_id} has {len(seq)}")
    return seq.window(variant.frames)


def sample_loss_and_grads(seq: FrameSequence, params: ModelParams, variant: ModelVariant,
                          net: FeatureNetwork, train_config: TrainConfig,
                          trainable: Sequence[Tensor]) -> LossAndGrads:
    """Forward, loss and backward for one sample on its own tape"""
    if seq.ground_truth is None:
        raise ValueError(f"Sample {seq.sample_id} has no ground truth")
    with Tape():
        prediction = forward(seq, params, variant)
        loss = total_loss(prediction, seq.ground_truth, net, train_config.loss_weights)
        value = loss.item()
        if not np.isfinite(value):
            logger.error(LogMessages.NON_FINITE_LOSS.format(sample_id=seq.sample_id))
            raise NonFiniteError("Training loss is not finite", seq.sample_id)
        grads = gradients(loss, trainable)
    return value, grads


def train(params: ModelParams, dataset: Sequence[FrameSequence], train_config: TrainConfig,
          net: Optional[FeatureNetwork] = None, checkpoint_dir: Optional[Union[str, Path]] = None,
          state: Optional[AdamState] = None, start_epoch: int = 0) -> TrainResult:
    """
    End-to-end supervised training

    Args:
        params: Model parameters, updated in place
        dataset: Sequences with ground truth; longer ones are windowed centrally
        train_config: Run configuration
        net: Frozen feature network (built from the config when omitted)
        checkpoint_dir: Where periodic checkpoints go (needs checkpoint_every > 0)
        state: ADAM state to resume from
        start_epoch: Epochs already completed

    Returns:
        TrainResult with the per-epoch history of this call
    """
    if not dataset:
        raise ValueError("Cannot train on an empty dataset")
    variant = train_config.variant
    sequences = [fit_sequence(seq, variant) for seq in dataset]
    net = net or build_feature_network(train_config)
    state = state or AdamState(lr=train_config.lr)
    trainable = params.trainable(variant, train_config.freeze_warp)
    tensors = list(trainable.values())

    def loss_and_grads(seq: FrameSequence) -> LossAndGrads:
        return sample_loss_and_grads(seq, params, variant, net, train_config, tensors)

    def on_epoch_end(epoch: int) -> None:
        if checkpoint_dir is not None and train_config.checkpoint_every > 0 \
                and epoch % train_config.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"epoch_{epoch:04d}.wsrc"
            save_checkpoint(path, params, state, train_config, epoch)

    log_run_start('training', f"{variant.name} on {len(sequences)} samples, "
                              f"{train_config.epochs - start_epoch} epochs, {len(tensors)} tensors", logger)
    history = _run_epochs('Training', sequences, loss_and_grads, trainable, state, train_config,
                          start_epoch, on_epoch_end=on_epoch_end)
    return TrainResult(params, state, history)


def warp_pairs(dataset: Sequence[FrameSequence]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(central, adjacent) low-resolution pairs from every sequence"""
    pairs = []
    for seq in dataset:
        k = seq.central_index
        pairs.extend((seq.frames[k], frame) for i, frame in enumerate(seq.frames) if i != k)
    return pairs


def warp_alignment_loss(reference: Tensor, moving: Tensor, params: ModelParams) -> Tensor:
    """mse(moving sampled at the predicted warp, reference) at input resolution"""
    system = get_tps_system(params.model_config.control_points_per_side)
    shifts = predict_warp(reference, moving, params)
    aligned = grid_sample(moving, tps_grid(shifts, system, moving.shape[1:]))
    return mse(aligned, reference)


def pretrain_warp(params: ModelParams, pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
                  train_config: TrainConfig, epochs: Optional[int] = None) -> TrainResult:
    """
    Unsupervised warp-predictor pretraining on image pairs; only θ_P changes

    Args:
        params: Model parameters (warp predictor updated in place)
        pairs: (reference, moving) low-resolution images
        train_config: Supplies lr, batch size, seed and threads
        epochs: Overrides train_config.epochs
    """
    if not pairs:
        raise ValueError("Cannot pretrain on an empty set of pairs")
    prefix = f"{SectionNames.WARP}/"
    trainable = OrderedDict((name, tensor) for name, tensor in params.named_tensors().items()
                            if name.startswith(prefix))
    tensors = list(trainable.values())
    state = AdamState(lr=train_config.lr)

    def loss_and_grads(pair: Tuple[np.ndarray, np.ndarray]) -> LossAndGrads:
        reference, moving = Tensor(pair[0]), Tensor(pair[1])
        with Tape():
            loss = warp_alignment_loss(reference, moving, params)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError("Warp pretraining loss is not finite")
            grads = gradients(loss, tensors)
        return value, grads

    log_run_start('warp pretraining', f"{len(pairs)} pairs", logger)
    history = _run_epochs('Warp pretraining', list(pairs), loss_and_grads, trainable, state,
                          train_config, epochs=epochs)
    return TrainResult(params, state, history)


def save_warp_weights(path: Union[str, Path], params: ModelParams) -> None:
    """Write θ_P alone, with the model config it belongs to"""
    prefix = f"{SectionNames.WARP}/"
    sections = OrderedDict((name, tensor) for name, tensor in params.named_tensors().items()
                           if name.startswith(prefix))
    write_container(path, sections, {'kind': 'warp_predictor', 'model_config': params.model_config.to_dict(),
                                     'checkpoint_version': CHECKPOINT_VERSION})


def load_warp_weights(params: ModelParams, path: Union[str, Path]) -> None:
    """Overwrite θ_P from a pretrain-warp output or a full checkpoint"""
    sections, _ = read_container(path)
    prefix = f"{SectionNames.WARP}/"
    warp_sections = {name: array for name, array in sections.items() if name.startswith(prefix)}
    if not warp_sections:
        raise ShapeError(f"{path} holds no warp-predictor sections")
    expected = [name for name in params.named_tensors() if name.startswith(prefix)]
    missing = [name for name in expected if name not in warp_sections]
    if missing:
        raise ShapeError(f"{path} lacks warp-predictor tensors: {', '.join(missing[:5])}")
    params.load_arrays(warp_sections, strict=False)
    logger.info(f"Loaded pretrained warp predictor from {path}")


class Checkpoint(NamedTuple):
    params: ModelParams
    state: AdamState
    train_config: TrainConfig
    epoch: int
    config_hash: str


def save_checkpoint(path: Union[str, Path], params: ModelParams, state: AdamState,
                    train_config: TrainConfig, epoch: int) -> None:
    """Parameters, ADAM buffers and the run config in one container"""
    sections: 'OrderedDict[str, Any]' = OrderedDict(params.named_tensors())
    for name, buffer in state.m.items():
        sections[f"{SectionNames.ADAM_M}/{name}"] = buffer
    for name, buffer in state.v.items():
        sections[f"{SectionNames.ADAM_V}/{name}"] = buffer

    meta = {
        'checkpoint_version': CHECKPOINT_VERSION,
        'config': train_config.to_mapping(),
        'config_hash': train_config.config_hash(),
        'model_config': params.model_config.to_dict(),
        'variant': params.variant.name,
        'epoch': epoch,
        'adam_t': state.t,
        'adam': state.hyperparameters(),
    }
    write_container(path, sections, meta)
    logger.info(LogMessages.CHECKPOINT_SAVED.format(path=path))


def load_checkpoint(path: Union[str, Path], expected_config: Optional[TrainConfig] = None) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint

    A config hash that differs from expected_config is logged as a warning.

    Raises:
        CorruptFileError: Bad magic, truncation or trailing bytes
        VersionMismatchError: Container or checkpoint version differs
    """
    sections, meta = read_container(path)
    version = meta.get('checkpoint_version')
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path} has checkpoint version {version}, expected {CHECKPOINT_VERSION}")

    train_config = TrainConfig.from_mapping(meta['config'])
    model_config = ModelConfig.from_dict(meta['model_config'])
    variant = ModelVariant.parse(meta['variant'])
    params = init_model(model_config, variant)

    param_arrays, m, v = OrderedDict(), OrderedDict(), OrderedDict()
    for name, array in sections.items():
        if name.startswith(f"{SectionNames.ADAM_M}/"):
            m[name[len(SectionNames.ADAM_M) + 1:]] = array
        elif name.startswith(f"{SectionNames.ADAM_V}/"):
            v[name[len(SectionNames.ADAM_V) + 1:]] = array
        else:
            param_arrays[name] = array
    params.load_arrays(param_arrays, strict=True)

    state = AdamState(t=int(meta['adam_t']), m=m, v=v, **meta['adam'])
    config_hash = meta['config_hash']
    if expected_config is not None and expected_config.config_hash() != config_hash:
        logger.warning(LogMessages.CONFIG_HASH_MISMATCH.format(found=config_hash,
                                                               expected=expected_config.config_hash()))
    return Checkpoint(params, state, train_config, int(meta['epoch']), config_hash)


def build_model(train_config: TrainConfig) -> ModelParams:
    """Fresh parameters for a run config, with the pretrained warp predictor if one is named"""
    model_config = create_profile(train_config.profile, feature_channels=train_config.feature_channels)
    params = init_model(model_config, train_config.variant, train_config.seed)
    if train_config.pretrained_warp:
        load_warp_weights(params, train_config.pretrained_warp)
    return params


def check_frame_size(dataset: Sequence[FrameSequence], model_config: ModelConfig) -> None:
    """
    Every low-resolution frame must match the profile's lr_size

    Raises:
        ConfigError: A sample was generated for another profile
    """
    for seq in dataset:
        size = seq.frames[0].shape[1:]
        if size != (model_config.lr_size, model_config.lr_size):
            raise ConfigError(f"Sample {seq.sample_id} has {size[0]}x{size[1]} frames but profile "
                              f"'{model_config.name}' expects {model_config.lr_size}x{model_config.lr_size}; "
                              f"pass the --profile the data was generated with")


def write_history(history: Sequence[EpochStats], path: Union[str, Path]) -> Path:
    """Loss history as CSV: epoch, mean_loss, wall_time_s"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([stats.to_dict() for stats in history], columns=config.HISTORY_FIELDS)
    frame.to_csv(path, index=False)
    logger.info(f"Saved loss history ({len(history)} epochs) to {path}")
    return path
