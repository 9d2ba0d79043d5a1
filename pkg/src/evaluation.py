#!/usr/bin/env python3
"""
Metrics: luminance PSNR, verification EER, deep-feature distances and track similarity
"""

import asyncio
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image

import config
from constants import BaselineNames, TapNames
from exceptions import ShapeError
from models import FrameSequence, ModelVariant, ScoredPair
from perceptual_loss import FeatureNetwork, build_feature_network, tap_features
from sr_networks import ModelParams, forward
from tensor_autodiff import Tensor, no_grad
from training import fit_sequence, load_checkpoint
from utils import with_error_handling

logger = logging.getLogger(__name__)

# BT.601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

ReportRow = Dict[str, Union[str, float]]


def _as_array(img) -> np.ndarray:
    return np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)


def luminance(img) -> np.ndarray:
    """Y channel of a 3×H×W RGB image"""
    img = _as_array(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError("luminance expects a 3×H×W image", img.shape)
    return np.tensordot(LUMA_WEIGHTS, img, axes=([0], [0]))


def psnr_luma(a, b) -> float:
    """
    PSNR of the luminance channel for images in [0, 1]

    Identical images (and anything above the cap) give config.PSNR_CAP_DB.

    Raises:
        ShapeError: If the images differ in shape
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError("psnr_luma: image shapes differ", a.shape, b.shape)
    error = float(np.mean((luminance(a) - luminance(b)) ** 2))
    if error == 0.0:
        return config.PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / error), config.PSNR_CAP_DB)


def eer(pairs: Sequence[ScoredPair]) -> float:
    """
    Equal error rate from scored verification pairs

    Thresholds are the sorted unique scores plus +inf; a pair is accepted when
    its score is >= the threshold. Where FNR − FPR changes sign between two
    thresholds the crossing is interpolated linearly; exact crossings take the
    lowest error among them.

    Raises:
        ValueError: If only one class is present
    """
    scores = np.array([pair.similarity for pair in pairs], dtype=np.float64)
    labels = np.array([pair.same_identity for pair in pairs], dtype=bool)
    positives, negatives = int(labels.sum()), int((~labels).sum())
    if positives == 0 or negatives == 0:
        raise ValueError(f"EER needs both classes, got {positives} positive and {negatives} negative pairs")

    thresholds = np.append(np.unique(scores), np.inf)
    accepted = scores[None, :] >= thresholds[:, None]
    fpr = (accepted & ~labels).sum(axis=1) / negatives
    fnr = (~accepted & labels).sum(axis=1) / positives
    diff = fnr - fpr

    exact = np.flatnonzero(diff == 0)
    if exact.size:
        return float(fpr[exact].min())

    # diff goes from -1 at the lowest threshold to +1 at +inf
    j = int(np.flatnonzero(diff > 0)[0])
    alpha = -diff[j - 1] / (diff[j] - diff[j - 1])
    return float(fpr[j - 1] + alpha * (fpr[j] - fpr[j - 1]))


@with_error_handling(default_return=None)
def safe_eer(pairs: Sequence[ScoredPair]) -> Optional[float]:
    """eer, or None (logged) when the pairs do not cover both classes"""
    return eer(pairs)


def _unit(vector: np.ndarray) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(vector)
    return vector / max(norm, np.finfo(np.float64).tiny)


def descriptor(img, net: FeatureNetwork) -> np.ndarray:
    """Unit-norm fc7 descriptor"""
    with no_grad():
        return _unit(tap_features(Tensor(_as_array(img)), net, TapNames.FC7).data)


def feature_l2(a, b, net: FeatureNetwork, tap: str) -> float:
    """L2 distance between unit-normalized tap features, in [0, 2]"""
    with no_grad():
        fa = tap_features(Tensor(_as_array(a)), net, tap).data
        fb = tap_features(Tensor(_as_array(b)), net, tap).data
    return float(np.linalg.norm(_unit(fa) - _unit(fb)))


def mean_pairwise_cosine(descriptors_a: np.ndarray, descriptors_b: np.ndarray) -> float:
    """Mean cosine over all rows of a × rows of b (rows are unit vectors)"""
    descriptors_a = np.atleast_2d(descriptors_a)
    descriptors_b = np.atleast_2d(descriptors_b)
    if not len(descriptors_a) or not len(descriptors_b):
        raise ValueError("Tracks must be non-empty")
    return float(np.mean(descriptors_a @ descriptors_b.T))


def track_descriptors(track: Sequence, net: FeatureNetwork, frame_cap: int = config.TRACK_FRAME_CAP) -> np.ndarray:
    """Descriptors of the first frame_cap frames of a track"""
    if not track:
        raise ValueError("Track must be non-empty")
    return np.stack([descriptor(img, net) for img in list(track)[:frame_cap]])


def track_similarity(track_a: Sequence, track_b: Sequence, net: FeatureNetwork,
                     frame_cap: int = config.TRACK_FRAME_CAP) -> float:
    """Mean descriptor cosine over all frame pairs of two tracks"""
    return mean_pairwise_cosine(track_descriptors(track_a, net, frame_cap),
                                track_descriptors(track_b, net, frame_cap))


def bicubic_upsample(lr, size: int) -> np.ndarray:
    """Per-channel bicubic resize of a 3×h×w image to 3×size×size"""
    lr = _as_array(lr)
    channels = []
    for channel in lr:
        resized = Image.fromarray(channel.astype(np.float32)).resize((size, size), Image.Resampling.BICUBIC)
        channels.append(np.asarray(resized, dtype=np.float64))
    return np.clip(np.stack(channels), 0.0, 1.0)


Track = Tuple[str, List[np.ndarray]]  # (identity, images)


def group_tracks(sequences: Sequence[FrameSequence], images: Sequence[np.ndarray]) -> 'OrderedDict[str, Track]':
    """Images grouped by track id, tracks in sorted order"""
    tracks: Dict[str, Track] = {}
    for seq, img in zip(sequences, images):
        track_id = seq.track_id or seq.sample_id
        identity = seq.identity or track_id
        tracks.setdefault(track_id, (identity, []))[1].append(img)
    return OrderedDict(sorted(tracks.items()))


def verification_pairs(tracks: 'OrderedDict[str, Track]', net: FeatureNetwork,
                       frame_cap: int = config.TRACK_FRAME_CAP, threads: int = 1) -> List[ScoredPair]:
    """Every unordered pair of distinct tracks, scored by track similarity"""
    ids = list(tracks)

    async def describe_all() -> List[np.ndarray]:
        semaphore = asyncio.Semaphore(max(1, threads))

        async def describe(track_id: str) -> np.ndarray:
            async with semaphore:
                return await asyncio.to_thread(track_descriptors, tracks[track_id][1], net, frame_cap)

        return await asyncio.gather(*(describe(track_id) for track_id in ids))

    if threads > 1:
        descriptors = asyncio.run(describe_all())
    else:
        descriptors = [track_descriptors(tracks[track_id][1], net, frame_cap) for track_id in ids]

    pairs = []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            same = tracks[ids[i]][0] == tracks[ids[j]][0]
            pairs.append(ScoredPair(mean_pairwise_cosine(descriptors[i], descriptors[j]), same))
    return pairs


def _eer_pct(sequences: Sequence[FrameSequence], images: Sequence[np.ndarray], net: FeatureNetwork,
             threads: int) -> Union[float, str]:
    value = safe_eer(verification_pairs(group_tracks(sequences, images), net, threads=threads))
    return config.NOT_AVAILABLE if value is None else 100.0 * (1.0 - value)


def reconstruct_all(params: ModelParams, dataset: Sequence[FrameSequence],
                    variant: Optional[ModelVariant] = None) -> List[np.ndarray]:
    """Central-frame reconstructions without recording a tape"""
    variant = variant or params.variant
    with no_grad():
        return [forward(fit_sequence(seq, variant), params, variant).data.astype(np.float64)
                for seq in dataset]


def evaluate_model(params: ModelParams, dataset: Sequence[FrameSequence], net: FeatureNetwork,
                   name: Optional[str] = None, threads: int = 1) -> ReportRow:
    """
    One report row: 100·(1−EER) over tracks, mean PSNR and mean feature distances

    Raises:
        ValueError: If a sample has no ground truth
    """
    if not dataset:
        raise ValueError("Cannot evaluate on an empty dataset")
    if any(seq.ground_truth is None for seq in dataset):
        raise ValueError("Every evaluation sample needs a ground truth image")
    reconstructions = reconstruct_all(params, dataset)
    truths = [seq.ground_truth for seq in dataset]

    row: ReportRow = {'variant': name or params.variant.name}
    row['eer_pct'] = _eer_pct(dataset, reconstructions, net, threads)
    row['psnr_db'] = float(np.mean([psnr_luma(r, g) for r, g in zip(reconstructions, truths)]))
    for tap in TapNames.ALL:
        row[f'l2_{tap}'] = float(np.mean([feature_l2(r, g, net, tap) for r, g in zip(reconstructions, truths)]))
    logger.info(f"Evaluated {row['variant']} on {len(dataset)} samples: PSNR {row['psnr_db']:.2f} dB")
    return row


def evaluate_checkpoint(path: Union[str, Path], dataset: Sequence[FrameSequence],
                        net: Optional[FeatureNetwork] = None, threads: int = 1) -> ReportRow:
    """Load a checkpoint and evaluate it"""
    checkpoint = load_checkpoint(path)
    net = net or build_feature_network(checkpoint.train_config)
    return evaluate_model(checkpoint.params, dataset, net, checkpoint.params.variant.name, threads)


def evaluate_baselines(dataset: Sequence[FrameSequence], net: FeatureNetwork, hr_size: int,
                       threads: int = 1) -> List[ReportRow]:
    """Ground-truth and bicubic rows; only the verification column is filled"""
    if any(seq.ground_truth is None for seq in dataset):
        raise ValueError("The ground-truth baseline needs a ground truth image for every sample")
    truths = [seq.ground_truth for seq in dataset]
    bicubic = [bicubic_upsample(seq.central, hr_size) for seq in dataset]
    rows = []
    for name, images in ((BaselineNames.GROUND_TRUTH, truths), (BaselineNames.BICUBIC, bicubic)):
        row: ReportRow = {field: config.NOT_AVAILABLE for field in config.REPORT_FIELDS}
        row['variant'] = name
        row['eer_pct'] = _eer_pct(dataset, images, net, threads)
        rows.append(row)
    return rows


def write_report(rows: Sequence[ReportRow], path: Union[str, Path]) -> Path:
    """Metrics CSV: variant, eer_pct, psnr_db, l2_pool3, l2_pool4, l2_fc7"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rows), columns=config.REPORT_FIELDS).to_csv(path, index=False)
    logger.info(f"Saved report with {len(rows)} rows to {path}")
    return path
