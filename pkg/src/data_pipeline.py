#!/usr/bin/env python3
"""
Image I/O, the blur + downsample degradation protocol and synthetic face sequences
"""

import asyncio
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import correlate1d

import config
from constants import LogMessages
from exceptions import CorruptFileError, ImageFormatError, MotionBoundsError, ShapeError
from models import DegradationSpec, FrameSequence, MotionSpec
from tensor_autodiff import Tensor, no_grad
from tensor_io import read_container, write_container
from tps_warp import TpsParams, TpsSystem, warp

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.tsv'


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled 1-D Gaussian with radius ⌈3σ⌉, normalized to sum 1"""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-offsets ** 2 / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a C×H×W image, reflected at the edges"""
    kernel = gaussian_kernel(sigma)
    out = np.asarray(img, dtype=np.float64)
    out = correlate1d(out, kernel, axis=1, mode='reflect')
    out = correlate1d(out, kernel, axis=2, mode='reflect')
    return np.clip(out, 0.0, 1.0)


def area_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Average over non-overlapping factor×factor blocks"""
    channels, height, width = img.shape
    if height % factor or width % factor:
        raise ShapeError(f"Image size is not a multiple of {factor}", img.shape)
    blocks = np.asarray(img, dtype=np.float64).reshape(
        channels, height // factor, factor, width // factor, factor)
    return blocks.mean(axis=(2, 4))


def degrade(hr: np.ndarray, spec: DegradationSpec = DegradationSpec()) -> np.ndarray:
    """
    Optional blur, then area downsampling to lr_size

    Raises:
        ShapeError: If hr is not 3×hr_size×hr_size
    """
    expected = (3, spec.hr_size, spec.hr_size)
    if hr.shape != expected:
        raise ShapeError("degrade: wrong high-resolution size", hr.shape, expected)
    img = gaussian_blur(hr, spec.blur_sigma) if spec.apply_blur else np.asarray(hr, dtype=np.float64)
    return np.clip(area_downsample(img, spec.magnification), 0.0, 1.0)


def _ellipse(xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, rx: float, ry: float,
             softness: float) -> np.ndarray:
    """Soft-edged ellipse mask in [0, 1]"""
    d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    return np.clip((1.0 - d) / softness + 0.5, 0.0, 1.0)


def synth_face(size: int, rng: np.random.Generator) -> np.ndarray:
    """
    Procedural face-like texture: background gradient, head, hair, eyes,
    nose, mouth and fine skin detail

    Returns:
        3×size×size image in [0, 1]
    """
    ticks = -1.0 + (2.0 * np.arange(size) + 1.0) / size
    yy, xx = np.meshgrid(ticks, ticks, indexing='ij')
    soft = 4.0 / size

    background = rng.uniform(0.1, 0.9, size=3)
    tilt = rng.uniform(-0.3, 0.3, size=(3, 2))
    img = background[:, None, None] + tilt[:, 0, None, None] * xx + tilt[:, 1, None, None] * yy

    skin = np.array([0.85, 0.65, 0.5]) * rng.uniform(0.6, 1.1)
    head = _ellipse(xx, yy, rng.uniform(-0.05, 0.05), 0.05, rng.uniform(0.55, 0.7), rng.uniform(0.7, 0.85), soft)
    hair_color = rng.uniform(0.05, 0.5) * np.array([1.0, 0.8, 0.6])
    hair = _ellipse(xx, yy, 0.0, -0.55, 0.7, 0.4, soft) * (yy < -0.35)

    img = img * (1 - head) + skin[:, None, None] * head
    img = img * (1 - hair) + hair_color[:, None, None] * hair

    eye_y = rng.uniform(-0.2, -0.05)
    eye_dx = rng.uniform(0.2, 0.3)
    iris = rng.uniform(0.0, 0.4, size=3)
    for side in (-1.0, 1.0):
        white = _ellipse(xx, yy, side * eye_dx, eye_y, 0.12, 0.06, soft)
        pupil = _ellipse(xx, yy, side * eye_dx, eye_y, 0.05, 0.05, soft)
        brow = _ellipse(xx, yy, side * eye_dx, eye_y - 0.13, 0.14, 0.025, soft)
        img = img * (1 - white) + 0.95 * white
        img = img * (1 - pupil) + iris[:, None, None] * pupil
        img = img * (1 - brow) + hair_color[:, None, None] * brow

    nose = _ellipse(xx, yy, 0.0, 0.15, 0.05, 0.12, soft)
    img = img * (1 - 0.3 * nose)
    mouth = _ellipse(xx, yy, 0.0, rng.uniform(0.4, 0.5), rng.uniform(0.15, 0.25), 0.05, soft)
    lips = np.array([0.7, 0.3, 0.3]) * rng.uniform(0.7, 1.0)
    img = img * (1 - mouth) + lips[:, None, None] * mouth

    detail = rng.normal(0.0, 0.03, size=(1, size, size))
    img = img + detail * head
    return np.clip(img, 0.0, 1.0)


def random_motion(motion: MotionSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """Global translation plus independent per-control-point jitter, length 2·count"""
    translation = rng.uniform(-motion.max_translation, motion.max_translation, size=2)
    jitter = rng.uniform(-motion.max_shift, motion.max_shift, size=(count, 2))
    return (jitter + translation).reshape(-1)


class SyntheticSample(NamedTuple):
    """A generated sequence with its motion labels"""
    sequence: FrameSequence
    oracle_shifts: np.ndarray  # n×2C; frame i (HR) = base sampled at tps_grid(oracle_shifts[i])
    hr_frames: List[np.ndarray]


def _check_motion(motion: MotionSpec) -> None:
    if motion.max_shift + motion.max_translation > config.MAX_MOTION:
        raise MotionBoundsError(
            f"Motion bound {motion.max_shift + motion.max_translation:.3f} exceeds {config.MAX_MOTION}")


def _warp_hr(base: np.ndarray, shifts: np.ndarray, system: TpsSystem) -> np.ndarray:
    with no_grad():
        out = warp(Tensor(base, dtype=np.float64), Tensor(shifts, dtype=np.float64), system)
    return np.clip(out.data, 0.0, 1.0)


def synth_sequence(base: np.ndarray, motion: MotionSpec, n: int, spec: DegradationSpec = DegradationSpec(),
                   seed: int = 0, system: Optional[TpsSystem] = None) -> SyntheticSample:
    """
    n frames of base under random smooth motion, degraded to low resolution

    The central frame is base itself; its oracle shifts are zero.

    Raises:
        ShapeError: n is even
        MotionBoundsError: motion exceeds config.MAX_MOTION
    """
    if n < 1 or n % 2 == 0:
        raise ShapeError(f"Sequence length must be odd, got {n}")
    _check_motion(motion)
    system = system or TpsSystem()
    rng = np.random.default_rng(seed)
    central = n // 2

    shifts = np.zeros((n, 2 * system.count))
    hr_frames = []
    for i in range(n):
        if i == central:
            hr_frames.append(np.asarray(base, dtype=np.float64))
            continue
        shifts[i] = random_motion(motion, system.count, rng)
        hr_frames.append(_warp_hr(base, shifts[i], system))

    lr_frames = [degrade(frame, spec) for frame in hr_frames]
    sequence = FrameSequence(lr_frames, hr_frames[central])
    return SyntheticSample(sequence, shifts, hr_frames)


def synthetic_dataset(count: int, frames: int, spec: DegradationSpec = DegradationSpec(), seed: int = 0,
                      motion: MotionSpec = MotionSpec(), system: Optional[TpsSystem] = None) -> List[FrameSequence]:
    """
    In-memory synthetic sequences, one face per sample

    Seeding follows generate_dataset, so sample i here has the same motion
    stream as sample i of a dataset written with the same seed.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    system = system or TpsSystem()
    dataset = []
    for index in range(count):
        base = synth_face(spec.hr_size, np.random.default_rng([seed, 0, index]))
        sample_seed = int(np.random.SeedSequence([seed, 1, index]).generate_state(1)[0])
        sequence = synth_sequence(base, motion, frames, spec, seed=sample_seed, system=system).sequence
        sequence.sample_id = f"s{index:05d}"
        dataset.append(sequence)
    return dataset


class TranslationPair(NamedTuple):
    """Low-resolution pair where moving(x) = reference(x + translation)"""
    reference: np.ndarray
    moving: np.ndarray
    alignment: np.ndarray  # (dx, dy) a predictor should output for every control point


def translation_pairs(count: int, delta: float, spec: DegradationSpec = DegradationSpec(), seed: int = 0,
                      system: Optional[TpsSystem] = None) -> List[TranslationPair]:
    """
    Pairs related by a uniform translation of ±delta per axis (random signs)

    Raises:
        MotionBoundsError: delta exceeds config.MAX_MOTION
    """
    if abs(delta) > config.MAX_MOTION:
        raise MotionBoundsError(f"Translation {delta} exceeds {config.MAX_MOTION}")
    system = system or TpsSystem()
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        base = synth_face(spec.hr_size, rng)
        translation = delta * rng.choice([-1.0, 1.0], size=2)
        moved = _warp_hr(base, TpsParams.uniform(*translation, count=system.count).shifts, system)
        pairs.append(TranslationPair(degrade(base, spec), degrade(moved, spec), -translation))
    return pairs


def load_image(path: Union[str, Path]) -> np.ndarray:
    """
    Read an 8-bit RGB PNG as a 3×H×W float image in [0, 1]

    Raises:
        ImageFormatError: Not a PNG or not 8-bit RGB
    """
    try:
        with Image.open(path) as img:
            if img.format != 'PNG':
                raise ImageFormatError(f"{path}: unsupported format {img.format}, expected PNG")
            if img.mode != 'RGB':
                raise ImageFormatError(f"{path}: unsupported mode {img.mode}, expected 8-bit RGB")
            pixels = np.asarray(img, dtype=np.float64)
    except UnidentifiedImageError as e:
        raise ImageFormatError(f"{path}: not an image file") from e
    return pixels.transpose(2, 0, 1) / 255.0


def save_image(img: Union[np.ndarray, Tensor], path: Union[str, Path]) -> None:
    """Write a 3×H×W image in [0, 1] as an 8-bit RGB PNG"""
    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ShapeError("save_image expects a 3×H×W image", data.shape)
    pixels = np.rint(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path, format='PNG')


@dataclass(frozen=True)
class DatasetLayout:
    """How samples are assigned to identities and tracks"""
    samples: int

    @property
    def identities(self) -> int:
        return max(2, self.samples // 4)

    def identity(self, index: int) -> str:
        return f"id{index % self.identities:03d}"

    def track(self, index: int) -> int:
        """Two tracks per identity, alternating"""
        return (index // self.identities) % 2

    def track_id(self, index: int) -> str:
        return f"{self.identity(index)}-{self.track(index)}"


def _track_gain(track: int) -> float:
    return 0.92 if track == 0 else 1.08


def _write_sample(out_dir: Path, index: int, frames: int, seed: int, layout: DatasetLayout,
                  spec: DegradationSpec, motion: MotionSpec, system: TpsSystem) -> dict:
    sample_id = f"s{index:05d}"
    identity_index = index % layout.identities
    base = synth_face(spec.hr_size, np.random.default_rng([seed, 0, identity_index]))
    base = np.clip(base * _track_gain(layout.track(index)), 0.0, 1.0)

    sample_seed = int(np.random.SeedSequence([seed, 1, index]).generate_state(1)[0])
    sample = synth_sequence(base, motion, frames, spec, seed=sample_seed, system=system)
    lr_paths = []
    for j, frame in enumerate(sample.sequence.frames):
        rel = Path('lr') / f"{sample_id}_{j:02d}.png"
        save_image(frame, out_dir / rel)
        lr_paths.append(rel.as_posix())
    hr_rel = Path('hr') / f"{sample_id}.png"
    save_image(sample.sequence.ground_truth, out_dir / hr_rel)
    warp_rel = Path('warps') / f"{sample_id}.wsr"
    write_container(out_dir / warp_rel, {'shifts': sample.oracle_shifts},
                    {'sample_id': sample_id, 'frames': frames, 'control_points': system.count})

    return {
        'sample_id': sample_id,
        'identity': layout.identity(index),
        'track_id': layout.track_id(index),
        'lr_frames': ','.join(lr_paths),
        'hr_path': hr_rel.as_posix(),
        'warp_path': warp_rel.as_posix(),
    }


async def _write_all(out_dir: Path, samples: int, frames: int, seed: int, spec: DegradationSpec,
                     motion: MotionSpec, system: TpsSystem, threads: int) -> List[dict]:
    layout = DatasetLayout(samples)
    semaphore = asyncio.Semaphore(threads)

    async def write_with_semaphore(index: int) -> dict:
        async with semaphore:
            return await asyncio.to_thread(_write_sample, out_dir, index, frames, seed, layout,
                                           spec, motion, system)

    tasks = [write_with_semaphore(i) for i in range(samples)]
    # gather keeps task order, so the manifest is independent of scheduling
    return await asyncio.gather(*tasks)


def generate_dataset(out_dir: Union[str, Path], samples: int, frames: int, seed: int = 0,
                     spec: DegradationSpec = DegradationSpec(), motion: MotionSpec = MotionSpec(),
                     threads: int = 1, system: Optional[TpsSystem] = None) -> pd.DataFrame:
    """
    Write a synthetic dataset: lr/*.png, hr/*.png, warps/*.wsr and manifest.tsv

    Args:
        out_dir: Output directory (created if missing)
        samples: Number of sequences
        frames: Odd sequence length
        seed: Master seed; each sample derives its own
        spec: Degradation protocol
        motion: Synthetic motion bounds
        threads: Samples generated concurrently

    Returns:
        The manifest as a DataFrame
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    if frames < 1 or frames % 2 == 0:
        raise ShapeError(f"Sequence length must be odd, got {frames}")
    _check_motion(motion)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    system = system or TpsSystem()

    start_time = time.time()
    rows = asyncio.run(_write_all(out_dir, samples, frames, seed, spec, motion, system, max(1, threads)))
    manifest = pd.DataFrame(rows, columns=config.MANIFEST_FIELDS)
    manifest.to_csv(out_dir / MANIFEST_NAME, sep='\t', index=False)

    logger.info(LogMessages.DATASET_WRITTEN.format(count=samples, path=out_dir))
    logger.debug(f"Dataset generation took {time.time() - start_time:.2f} seconds")
    return manifest


def read_manifest(data_dir: Union[str, Path]) -> pd.DataFrame:
    """
    Raises:
        FileNotFoundError: No manifest in data_dir
        CorruptFileError: Manifest lacks required columns
    """
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"No {MANIFEST_NAME} in {data_dir}")
    manifest = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False)
    missing = [column for column in config.MANIFEST_FIELDS if column not in manifest.columns]
    if missing:
        raise CorruptFileError(f"{path} lacks columns: {', '.join(missing)}")
    return manifest


def _row_to_sequence(data_dir: Path, row: pd.Series) -> FrameSequence:
    frames = [load_image(data_dir / rel) for rel in row['lr_frames'].split(',')]
    ground_truth = load_image(data_dir / row['hr_path']) if row['hr_path'] else None
    return FrameSequence(frames, ground_truth, row['sample_id'], row['identity'], row['track_id'])


def load_dataset(data_dir: Union[str, Path]) -> List[FrameSequence]:
    """Every sequence listed in the manifest, in manifest order"""
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    sequences = [_row_to_sequence(data_dir, row) for _, row in manifest.iterrows()]
    logger.info(f"Loaded {len(sequences)} sequences from {data_dir}")
    return sequences


def load_sample(data_dir: Union[str, Path], sample_id: str) -> FrameSequence:
    """
    Raises:
        KeyError: sample_id is not in the manifest
    """
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    rows = manifest[manifest['sample_id'] == sample_id]
    if rows.empty:
        raise KeyError(f"Sample '{sample_id}' not found in {data_dir / MANIFEST_NAME}")
    return _row_to_sequence(data_dir, rows.iloc[0])


def load_oracle_shifts(data_dir: Union[str, Path], sample_id: str) -> np.ndarray:
    """n×2C generating shifts written next to a sample"""
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    rows = manifest[manifest['sample_id'] == sample_id]
    if rows.empty:
        raise KeyError(f"Sample '{sample_id}' not found in {data_dir / MANIFEST_NAME}")
    sections, _ = read_container(data_dir / rows.iloc[0]['warp_path'])
    return sections['shifts']
