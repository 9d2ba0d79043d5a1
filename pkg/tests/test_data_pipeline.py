"""
Tests for the degradation protocol, synthetic sequences, image I/O and dataset files
"""

import numpy as np
import pytest
from PIL import Image

from data_pipeline import (
    MANIFEST_NAME,
    DatasetLayout,
    area_downsample,
    degrade,
    gaussian_blur,
    gaussian_kernel,
    generate_dataset,
    load_dataset,
    load_image,
    load_oracle_shifts,
    load_sample,
    read_manifest,
    save_image,
    synth_face,
    synth_sequence,
    translation_pairs,
)
from exceptions import ImageFormatError, MotionBoundsError, ShapeError
from models import DegradationSpec, MotionSpec
from tensor_autodiff import Tensor, float64_mode
from tps_warp import TpsSystem, warp


@pytest.fixture(scope='module')
def system():
    return TpsSystem()


def checkerboard(size: int, square: int) -> np.ndarray:
    cells = (np.arange(size) // square)
    board = ((cells[:, None] + cells[None, :]) % 2).astype(np.float64)
    return np.stack([board] * 3)


# =============================================================================
# Degradation
# =============================================================================

class TestBlur:
    """Separable Gaussian blur"""

    @pytest.mark.parametrize('sigma', [0.6, 1.2, 2.4])
    def test_kernel(self, sigma):
        kernel = gaussian_kernel(sigma)
        assert kernel.sum() == pytest.approx(1.0)
        assert len(kernel) == 2 * int(np.ceil(3 * sigma)) + 1
        np.testing.assert_allclose(kernel, kernel[::-1])

    def test_non_positive_sigma(self):
        with pytest.raises(ValueError):
            gaussian_kernel(0.0)

    def test_constant_image_unchanged(self):
        img = np.full((3, 16, 16), 0.37)
        np.testing.assert_allclose(gaussian_blur(img, 2.4), img, atol=1e-12)

    def test_impulse_response(self):
        img = np.zeros((1, 21, 21))
        img[0, 10, 10] = 1.0
        kernel = gaussian_kernel(1.2)
        radius = len(kernel) // 2
        out = gaussian_blur(img, 1.2)
        window = out[0, 10 - radius:10 + radius + 1, 10 - radius:10 + radius + 1]
        np.testing.assert_allclose(window, np.outer(kernel, kernel), atol=1e-12)
        assert out.sum() == pytest.approx(1.0)


class TestDegrade:
    """Blur then area downsampling"""

    def test_shape(self, small_spec, rng):
        assert degrade(rng.uniform(size=(3, 32, 32)), small_spec).shape == (3, 8, 8)

    def test_constant_image(self, small_spec):
        np.testing.assert_allclose(degrade(np.full((3, 32, 32), 0.6), small_spec), 0.6, atol=1e-12)

    def test_wrong_size(self, small_spec, rng):
        with pytest.raises(ShapeError):
            degrade(rng.uniform(size=(3, 30, 30)), small_spec)

    def test_aligned_checkerboard_keeps_blocks(self):
        spec = DegradationSpec(128, 16, apply_blur=False)
        lr = degrade(checkerboard(128, 8), spec)
        np.testing.assert_array_equal(lr, checkerboard(16, 1))

    def test_fine_checkerboard_averages_to_half(self):
        spec = DegradationSpec(128, 16, apply_blur=False)
        np.testing.assert_array_equal(degrade(checkerboard(128, 4), spec), 0.5)

    def test_area_downsample_size_check(self):
        with pytest.raises(ShapeError):
            area_downsample(np.zeros((3, 10, 10)), 4)


# =============================================================================
# Synthetic sequences
# =============================================================================

class TestSynthSequence:
    """Moving face sequences with known generating warps"""

    def test_face_range(self, rng):
        face = synth_face(32, rng)
        assert face.shape == (3, 32, 32)
        assert face.min() >= 0.0 and face.max() <= 1.0

    def test_zero_motion_repeats_base(self, small_spec, system, rng):
        base = synth_face(32, rng)
        sample = synth_sequence(base, MotionSpec(0.0, 0.0), 3, small_spec, seed=1, system=system)
        for frame in sample.sequence.frames:
            np.testing.assert_allclose(frame, sample.sequence.central, atol=1e-12)
        np.testing.assert_array_equal(sample.oracle_shifts, 0.0)

    def test_central_frame_is_base(self, small_spec, system, rng):
        base = synth_face(32, rng)
        sample = synth_sequence(base, MotionSpec(), 5, small_spec, seed=2, system=system)
        assert sample.oracle_shifts.shape == (5, 2 * system.count)
        np.testing.assert_array_equal(sample.oracle_shifts[2], 0.0)
        np.testing.assert_array_equal(sample.sequence.ground_truth, base)
        assert np.any(sample.oracle_shifts[0] != 0.0)

    def test_frames_match_their_oracle_warps(self, small_spec, system, rng):
        base = synth_face(32, rng)
        sample = synth_sequence(base, MotionSpec(), 3, small_spec, seed=3, system=system)
        with float64_mode():
            for i, hr in enumerate(sample.hr_frames):
                expected = warp(Tensor(base), Tensor(sample.oracle_shifts[i]), system).data
                np.testing.assert_allclose(hr, np.clip(expected, 0.0, 1.0), atol=1e-5)
                np.testing.assert_allclose(sample.sequence.frames[i], degrade(hr, small_spec), atol=1e-12)

    def test_same_seed_same_sequence(self, small_spec, system, rng):
        base = synth_face(32, rng)
        a = synth_sequence(base, MotionSpec(), 3, small_spec, seed=8, system=system)
        b = synth_sequence(base, MotionSpec(), 3, small_spec, seed=8, system=system)
        np.testing.assert_array_equal(a.oracle_shifts, b.oracle_shifts)

    def test_even_length(self, small_spec, rng):
        with pytest.raises(ShapeError):
            synth_sequence(synth_face(32, rng), MotionSpec(), 4, small_spec)

    def test_motion_bound(self, small_spec, rng):
        with pytest.raises(MotionBoundsError):
            synth_sequence(synth_face(32, rng), MotionSpec(0.2, 0.2), 3, small_spec)

    def test_translation_pairs(self, small_spec, system):
        pairs = translation_pairs(3, 0.1, small_spec, seed=0, system=system)
        assert len(pairs) == 3
        for pair in pairs:
            assert pair.reference.shape == pair.moving.shape == (3, 8, 8)
            np.testing.assert_allclose(np.abs(pair.alignment), 0.1)

    def test_translation_bound(self, small_spec):
        with pytest.raises(MotionBoundsError):
            translation_pairs(1, 0.5, small_spec)


# =============================================================================
# Image files
# =============================================================================

class TestImages:
    """8-bit RGB PNG I/O"""

    def test_round_trip_within_half_step(self, tmp_path, rng):
        img = rng.uniform(size=(3, 9, 7))
        save_image(img, tmp_path / 'x.png')
        loaded = load_image(tmp_path / 'x.png')
        assert loaded.shape == (3, 9, 7)
        assert np.max(np.abs(loaded - img)) <= 1.0 / 510 + 1e-12

    def test_grayscale_rejected(self, tmp_path):
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(tmp_path / 'g.png')
        with pytest.raises(ImageFormatError):
            load_image(tmp_path / 'g.png')

    def test_not_an_image(self, tmp_path):
        (tmp_path / 'n.png').write_bytes(b'not a png')
        with pytest.raises(ImageFormatError):
            load_image(tmp_path / 'n.png')

    def test_save_shape_checked(self, tmp_path):
        with pytest.raises(ShapeError):
            save_image(np.zeros((4, 4)), tmp_path / 'bad.png')


# =============================================================================
# Dataset files
# =============================================================================

class TestDataset:
    """lr/ hr/ warps/ plus manifest.tsv"""

    def test_layout(self):
        layout = DatasetLayout(8)
        assert layout.identities == 2
        assert [layout.track_id(i) for i in range(4)] == ['id000-0', 'id001-0', 'id000-1', 'id001-1']

    def test_files_and_manifest(self, tmp_path, small_spec):
        manifest = generate_dataset(tmp_path, samples=4, frames=3, seed=0, spec=small_spec)
        assert len(manifest) == 4
        assert (tmp_path / MANIFEST_NAME).exists()
        assert len(list((tmp_path / 'lr').glob('*.png'))) == 12
        assert len(list((tmp_path / 'hr').glob('*.png'))) == 4
        assert len(list((tmp_path / 'warps').glob('*.wsr'))) == 4

        dataset = load_dataset(tmp_path)
        assert [seq.sample_id for seq in dataset] == list(manifest['sample_id'])
        assert all(len(seq) == 3 and seq.ground_truth.shape == (3, 32, 32) for seq in dataset)

    def test_threads_do_not_change_output(self, tmp_path, small_spec):
        generate_dataset(tmp_path / 'one', samples=3, frames=3, seed=5, spec=small_spec, threads=1)
        generate_dataset(tmp_path / 'two', samples=3, frames=3, seed=5, spec=small_spec, threads=2)
        assert (tmp_path / 'one' / MANIFEST_NAME).read_bytes() == (tmp_path / 'two' / MANIFEST_NAME).read_bytes()
        for png in sorted((tmp_path / 'one' / 'lr').glob('*.png')):
            assert png.read_bytes() == (tmp_path / 'two' / 'lr' / png.name).read_bytes()

    def test_oracle_shifts(self, tmp_path, small_spec):
        generate_dataset(tmp_path, samples=2, frames=5, seed=1, spec=small_spec)
        shifts = load_oracle_shifts(tmp_path, 's00001')
        assert shifts.shape == (5, 128)
        np.testing.assert_array_equal(shifts[2], 0.0)

    def test_load_sample(self, tmp_path, small_spec):
        generate_dataset(tmp_path, samples=2, frames=3, seed=1, spec=small_spec)
        assert load_sample(tmp_path, 's00000').sample_id == 's00000'
        with pytest.raises(KeyError):
            load_sample(tmp_path, 's99999')

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path)

    def test_even_frames(self, tmp_path, small_spec):
        with pytest.raises(ShapeError):
            generate_dataset(tmp_path, samples=1, frames=2, spec=small_spec)
