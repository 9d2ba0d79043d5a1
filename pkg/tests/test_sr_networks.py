"""
Tests for the feature extractor, warp predictor, reconstruction and forward pass
"""

import numpy as np
import pytest

from constants import SectionNames
from exceptions import ConfigError, ShapeError
from models import FrameSequence, ModelVariant
from sr_networks import (
    ModelConfig,
    create_profile,
    extract_features,
    forward,
    get_tps_system,
    init_model,
    predict_warp,
    predict_warps,
    reconstruct,
)
from tensor_autodiff import Tape, Tensor, gradients, mse
from tps_warp import TpsParams, grid_sample, tps_grid


def random_sequence(rng, frames: int, size: int) -> FrameSequence:
    return FrameSequence([rng.uniform(size=(3, size, size)) for _ in range(frames)], sample_id='seq')


@pytest.fixture(scope='module')
def full_params():
    return init_model(create_profile('full'), ModelVariant.parse('f5warp'), seed=0)


# =============================================================================
# Full-size shapes
# =============================================================================

class TestFullShapes:
    """16×16 -> 128×128 with D = 16 and an 8×8 control grid"""

    def test_features(self, full_params, rng):
        frame = Tensor(rng.uniform(size=(3, 16, 16)))
        assert extract_features(frame, 'central', full_params).shape == (16, 128, 128)

    def test_warp_length(self, full_params, rng):
        a, b = (Tensor(rng.uniform(size=(3, 16, 16))) for _ in range(2))
        assert predict_warp(a, b, full_params).shape == (128,)

    def test_reconstruction_channel_trace(self, full_params):
        trace = [(c.in_channels, c.out_channels, c.weight.shape[-1]) for c in full_params.reconstruction.convs]
        assert trace == [(80, 16, 5), (16, 32, 7), (32, 64, 7), (64, 64, 7),
                         (64, 64, 7), (64, 32, 7), (32, 16, 5), (16, 3, 5)]

    def test_f1_reconstruction_input(self):
        params = init_model(create_profile('full'), ModelVariant.parse('f1'), seed=0)
        assert params.reconstruction.in_channels == 16


# =============================================================================
# Sub-networks
# =============================================================================

class TestExtractFeatures:
    """Deconvolution stream plus FC stream"""

    def test_zero_frame_gives_zero_features(self, tiny_config):
        params = init_model(tiny_config, ModelVariant.parse('f5'), seed=1)
        out = extract_features(Tensor(np.zeros((3, 8, 8))), 'central', params)
        assert out.shape == (8, 32, 32)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_central_and_adjacent_weights_differ(self, tiny_config, rng):
        params = init_model(tiny_config, ModelVariant.parse('f5'), seed=1)
        frame = Tensor(rng.uniform(size=(3, 8, 8)))
        central = extract_features(frame, 'central', params).data
        adjacent = extract_features(frame, 'adjacent', params).data
        assert not np.array_equal(central, adjacent)

    def test_adjacent_weights_are_shared(self, tiny_config, rng):
        params = init_model(tiny_config, ModelVariant.parse('f5'), seed=1)
        frames = [Tensor(rng.uniform(size=(3, 8, 8))) for _ in range(3)]
        central = extract_features(frames[0], 'central', params).data.copy()
        before = [extract_features(frame, 'adjacent', params).data.copy() for frame in frames[1:]]

        params.adjacent.upsample.weight.data[...] += 0.1
        assert extract_features(frames[0], 'central', params).data.tobytes() == central.tobytes()
        for frame, old in zip(frames[1:], before):
            assert not np.allclose(extract_features(frame, 'adjacent', params).data, old)

    def test_wrong_frame_shape(self, tiny_config, rng):
        params = init_model(tiny_config, ModelVariant.parse('f1'), seed=1)
        with pytest.raises(ShapeError):
            extract_features(Tensor(rng.uniform(size=(3, 16, 16))), 'central', params)

    def test_unknown_extractor(self, tiny_config, rng):
        params = init_model(tiny_config, ModelVariant.parse('f1'), seed=1)
        with pytest.raises(ValueError):
            extract_features(Tensor(rng.uniform(size=(3, 8, 8))), 'other', params)


class TestPredictWarp:
    """Two-stream convolutional regressor"""

    def test_zero_head_predicts_identity(self, tiny_config, rng):
        params = init_model(tiny_config, ModelVariant.parse('f3warp'), seed=2)
        a, b = (Tensor(rng.uniform(size=(3, 8, 8))) for _ in range(2))
        np.testing.assert_array_equal(predict_warp(a, b, params).data, 0.0)

    def test_predict_warps_keyed_by_offset(self, tiny_config, rng):
        params = init_model(tiny_config, ModelVariant.parse('f5warp'), seed=2)
        warps = predict_warps(random_sequence(rng, 5, 8), params)
        assert sorted(warps) == [-2, -1, 1, 2]
        assert all(w.shape == (128,) for w in warps.values())


class TestReconstruct:
    """Same-padded conv stack ending in a sigmoid"""

    def test_zero_weights_give_half_gray(self, micro_config, rng):
        params = init_model(micro_config, ModelVariant.parse('f1'), seed=0)
        for layer in params.reconstruction.convs:
            layer.weight.data[...] = 0.0
        out = reconstruct(Tensor(rng.normal(size=(3, 8, 8))), params)
        np.testing.assert_allclose(out.data, 0.5)

    def test_wrong_stack_width(self, micro_config, rng):
        params = init_model(micro_config, ModelVariant.parse('f3'), seed=0)
        with pytest.raises(ShapeError):
            reconstruct(Tensor(rng.normal(size=(3, 8, 8))), params)


# =============================================================================
# Forward pass
# =============================================================================

class TestForward:
    """End-to-end reconstruction of the central frame"""

    def test_single_frame_output(self, tiny_config, rng):
        params = init_model(tiny_config, ModelVariant.parse('f1'), seed=4)
        out = forward(random_sequence(rng, 1, 8), params)
        assert out.shape == (3, 32, 32)
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_warp_variant_matches_stacked_at_init(self, tiny_config, rng):
        seq = random_sequence(rng, 5, 8)
        stacked = init_model(tiny_config, ModelVariant.parse('f5'), seed=9)
        warped = init_model(tiny_config, ModelVariant.parse('f5warp'), seed=9)
        a = forward(seq, stacked).data
        b = forward(seq, warped).data
        assert a.tobytes() == b.tobytes()

    def test_oracle_warp_aligns_translated_features(self, float64, tiny_config, rng):
        params = init_model(tiny_config, ModelVariant.parse('f3warp'), seed=6)
        params.adjacent = params.central
        central = rng.uniform(size=(3, 8, 8))
        # One low-resolution pixel right and one up: 4 high-resolution pixels each
        moving = np.roll(central, shift=(-1, 1), axis=(1, 2))
        system = get_tps_system(tiny_config.control_points_per_side)
        oracle = TpsParams.uniform(2.0 * 4 / 32, -2.0 * 4 / 32, system.count)

        aligned = grid_sample(extract_features(Tensor(moving), 'adjacent', params),
                              tps_grid(oracle, system, (32, 32))).data
        reference = extract_features(Tensor(central), 'central', params).data
        # The FC map is not translation-equivariant; the deconvolution maps are
        deconv = slice(0, tiny_config.feature_channels - 1)
        interior = (deconv, slice(12, 21), slice(12, 21))
        np.testing.assert_allclose(aligned[interior], reference[interior], atol=1e-5)

    def test_warp_override_replaces_prediction(self, tiny_config, rng):
        seq = random_sequence(rng, 3, 8)
        params = init_model(tiny_config, ModelVariant.parse('f3warp'), seed=6)
        identity = forward(seq, params).data
        shifted = forward(seq, params, warp_override={-1: TpsParams.uniform(0.25, 0.0), 1: np.zeros(128)}).data
        assert not np.allclose(identity, shifted)
        zero = forward(seq, params, warp_override={-1: np.zeros(128), 1: np.zeros(128)}).data
        np.testing.assert_allclose(zero, identity, atol=1e-6)

    @pytest.mark.parametrize('name', ['f3', 'f5'])
    def test_stacking_is_order_sensitive(self, tiny_config, rng, name):
        params = init_model(tiny_config, ModelVariant.parse(name), seed=7)
        seq = random_sequence(rng, params.variant.frames, 8)
        swapped = FrameSequence([seq.frames[-1]] + seq.frames[1:-1] + [seq.frames[0]], sample_id='swapped')
        assert np.max(np.abs(forward(seq, params).data - forward(swapped, params).data)) > 1e-6

    @pytest.mark.parametrize('name', ['f1', 'f3', 'f3warp'])
    def test_every_group_gets_gradient(self, micro_config, rng, name):
        params = init_model(micro_config, ModelVariant.parse(name), seed=8)
        seq = random_sequence(rng, params.variant.frames, 4)
        target = Tensor(rng.uniform(size=(3, 8, 8)))
        trainable = params.trainable()
        with Tape():
            loss = mse(forward(seq, params), target)
            grads = dict(zip(trainable, gradients(loss, list(trainable.values()))))

        for group in {key.split('/')[0] for key in trainable}:
            total = sum(np.abs(g).sum() for key, g in grads.items() if key.startswith(group + '/'))
            assert total > 0.0, group

    def test_warp_gradient_reaches_whole_predictor(self, rng):
        model_config = create_profile('tiny', warp_head_gain=0.01)
        params = init_model(model_config, ModelVariant.parse('f3warp'), seed=8)
        seq = random_sequence(rng, 3, 8)
        target = Tensor(rng.uniform(size=(3, 32, 32)))
        warp = params.groups()[SectionNames.WARP]
        with Tape():
            loss = mse(forward(seq, params), target)
            grads = dict(zip(warp, gradients(loss, list(warp.values()))))
        for name in ('ref0.weight', 'mov0.weight', 'trunk0.weight', 'fc0.weight', 'fc3.weight'):
            assert np.abs(grads[name]).sum() > 0.0, name

    def test_frame_count_must_match_variant(self, tiny_config, rng):
        params = init_model(tiny_config, ModelVariant.parse('f5'), seed=4)
        with pytest.raises(ShapeError):
            forward(random_sequence(rng, 3, 8), params)

    def test_deterministic_init(self, tiny_config, rng):
        seq = random_sequence(rng, 3, 8)
        a = forward(seq, init_model(tiny_config, ModelVariant.parse('f3'), seed=5)).data
        b = forward(seq, init_model(tiny_config, ModelVariant.parse('f3'), seed=5)).data
        np.testing.assert_array_equal(a, b)


class TestTrainable:
    """Which parameter groups each variant trains"""

    @pytest.mark.parametrize('name, groups', [
        ('f1', {SectionNames.CENTRAL, SectionNames.RECONSTRUCTION}),
        ('f3', {SectionNames.CENTRAL, SectionNames.ADJACENT, SectionNames.RECONSTRUCTION}),
        ('f3warp', {SectionNames.CENTRAL, SectionNames.ADJACENT, SectionNames.WARP, SectionNames.RECONSTRUCTION}),
    ])
    def test_groups(self, micro_config, name, groups):
        params = init_model(micro_config, ModelVariant.parse(name), seed=0)
        assert {key.split('/')[0] for key in params.trainable()} == groups

    def test_freeze_warp(self, micro_config):
        params = init_model(micro_config, ModelVariant.parse('f3warp'), seed=0)
        assert not any(key.startswith(SectionNames.WARP + '/') for key in params.trainable(freeze_warp=True))

    def test_load_arrays_round_trip(self, micro_config):
        source = init_model(micro_config, ModelVariant.parse('f3warp'), seed=1)
        target = init_model(micro_config, ModelVariant.parse('f3warp'), seed=2)
        target.load_arrays({name: t.data for name, t in source.named_tensors().items()})
        for name, tensor in target.named_tensors().items():
            np.testing.assert_array_equal(tensor.data, source.named_tensors()[name].data)

    def test_load_arrays_rejects_wrong_shape(self, micro_config):
        params = init_model(micro_config, ModelVariant.parse('f1'), seed=1)
        name = next(iter(params.named_tensors()))
        with pytest.raises(ShapeError):
            params.load_arrays({name: np.zeros((1, 1))}, strict=False)


class TestProfiles:
    """Profile registry and model config validation"""

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            create_profile('huge')

    def test_overrides(self):
        assert create_profile('tiny', feature_channels=4).feature_channels == 4

    def test_sizes_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(lr_size=8, hr_size=30)

    def test_to_dict_round_trip(self, tiny_config):
        assert ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config
