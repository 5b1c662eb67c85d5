import numpy as np
import pytest

from errors import ImageIOError, ShapeError
from sr_net import (FeatureExtractorConfig, NetworkWeights, cmsr_forward, fe2_residual,
                    feature_extractor_forward, init_weights, load_checkpoint,
                    save_checkpoint)
from tensor_autodiff import Tensor, no_grad, upsample


def small_weights(seed=0, width=8):
    return init_weights(FeatureExtractorConfig.fe1(width, 4), FeatureExtractorConfig.fe2(width, 4),
                        np.random.default_rng(seed))


def zero_out(weights: NetworkWeights) -> NetworkWeights:
    for p in weights.parameters():
        p.data[...] = 0
    return weights


# ==================== Configuration ====================

def test_default_layer_layout():
    fe1 = FeatureExtractorConfig.fe1()
    fe2 = FeatureExtractorConfig.fe2()
    assert fe1.n_layers == 8 and fe2.n_layers == 6
    assert fe1.layer_shapes()[0] == (64, 1, 3, 3)
    assert fe1.layer_shapes()[-1] == (1, 64, 3, 3)
    assert fe2.layer_shapes()[0] == (64, 3, 3, 3)
    assert fe2.layer_shapes()[-1] == (1, 64, 1, 1)
    assert fe2.activations == [True] * 5 + [False]


def test_fe2_ranges_enforced():
    with pytest.raises(ShapeError):
        FeatureExtractorConfig.fe2(64, 3)
    with pytest.raises(ShapeError):
        FeatureExtractorConfig.fe2(64, 9)
    with pytest.raises(ShapeError):
        FeatureExtractorConfig.fe2(200, 6)


def test_extractor_must_end_in_one_channel():
    with pytest.raises(ShapeError):
        FeatureExtractorConfig(1, [8, 2], [3, 3], [True, False])


# ==================== Forward ====================

def test_output_shape():
    w = small_weights()
    with no_grad():
        out = cmsr_forward(w, Tensor(np.zeros((1, 1, 60, 80))), Tensor(np.zeros((1, 3, 240, 320))), 4)
    assert out.shape == (1, 1, 240, 320)


def test_ratio_mismatch_rejected():
    w = small_weights()
    with pytest.raises(ShapeError):
        cmsr_forward(w, Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 3, 16, 18))), 2)


def test_wrong_channel_count_rejected():
    w = small_weights()
    with pytest.raises(ShapeError):
        feature_extractor_forward(w.fe2, Tensor(np.zeros((1, 1, 8, 8))))


def test_zero_weights_give_bicubic(rng):
    w = zero_out(small_weights())
    modality = Tensor(rng.uniform(size=(1, 1, 8, 10)))
    guide = Tensor(rng.uniform(size=(1, 3, 24, 30)))
    with no_grad():
        out = cmsr_forward(w, modality, guide, 3)
        expected = upsample(modality, 3)
    assert np.abs(out.data - expected.data).max() < 1e-6


def test_output_is_sum_of_three_parts(rng):
    w = small_weights()
    modality = Tensor(rng.uniform(size=(1, 1, 6, 6)))
    guide = Tensor(rng.uniform(size=(1, 3, 12, 12)))
    with no_grad():
        up = upsample(modality, 2)
        parts = up.data + feature_extractor_forward(w.fe1, up).data + fe2_residual(w, guide).data
        out = cmsr_forward(w, modality, guide, 2)
    assert np.allclose(out.data, parts, atol=1e-6)


def test_zero_input_gives_zero_output():
    w = small_weights()
    with no_grad():
        out = cmsr_forward(w, Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 3, 10, 10))), 2)
    assert np.abs(out.data).max() < 1e-7


def test_guide_changes_the_output(rng):
    w = small_weights()
    modality = Tensor(rng.uniform(size=(1, 1, 6, 6)))
    with no_grad():
        a = cmsr_forward(w, modality, Tensor(np.zeros((1, 3, 12, 12))), 2)
        b = cmsr_forward(w, modality, Tensor(rng.uniform(size=(1, 3, 12, 12))), 2)
    assert np.abs(a.data - b.data).max() > 0


# ==================== Initialization ====================

def test_he_initialization_statistics():
    w = init_weights(FeatureExtractorConfig.fe1(), FeatureExtractorConfig.fe2(),
                     np.random.default_rng(3))
    hidden = w.fe1[1].weight.data
    assert hidden.std() == pytest.approx(np.sqrt(2.0 / (64 * 9)), rel=0.05)
    assert np.all(w.fe1[1].bias.data == 0)
    head = w.fe2[-1].weight.data
    assert head.std() == pytest.approx(0.1 * np.sqrt(2.0 / 64), rel=0.35)


def test_initialization_is_seeded():
    a, b, c = small_weights(5), small_weights(5), small_weights(6)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.fe1[0].weight.data, c.fe1[0].weight.data)


# ==================== Checkpoints ====================

def test_checkpoint_round_trip(tmp_path):
    w = small_weights(9)
    save_checkpoint(w, tmp_path / "weights.npz")
    restored = load_checkpoint(tmp_path / "weights.npz")
    assert restored.fe2_config == w.fe2_config
    assert [l.activation for l in restored.fe1] == [l.activation for l in w.fe1]
    assert all(np.array_equal(x.data, y.data)
               for x, y in zip(w.parameters(), restored.parameters()))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ImageIOError):
        load_checkpoint(tmp_path / "absent.npz")
    bogus = tmp_path / "bogus.npz"
    np.savez(bogus, header=np.array('{"format": "cmsr-weights", "version": 99}'))
    with pytest.raises(ImageIOError, match="version"):
        load_checkpoint(bogus)
