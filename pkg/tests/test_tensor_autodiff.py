import numpy as np
import pytest

from deform import identity_grid
from errors import MissingGradientError, NonFiniteError, ShapeError
from tensor_autodiff import (Adam, ParamGroup, Tensor, adam_step, backward, bicubic_resize_matrix,
                             bicubic_shrink_inverse, blur_downsample, conv2d,
                             cubic_interpolation_matrix, get_tape, grid_sample_bilinear, l1_loss,
                             no_grad, parameter, relu, resize_bicubic, tensor_sum, upsample)

F64 = np.float64


def p64(data):
    return parameter(data, dtype=F64)


def t64(data):
    return Tensor(data, dtype=F64)


# ==================== Gradients ====================

def test_elementwise_gradients(rng, gradcheck):
    for _ in range(5):
        a = p64(rng.normal(size=(2, 3)))
        b = p64(rng.normal(size=(2, 3)))
        assert gradcheck(lambda x, y: (x + y) * (x - y) * 3.0, a, b) < 1e-6


def test_conv2d_gradient(rng, gradcheck):
    for _ in range(20):
        x = p64(rng.normal(size=(1, 2, 5, 6)))
        w = p64(rng.normal(size=(3, 2, 3, 3)))
        b = p64(rng.normal(size=3))
        assert gradcheck(conv2d, x, w, b) < 1e-3


def test_conv2d_one_by_one_gradient(rng, gradcheck):
    x = p64(rng.normal(size=(1, 3, 4, 4)))
    w = p64(rng.normal(size=(2, 3, 1, 1)))
    b = p64(rng.normal(size=2))
    assert gradcheck(conv2d, x, w, b) < 1e-3


def test_conv2d_keeps_constant_images_constant(rng):
    x = Tensor(np.full((1, 2, 6, 7), 0.3))
    w = Tensor(rng.normal(size=(4, 2, 3, 3)))
    out = conv2d(x, w, Tensor(np.zeros(4)))
    assert np.allclose(out.data, out.data[:, :, :1, :1], atol=1e-6)


def test_conv2d_shape_errors():
    x = Tensor(np.zeros((1, 2, 5, 5)))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(2)))


def test_relu_gradient(rng, gradcheck):
    for _ in range(20):
        data = rng.normal(size=(1, 2, 4, 4))
        data[np.abs(data) < 0.05] = 0.5
        assert gradcheck(relu, p64(data)) < 1e-6


def test_grid_sample_gradient(rng, gradcheck):
    for _ in range(20):
        image = p64(rng.normal(size=(1, 2, 6, 7)))
        grid = p64(rng.uniform(-0.8, 0.8, size=(1, 2, 4, 5)))
        assert gradcheck(grid_sample_bilinear, image, grid) < 1e-3


def test_grid_sample_identity_is_exact(rng):
    image = Tensor(rng.uniform(size=(1, 3, 7, 9)))
    out = grid_sample_bilinear(image, identity_grid(7, 9))
    assert np.abs(out.data - image.data).max() < 1e-5


def test_grid_sample_clamped_positions_have_zero_grid_gradient(rng):
    image = Tensor(rng.uniform(size=(1, 1, 5, 5)))
    grid = parameter(np.full((1, 2, 2, 2), 1.5))
    backward(tensor_sum(grid_sample_bilinear(image, grid)))
    assert np.all(grid.grad == 0)


def test_grid_sample_rejects_bad_grid():
    with pytest.raises(ShapeError):
        grid_sample_bilinear(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 3, 4, 4))))


def test_resize_gradient(rng, gradcheck):
    for _ in range(20):
        x = p64(rng.normal(size=(1, 1, 6, 5)))
        out_h, out_w = rng.integers(2, 13, size=2)
        assert gradcheck(lambda t: resize_bicubic(t, int(out_h), int(out_w)), x) < 1e-3


def test_resize_same_size_is_identity(rng):
    x = Tensor(rng.uniform(size=(1, 2, 8, 5)))
    assert np.abs(resize_bicubic(x, 8, 5).data - x.data).max() < 1e-6


def test_upsample_preserves_constants():
    x = Tensor(np.full((1, 1, 4, 6), 0.7))
    assert np.allclose(upsample(x, 3).data, 0.7, atol=1e-6)
    assert upsample(x, 3).shape == (1, 1, 12, 18)


@pytest.mark.parametrize("in_size,out_size", [(7, 14), (14, 7), (10, 3), (5, 20), (9, 9)])
def test_resize_rows_sum_to_one(in_size, out_size):
    matrix = bicubic_resize_matrix(in_size, out_size)
    assert matrix.shape == (out_size, in_size)
    assert np.abs(matrix.sum(axis=1) - 1.0).max() < 1e-12


@pytest.mark.parametrize("hr_size,lr_size", [(12, 6), (21, 7), (64, 32)])
def test_shrink_inverse_is_a_right_inverse(hr_size, lr_size):
    inverse = bicubic_shrink_inverse(hr_size, lr_size)
    assert inverse.shape == (hr_size, lr_size)
    shrink = bicubic_resize_matrix(hr_size, lr_size)
    assert np.abs(shrink @ inverse - np.eye(lr_size)).max() < 1e-9


def test_cubic_interpolant_passes_through_its_samples():
    assert np.abs(cubic_interpolation_matrix(7, np.arange(7.0)) - np.eye(7)).max() < 1e-12


def test_upsample_twice_lands_on_the_interpolant(rng):
    samples = rng.uniform(size=9)
    x = t64(samples[None, None, None, :])
    up = upsample(x, 2).data[0, 0, 0]
    # HR pixel j sits at LR position (j + 0.5) / 2 - 0.5
    positions = (np.arange(18) + 0.5) / 2 - 0.5
    assert np.abs(up - cubic_interpolation_matrix(9, positions) @ samples).max() < 1e-5
    ramp = t64((0.1 * np.arange(9) + 0.2)[None, None, None, :])
    interior = slice(4, 14)
    assert np.allclose(upsample(ramp, 2).data[0, 0, 0, interior],
                       0.1 * positions[interior] + 0.2, atol=1e-5)


def test_blur_downsample_box_kernel_is_block_mean(rng):
    data = rng.uniform(size=(1, 1, 6, 8))
    out = blur_downsample(Tensor(data), np.full((2, 2), 0.25), 2)
    expected = data.reshape(1, 1, 3, 2, 4, 2).mean(axis=(3, 5))
    assert np.allclose(out.data, expected, atol=1e-6)


def test_blur_downsample_gradient(rng, gradcheck):
    kernel = rng.uniform(size=(3, 3))
    kernel /= kernel.sum()
    x = p64(rng.normal(size=(1, 2, 6, 6)))
    assert gradcheck(lambda t: blur_downsample(t, kernel, 2), x) < 1e-6


def test_l1_loss_value_and_gradient(rng, gradcheck):
    pred = t64([[1.0, 2.0], [3.0, 4.0]])
    target = t64([[0.0, 2.5], [3.0, 5.0]])
    assert l1_loss(pred, target).item() == pytest.approx((1.0 + 0.5 + 0.0 + 1.0) / 4)

    for _ in range(20):
        a = p64(rng.normal(size=(3, 4)))
        b = t64(a.data + rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4)))
        assert gradcheck(l1_loss, a, b) < 1e-6


def test_l1_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        l1_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


# ==================== Tape ====================

def test_no_grad_records_nothing():
    x = parameter(np.ones((1, 1, 3, 3)))
    with no_grad():
        relu(x)
    assert len(get_tape()) == 0
    relu(x)
    assert len(get_tape()) == 1


def test_backward_needs_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_gradients_accumulate_across_backward_calls():
    x = parameter(np.ones(2))
    backward(tensor_sum(x * 3.0))
    backward(tensor_sum(x * 3.0))
    assert np.allclose(x.grad, 6.0)


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        relu(Tensor(np.array([1.0, np.inf])))


def test_float64_is_preserved():
    x = p64(np.ones((1, 1, 4, 4)))
    assert resize_bicubic(x, 8, 8).dtype == np.float64
    assert Tensor(np.ones(2)).dtype == np.float32


# ==================== Optimizer ====================

def test_adam_requires_gradient():
    with pytest.raises(MissingGradientError):
        adam_step([parameter(np.ones(2))], lr=0.1)


def test_adam_first_step_moves_by_lr():
    p = parameter(np.zeros(3))
    p.grad = np.array([2.0, -0.5, 1e-3], dtype=np.float32)
    adam_step([p], lr=0.01)
    assert np.allclose(p.data, [-0.01, 0.01, -0.01], atol=1e-5)


def test_adam_constant_gradient_steps_approach_lr():
    p = p64(np.zeros(2))
    state = None
    for _ in range(200):
        previous = p.data.copy()
        p.grad = np.array([0.3, -4.0])
        state = adam_step([p], lr=0.002, state=state)
    assert np.allclose(previous - p.data, [0.002, -0.002], rtol=1e-6)
    assert np.allclose(p.data, [-0.4, 0.4], rtol=1e-6)


def test_adam_groups_scale_learning_rate():
    fast, slow = parameter(np.zeros(1)), parameter(np.zeros(1))
    groups = [ParamGroup("fast", [fast], 1.0), ParamGroup("slow", [slow], 0.5)]
    fast.grad = np.ones(1, dtype=np.float32)
    slow.grad = np.ones(1, dtype=np.float32)
    Adam().step(groups, lr=0.1)
    assert fast.data[0] == pytest.approx(-0.1, rel=1e-4)
    assert slow.data[0] == pytest.approx(-0.05, rel=1e-4)
    Adam.zero_grad(groups)
    assert fast.grad[0] == 0 and slow.grad[0] == 0
