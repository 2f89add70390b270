import numpy as np
import pytest

from tpmamba import tensor as T
from tpmamba.errors import ConfigError, ShapeError
from tpmamba.ops import (
    conv1d_depthwise,
    conv3d,
    grad_check,
    normalize,
    one_hot,
    same_padding,
    upsample_hw,
)
from tpmamba.tensor import Parameter, Tensor


# ---------------------------------------------------------------------------
# conv3d


def test_conv3d_identity_channel_map(rng):
    x = Tensor(rng.standard_normal((1, 3, 2, 4, 4)))
    w = np.zeros((3, 3, 1, 1, 1), dtype=np.float32)
    for c in range(3):
        w[c, c, 0, 0, 0] = 1.0
    out = conv3d(x, Tensor(w))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv3d_ones_depth_profile():
    x = Tensor(np.ones((1, 1, 5, 1, 1), dtype=np.float32))
    w = Tensor(np.ones((1, 1, 3, 1, 1), dtype=np.float32))
    out = conv3d(x, w, dilation=(1, 1, 1), padding=(1, 0, 0))
    np.testing.assert_array_equal(out.data[0, 0, :, 0, 0], [2, 3, 3, 3, 2])


def test_conv3d_dilated_receptive_field():
    # impulse response of a kd=3 dilation-8 kernel spans 1+(3-1)*8 = 17 slices
    D = 64
    x = np.zeros((1, 1, D, 1, 1), dtype=np.float32)
    x[0, 0, D // 2] = 1.0
    w = Tensor(np.ones((1, 1, 3, 1, 1), dtype=np.float32))
    out = conv3d(Tensor(x), w, dilation=(8, 1, 1), padding=(8, 0, 0))
    nz = np.nonzero(out.data[0, 0, :, 0, 0])[0]
    assert nz.max() - nz.min() + 1 == 17


def test_conv3d_same_padding_preserves_depth(rng):
    x = Tensor(rng.standard_normal((1, 2, 9, 3, 3)))
    for d in (1, 2, 4, 8):
        w = Tensor(rng.standard_normal((2, 2, 3, 1, 1)))
        out = conv3d(x, w, dilation=(d, 1, 1), padding=(same_padding(3, d), 0, 0))
        assert out.shape == x.shape


def test_conv3d_even_kernel_same_padding_rejected():
    with pytest.raises(ConfigError):
        same_padding(4, 1)


def test_conv3d_channel_mismatch():
    x = Tensor(np.zeros((1, 3, 2, 2, 2)))
    w = Tensor(np.zeros((4, 2, 1, 1, 1)))
    with pytest.raises(ShapeError):
        conv3d(x, w)


def test_conv3d_linearity(rng):
    x = rng.standard_normal((1, 2, 4, 3, 3))
    y = rng.standard_normal((1, 2, 4, 3, 3))
    w = Tensor(rng.standard_normal((3, 2, 3, 1, 1)), dtype=np.float64)

    def run(arr):
        return conv3d(Tensor(arr, dtype=np.float64), w, padding=(1, 0, 0)).data

    np.testing.assert_allclose(run(x + y), run(x) + run(y), rtol=1e-10)
    np.testing.assert_allclose(run(2.5 * x), 2.5 * run(x), rtol=1e-10)


def test_conv3d_grad(rng):
    x = Parameter("x", rng.standard_normal((1, 2, 3, 2, 2)), dtype=np.float64)
    w = Parameter("w", rng.standard_normal((3, 2, 3, 1, 1)) * 0.5, dtype=np.float64)
    b = Parameter("b", rng.standard_normal(3), dtype=np.float64)

    def f():
        out = conv3d(x.value, w.value, b.value, dilation=(2, 1, 1), padding=(2, 0, 0))
        return T.tsum(T.square(out))

    assert grad_check(f, [x, w, b], max_coords=12) < 1e-6


# ---------------------------------------------------------------------------
# conv1d_depthwise


def test_depthwise_k1_identity(rng):
    x = Tensor(rng.standard_normal((2, 3, 5)))
    w = Tensor(np.ones((3, 1), dtype=np.float32))
    out = conv1d_depthwise(x, w)
    np.testing.assert_array_equal(out.data, x.data)


def test_depthwise_hand_convolution():
    x = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
    w = Tensor(np.array([[1.0, 1.0]]))
    out = conv1d_depthwise(x, w)
    np.testing.assert_array_equal(out.data[0, 0], [1.0, 3.0, 5.0])


def test_depthwise_causality(rng):
    x = rng.standard_normal((1, 2, 8)).astype(np.float32)
    w = Tensor(rng.standard_normal((2, 4)).astype(np.float32))
    base = conv1d_depthwise(Tensor(x), w).data
    x2 = x.copy()
    x2[:, :, -1] += 5.0
    bumped = conv1d_depthwise(Tensor(x2), w).data
    assert np.array_equal(base[:, :, :-1], bumped[:, :, :-1])
    assert not np.array_equal(base[:, :, -1], bumped[:, :, -1])


def test_depthwise_channel_mismatch():
    with pytest.raises(ShapeError):
        conv1d_depthwise(Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((2, 2))))


def test_depthwise_grad(rng):
    x = Parameter("x", rng.standard_normal((2, 3, 6)), dtype=np.float64)
    w = Parameter("w", rng.standard_normal((3, 4)), dtype=np.float64)
    b = Parameter("b", rng.standard_normal(3), dtype=np.float64)

    def f():
        return T.tsum(T.square(conv1d_depthwise(x.value, w.value, b.value)))

    assert grad_check(f, [x, w, b], max_coords=12) < 1e-6


# ---------------------------------------------------------------------------
# normalize


def test_layer_norm_constant_input_is_zero():
    x = Tensor(np.full((2, 6), 3.5))
    g = Tensor(np.ones(6))
    b = Tensor(np.zeros(6))
    out = normalize(x, "layer_norm", g, b)
    assert np.abs(out.data).max() < 1e-2  # eps-dominated

def test_layer_norm_two_values():
    x = Tensor(np.array([[1.0, 3.0]]), dtype=np.float64)
    out = normalize(x, "layer_norm", Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)


def test_instance_norm_per_channel(rng):
    x = rng.standard_normal((1, 2, 3, 4, 5))
    out = normalize(
        Tensor(x, dtype=np.float64),
        "instance_norm",
        Tensor(np.ones(2)),
        Tensor(np.zeros(2)),
    ).data
    for c in range(2):
        ref = (x[0, c] - x[0, c].mean()) / np.sqrt(x[0, c].var() + 1e-5)
        np.testing.assert_allclose(out[0, c], ref, rtol=1e-6, atol=1e-8)


def test_normalize_rejects_bad_eps():
    x = Tensor(np.zeros((1, 4)))
    with pytest.raises(ConfigError):
        normalize(x, "layer_norm", Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=0.0)


def test_normalize_grads(rng):
    for kind, shape, c in (("layer_norm", (2, 5), 5), ("instance_norm", (1, 2, 3, 2, 2), 2)):
        x = Parameter("x", rng.standard_normal(shape), dtype=np.float64)
        g = Parameter("g", 1 + 0.1 * rng.standard_normal(c), dtype=np.float64)
        b = Parameter("b", rng.standard_normal(c), dtype=np.float64)
        wgt = Tensor(rng.standard_normal(shape), dtype=np.float64)

        def f():
            return T.tsum(T.mul(normalize(x.value, kind, g.value, b.value), wgt))

        assert grad_check(f, [x, g, b], max_coords=10) < 1e-6, kind


# ---------------------------------------------------------------------------
# upsample_hw


def test_upsample_constant_field():
    x = Tensor(np.full((1, 2, 3, 4, 4), 5.0))
    out = upsample_hw(x, 2)
    assert out.shape == (1, 2, 3, 8, 8)
    np.testing.assert_allclose(out.data, 5.0, rtol=1e-6)


def test_upsample_linear_values():
    x = Tensor(np.array([0.0, 2.0]).reshape(1, 1, 1, 2, 1), dtype=np.float64)
    out = upsample_hw(x, 2)
    np.testing.assert_allclose(out.data[0, 0, 0, :, 0], [0.25, 0.75, 1.25, 1.75], rtol=1e-12)


def test_upsample_shape_16x():
    x = Tensor(np.zeros((1, 3, 2, 6, 6), dtype=np.float32))
    out = x
    for _ in range(4):
        out = upsample_hw(out, 2)
    assert out.shape == (1, 3, 2, 96, 96)


def test_upsample_factor_zero_rejected():
    with pytest.raises(ConfigError):
        upsample_hw(Tensor(np.zeros((1, 1, 1, 2, 2))), 0)


def test_upsample_grad(rng):
    x = Parameter("x", rng.standard_normal((1, 2, 2, 3, 3)), dtype=np.float64)
    wgt = Tensor(rng.standard_normal((1, 2, 2, 6, 6)), dtype=np.float64)

    def f():
        return T.tsum(T.mul(upsample_hw(x.value, 2), wgt))

    assert grad_check(f, [x], max_coords=16) < 1e-7


# ---------------------------------------------------------------------------
# grad_check harness itself


def test_grad_check_nonfinite_names_parameter(rng):
    from tpmamba.errors import NumericError

    bad = Parameter("layer.bad", np.array([1.0, -1.0]), dtype=np.float64)

    def f():
        return T.tsum(T.log(bad.value))  # log(-1) -> nan

    with np.errstate(invalid="ignore"), pytest.raises(NumericError):
        grad_check(f, [bad])


def test_grad_check_excludes_frozen(rng):
    a = Parameter("a", rng.standard_normal((3, 3)), dtype=np.float64)
    frozen = Parameter("fz", rng.standard_normal((3, 3)), trainable=False, dtype=np.float64)

    def f():
        return T.tsum(T.matmul(frozen.value, a.value))

    assert grad_check(f, [a, frozen]) < 1e-7
    assert frozen.grad is None


def test_one_hot_layout():
    labels = np.array([[0, 2], [1, 1]])
    oh = one_hot(labels, 3, axis=1)
    assert oh.shape == (2, 3, 2)
    np.testing.assert_array_equal(oh.data[0, :, 1], [0, 0, 1])
