# tests/test_nn_layers.py

import numpy as np
import pytest
from pydantic import ValidationError

from src.core.errors import ConfigError, DomainError, ShapeError
from src.modules.nn_layers.schemas import ActivationKind, ConvParams, DenseParams, Mode, Padding, PoolMode
from src.modules.nn_layers.service import (
    SIGMOID_CLIP,
    activation,
    batch_norm,
    clamp_diagnostics,
    conv2d,
    dense,
    dropout,
    global_pool,
    init_conv,
    init_dense,
    init_norm,
    layer_norm,
    pool2d,
    transposed_conv2d,
)
from src.modules.tensor_core.tensor import Tensor


# --- 朴素参考实现 ---

def naive_conv2d(x, kernel, bias, stride=1, dilation=1, groups=1, same=True):
    n, c_in, h, w = x.shape
    c_out, cg, kh, kw = kernel.shape
    span_h, span_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    if same:
        oh, ow = -(-h // stride), -(-w // stride)
        ph = max((oh - 1) * stride + span_h - h, 0)
        pw = max((ow - 1) * stride + span_w - w, 0)
        x = np.pad(x, ((0, 0), (0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)))
    else:
        oh, ow = (h - span_h) // stride + 1, (w - span_w) // stride + 1
    og = c_out // groups
    out = np.zeros((n, c_out, oh, ow))
    for b in range(n):
        for o in range(c_out):
            g = o // og
            for i in range(oh):
                for j in range(ow):
                    acc = bias[0, o, 0, 0]
                    for c in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += kernel[o, c, u, v] * x[b, g * cg + c, i * stride + u * dilation, j * stride + v * dilation]
                    out[b, o, i, j] = acc
    return out


def naive_transposed(x, kernel, bias, stride):
    n, c_in, h, w = x.shape
    _, c_out, kh, kw = kernel.shape
    out = np.zeros((n, c_out, (h - 1) * stride + kh, (w - 1) * stride + kw))
    for b in range(n):
        for c in range(c_in):
            for i in range(h):
                for j in range(w):
                    out[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += x[b, c, i, j] * kernel[c]
    return out + bias


def conv_params(rng, c_in, c_out, k, **kwargs) -> ConvParams:
    groups = kwargs.get("groups", 1)
    transposed = kwargs.get("transposed", False)
    shape = (c_in, c_out, k, k) if transposed else (c_out, c_in // groups, k, k)
    return ConvParams(
        kernel=Tensor(rng.standard_normal(shape)),
        bias=Tensor(rng.standard_normal((1, c_out, 1, 1))),
        **kwargs,
    )


class TestConv2d:
    @pytest.mark.parametrize("trial", range(20))
    def test_matches_naive_oracle(self, trial):
        rng = np.random.default_rng(trial)
        variant = trial % 4
        kwargs = [
            dict(),
            dict(dilation=2),
            dict(stride=2),
            dict(padding=Padding.valid),
        ][variant]
        k = [1, 3, 3, 3][variant] if trial % 5 else 1
        c_in, c_out = 2 + trial % 3, 1 + trial % 4
        x = rng.standard_normal((2, c_in, 8, 7))
        p = conv_params(rng, c_in, c_out, k, **kwargs)
        out = conv2d(Tensor(x), p)
        expected = naive_conv2d(
            x, p.kernel.data, p.bias.data,
            stride=p.stride, dilation=p.dilation, same=p.padding == Padding.same,
        )
        np.testing.assert_allclose(out.data, expected, rtol=1e-10, atol=1e-10)

    def test_grouped_matches_oracle(self, rng):
        x = rng.standard_normal((1, 4, 6, 6))
        p = conv_params(rng, 4, 4, 3, groups=4)
        expected = naive_conv2d(x, p.kernel.data, p.bias.data, groups=4)
        np.testing.assert_allclose(conv2d(Tensor(x), p).data, expected, rtol=1e-10, atol=1e-10)

    def test_same_padding_keeps_extent(self, rng):
        p = conv_params(rng, 3, 5, 3, dilation=2)
        assert conv2d(Tensor(rng.standard_normal((1, 3, 9, 9))), p).shape == (1, 5, 9, 9)

    def test_even_kernel_same_padding_rejected(self, rng):
        p = conv_params(rng, 2, 2, 2)
        with pytest.raises(ConfigError):
            conv2d(Tensor(rng.standard_normal((1, 2, 4, 4))), p)

    def test_channel_mismatch(self, rng):
        p = conv_params(rng, 3, 2, 3)
        with pytest.raises(ShapeError):
            conv2d(Tensor(rng.standard_normal((1, 4, 4, 4))), p)

    def test_transposed_params_rejected(self, rng):
        p = conv_params(rng, 2, 2, 2, stride=2, transposed=True, padding=Padding.valid)
        with pytest.raises(ConfigError):
            conv2d(Tensor(rng.standard_normal((1, 2, 4, 4))), p)

    def test_bias_shape_validated(self, rng):
        with pytest.raises(ValidationError):
            ConvParams(kernel=Tensor(rng.standard_normal((2, 2, 3, 3))), bias=Tensor(np.zeros((1, 3, 1, 1))))

    def test_he_init_statistics(self):
        p = init_conv(np.random.default_rng(0), 64, 64, 3)
        assert p.kernel.dtype == np.float32
        assert np.all(p.bias.data == 0)
        assert abs(p.kernel.data.std() - np.sqrt(2 / (64 * 9))) < 0.005


class TestTransposedConv:
    @pytest.mark.parametrize("trial", range(20))
    def test_matches_naive_oracle(self, trial):
        rng = np.random.default_rng(100 + trial)
        c_in, c_out = 1 + trial % 4, 1 + trial % 3
        x = rng.standard_normal((2, c_in, 4, 3))
        p = conv_params(rng, c_in, c_out, 2, stride=2, transposed=True, padding=Padding.valid)
        out = transposed_conv2d(Tensor(x), p)
        assert out.shape == (2, c_out, 8, 6)
        np.testing.assert_allclose(out.data, naive_transposed(x, p.kernel.data, p.bias.data, 2), rtol=1e-10, atol=1e-10)

    @pytest.mark.parametrize("trial", range(5))
    def test_adjoint_identity(self, trial):
        """<conv(x), y> == <x, convT(y)>，两者共用同一份卷积核数组"""
        rng = np.random.default_rng(200 + trial)
        # 普通卷积 2 -> 3 通道 (C_out=3, C_in=2)；同一数组作为转置卷积即 3 -> 2 通道
        kernel = rng.standard_normal((3, 2, 2, 2))
        conv_p = ConvParams(
            kernel=Tensor(kernel), bias=Tensor(np.zeros((1, 3, 1, 1))), stride=2, padding=Padding.valid,
        )
        tconv_p = ConvParams(
            kernel=Tensor(kernel), bias=Tensor(np.zeros((1, 2, 1, 1))), stride=2, padding=Padding.valid, transposed=True,
        )
        x = rng.standard_normal((1, 2, 8, 8))
        y = rng.standard_normal((1, 3, 4, 4))
        lhs = np.sum(conv2d(Tensor(x), conv_p).data * y)
        rhs = np.sum(x * transposed_conv2d(Tensor(y), tconv_p).data)
        assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))

    def test_groups_rejected(self, rng):
        with pytest.raises(ValidationError):
            conv_params(rng, 2, 2, 2, transposed=True, groups=2)


class TestDense:
    def test_equals_pointwise_conv(self, rng):
        p = init_dense(rng, 4, 3)
        x = Tensor(rng.standard_normal((2, 4, 5, 5)))
        conv = ConvParams(kernel=p.weight, bias=p.bias)
        np.testing.assert_allclose(dense(x, p).data, conv2d(x, conv).data, rtol=1e-12)

    def test_feature_mismatch(self, rng):
        p = DenseParams(weight=Tensor(np.ones((2, 3, 1, 1))), bias=Tensor(np.zeros((1, 2, 1, 1))))
        with pytest.raises(ShapeError):
            dense(Tensor(np.ones((1, 4, 2, 2))), p)


class TestPooling:
    @pytest.mark.parametrize("trial", range(20))
    def test_max_and_avg_match_oracle(self, trial):
        rng = np.random.default_rng(300 + trial)
        x = rng.standard_normal((2, 3, 8, 7))
        blocks = x[:, :, :8, :6].reshape(2, 3, 4, 2, 3, 2)
        np.testing.assert_array_equal(pool2d(Tensor(x), PoolMode.max).data, blocks.max(axis=(3, 5)))
        np.testing.assert_allclose(pool2d(Tensor(x), PoolMode.avg).data, blocks.mean(axis=(3, 5)), rtol=1e-5)

    def test_max_gradient_goes_to_first_argmax(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        from src.modules.tensor_core.service import reduce_sum
        reduce_sum(pool2d(x, PoolMode.max)).backward()
        np.testing.assert_array_equal(x.grad.ravel(), [1, 0, 0, 0])

    def test_window_larger_than_input(self):
        with pytest.raises(ShapeError):
            pool2d(Tensor(np.ones((1, 1, 1, 1))), PoolMode.max)

    def test_global_pool(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        np.testing.assert_array_equal(global_pool(Tensor(x), "max").data[:, :, 0, 0], x.max(axis=(2, 3)))
        np.testing.assert_allclose(global_pool(Tensor(x), "avg").data[:, :, 0, 0], x.mean(axis=(2, 3)))


class TestNormalization:
    def test_batch_norm_train_normalizes_and_updates_stats(self, rng):
        p = init_norm(3, running=True)
        x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
        out = batch_norm(Tensor(x), p, Mode.train).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)
        expected_mean = 0.1 * x.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(p.running_mean.data.ravel(), expected_mean, rtol=1e-5)

    def test_batch_norm_infer_uses_running_stats(self, rng):
        p = init_norm(2, running=True)
        p.running_mean.data[...] = 1.0
        p.running_var.data[...] = 4.0
        x = Tensor(np.full((1, 2, 2, 2), 3.0))
        np.testing.assert_allclose(batch_norm(x, p, Mode.infer).data, 1.0, rtol=1e-5)
        assert np.all(p.running_mean.data == 1.0)

    def test_batch_norm_needs_two_values(self):
        with pytest.raises(ShapeError):
            batch_norm(Tensor(np.ones((1, 2, 1, 1))), init_norm(2, running=True), Mode.train)

    def test_layer_norm_over_channels(self, rng):
        x = rng.standard_normal((2, 6, 3, 3))
        out = layer_norm(Tensor(x), init_norm(6)).data
        np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=1), 1, atol=1e-3)


class TestActivations:
    def test_relu_and_leaky(self):
        x = Tensor(np.array([-2.0, -0.5, 0.0, 1.5]).reshape(1, 1, 2, 2))
        np.testing.assert_array_equal(activation("relu", x).data.ravel(), [0, 0, 0, 1.5])
        np.testing.assert_allclose(activation("leaky_relu", x, slope=0.1).data.ravel(), [-0.2, -0.05, 0, 1.5])

    def test_gelu_known_values(self):
        x = Tensor(np.array([0.0, 1.0, -1.0, 3.0]).reshape(1, 1, 2, 2))
        np.testing.assert_allclose(
            activation("gelu", x).data.ravel(),
            [0.0, 0.8413447460685429, -0.15865525393145707, 2.995950158267548],
            rtol=1e-12,
        )

    def test_sigmoid_strictly_interior(self):
        x = Tensor(np.array([-1e4, -50.0, 50.0, 1e4], dtype=np.float32).reshape(1, 1, 2, 2))
        out = activation(ActivationKind.sigmoid, x).data
        assert np.all(out > 0) and np.all(out < 1)
        assert out.min() >= np.float32(SIGMOID_CLIP)

    def test_sigmoid_gradient_zero_where_clipped(self):
        from src.modules.tensor_core.service import reduce_sum
        x = Tensor(np.array([-30.0, 0.0, 30.0, 2.0]).reshape(1, 1, 2, 2), requires_grad=True)
        reduce_sum(activation(ActivationKind.sigmoid, x)).backward()
        s = 1.0 / (1.0 + np.exp(-2.0))
        np.testing.assert_allclose(x.grad.ravel(), [0.0, 0.25, 0.0, s * (1 - s)], rtol=1e-12)

    def test_power_clamps_negatives(self):
        x = Tensor(np.array([-1.0, -0.5, 2.0, 3.0]).reshape(1, 1, 2, 2))
        out = activation("power", x, gamma=2.0).data.ravel()
        np.testing.assert_array_equal(out, [0, 0, 4, 9])
        assert clamp_diagnostics()["power"] == 2

    def test_power_rejects_gamma_below_one(self):
        with pytest.raises(DomainError):
            activation("power", Tensor(np.ones((1, 1, 1, 1))), gamma=0.5)


class TestDropout:
    def test_infer_is_identity(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        assert dropout(x, 0.5, None, Mode.infer) is x

    def test_train_keeps_expectation(self):
        x = Tensor(np.ones((1, 4, 64, 64)))
        out = dropout(x, 0.5, np.random.default_rng(0), Mode.train).data
        assert set(np.unique(out)) <= {0.0, 2.0}
        assert abs(out.mean() - 1.0) < 0.05

    def test_train_requires_rng(self):
        with pytest.raises(ConfigError):
            dropout(Tensor(np.ones((1, 1, 2, 2))), 0.5, None, Mode.train)

    def test_rate_range(self):
        with pytest.raises(DomainError):
            dropout(Tensor(np.ones((1, 1, 2, 2))), 1.0, None, Mode.infer)
