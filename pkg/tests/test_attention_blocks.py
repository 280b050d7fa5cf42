# tests/test_attention_blocks.py

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.special import expit

from src.core.errors import ShapeError
from src.modules.attention_blocks.schemas import LiteFusionParams
from src.modules.attention_blocks.service import (
    focal_modulation,
    init_litefusion,
    init_raa,
    litefusion_forward,
    raa_forward,
)
from src.modules.nn_layers.schemas import Mode
from src.modules.nn_layers.service import init_conv
from src.modules.tensor_core.tensor import Tensor


class TestRegionAwareAttention:
    def test_output_is_channel_scaled_input(self, rng):
        p = init_raa(rng, 4)
        x = rng.standard_normal((2, 4, 8, 8))
        out = raa_forward(Tensor(x), p, Mode.infer).data
        assert out.shape == x.shape
        ratio = out / x
        # 每个 (n, c) 只有一个非负缩放系数
        spread = ratio.max(axis=(2, 3)) - ratio.min(axis=(2, 3))
        assert np.all(spread < 1e-6)
        assert np.all(ratio >= -1e-12)

    def test_zero_input_gives_zero(self, rng):
        p = init_raa(rng, 3)
        out = raa_forward(Tensor(np.zeros((1, 3, 16, 16))), p, Mode.infer)
        assert np.all(out.data == 0)

    def test_train_mode_updates_running_stats(self, rng):
        p = init_raa(rng, 2)
        before = p.bn.running_mean.data.copy()
        raa_forward(Tensor(rng.standard_normal((2, 2, 8, 8)) + 1.0), p, Mode.train)
        assert not np.array_equal(before, p.bn.running_mean.data)

    @pytest.mark.parametrize("shape", [(1, 4, 4, 8), (1, 4, 8, 7)])
    def test_minimum_extent(self, rng, shape):
        with pytest.raises(ShapeError):
            raa_forward(Tensor(np.ones(shape)), init_raa(rng, 4), Mode.infer)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            raa_forward(Tensor(np.ones((1, 3, 8, 8))), init_raa(rng, 4), Mode.infer)


class TestFocalModulation:
    def test_matches_direct_formula(self, rng):
        p = init_litefusion(rng, 3)
        l4 = rng.standard_normal((2, 3, 5, 5))
        out = focal_modulation(Tensor(l4), p).data

        contrast = l4.max(axis=(2, 3)) - l4.mean(axis=(2, 3))
        m = p.alpha * contrast
        w = p.mod_pw.kernel.data[:, :, 0, 0].astype(np.float64)
        b = p.mod_pw.bias.data[0, :, 0, 0].astype(np.float64)
        gate = expit(m @ w.T + b)[:, :, None, None]
        expected = np.maximum(l4 * gate, 0) ** p.gamma * l4
        np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-6)

    def test_negative_modulation_is_clamped(self, rng):
        p = init_litefusion(rng, 2)
        out = focal_modulation(Tensor(-np.abs(rng.standard_normal((1, 2, 4, 4))) - 0.1), p)
        assert np.all(out.data == 0)


class TestLiteFusion:
    def test_shape_preserved(self, rng):
        p = init_litefusion(rng, 6)
        x = Tensor(rng.standard_normal((2, 6, 8, 8)))
        assert litefusion_forward(x, p, Mode.infer).shape == x.shape

    def test_infer_is_deterministic(self, rng):
        p = init_litefusion(rng, 4)
        x = Tensor(rng.standard_normal((1, 4, 8, 8)))
        a = litefusion_forward(x, p, Mode.infer).data
        b = litefusion_forward(x, p, Mode.infer).data
        np.testing.assert_array_equal(a, b)

    def test_dropout_only_differs_in_train(self, rng):
        p = init_litefusion(rng, 4, drop_rate=0.0)
        x = Tensor(rng.standard_normal((1, 4, 8, 8)))
        train = litefusion_forward(x, p, Mode.train, np.random.default_rng(1)).data
        np.testing.assert_allclose(train, litefusion_forward(x, p, Mode.infer).data, rtol=1e-12)

    def test_train_dropout_changes_output(self, rng):
        p = init_litefusion(rng, 4, drop_rate=0.5)
        x = Tensor(rng.standard_normal((1, 4, 8, 8)))
        train = litefusion_forward(x, p, Mode.train, np.random.default_rng(1)).data
        assert not np.allclose(train, litefusion_forward(x, p, Mode.infer).data)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            litefusion_forward(Tensor(np.ones((1, 3, 8, 8))), init_litefusion(rng, 4), Mode.infer)

    def test_width_consistency_validated(self, rng):
        p = init_litefusion(rng, 4)
        fields = {name: getattr(p, name) for name in LiteFusionParams.model_fields}
        fields["proj_a"] = init_conv(rng, 4, 5, 1)
        with pytest.raises(ValidationError):
            LiteFusionParams(**fields)

    def test_named_tensors_are_prefixed(self, rng):
        names = init_litefusion(rng, 4).named_tensors()
        assert "chan_dense1.weight" in names
        assert "tok_dwc.kernel" in names
        assert names["chan_dense1.weight"].shape == (8, 4, 1, 1)
