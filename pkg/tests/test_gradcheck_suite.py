# tests/test_gradcheck_suite.py

import pytest

from src.core.errors import ConfigError
from src.modules.gradcheck.service import case_names, run_suite


class TestSuite:
    def test_registry_covers_layers(self):
        names = case_names()
        for expected in ("conv2d.same", "transposed_conv2d", "dense", "pool.max", "batch_norm.train",
                         "layer_norm", "activation.power", "raa", "litefusion", "dice_loss", "model"):
            assert expected in names
        assert len(names) == len(set(names))

    def test_prefix_filter(self):
        report = run_suite("pool")
        assert {r.op_name.split("[")[0] for r in report.reports} <= {"pool.max", "pool.avg"}
        assert report.passed

    def test_unknown_op(self):
        with pytest.raises(ConfigError):
            run_suite("conv3d")

    @pytest.mark.parametrize("op", ["conv2d", "transposed_conv2d", "dense", "batch_norm", "layer_norm", "activation"])
    def test_layers_pass(self, op):
        report = run_suite(op)
        assert report.passed, report.summary()

    @pytest.mark.parametrize("op", ["raa", "litefusion", "focal_modulation", "dice_loss"])
    def test_blocks_pass(self, op):
        report = run_suite(op)
        assert report.passed, report.summary()

    def test_impossible_tolerance_fails(self):
        report = run_suite("conv2d.same", tolerance=1e-15)
        assert not report.passed
        assert report.failed_ops
        assert "失败" in report.summary()

    @pytest.mark.slow
    def test_model_end_to_end(self):
        report = run_suite("model")
        assert len(report.reports) == 4
        assert report.passed, report.summary()
