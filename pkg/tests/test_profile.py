# tests/test_profile.py

import logging
from pathlib import Path

import pytest
from pydantic import ValidationError

from src.core.errors import ConfigError, LfaIOError
from src.modules.lfa_model.schemas import ModelConfig
from src.shared.profile import RunProfile, dump_profile, load_profile, parse_profile

DEFAULT_PROFILE = Path(__file__).resolve().parents[1] / "configs" / "lfa_net.conf"


class TestParseProfile:
    def test_sections_are_routed(self):
        profile = parse_profile({
            "MODEL_ALPHA": "0.5",
            "LOSS_CLASS_WEIGHTS": "0.6, 0.4",
            "TRAIN_EPOCHS": "3",
            "AUGMENT_MAX_ANGLE": "10",
        })
        assert profile.model.alpha == 0.5
        assert profile.loss.class_weights == (0.6, 0.4)
        assert profile.train.epochs == 3
        assert profile.augment.max_angle == 10.0

    def test_empty_list_and_none(self):
        profile = parse_profile({"MODEL_RAA_ON_SKIPS": "", "TRAIN_CLIP_NORM": "none"})
        assert profile.model.raa_on_skips == ()
        assert profile.train.clip_norm is None

    def test_ablation_then_overrides(self):
        profile = parse_profile({"ABLATION": "MLU", "MODEL_USE_RAA_BOTTLENECK": "true"})
        assert profile.ablation == "MLU"
        assert not profile.model.use_lf_bottleneck
        assert profile.model.use_raa_bottleneck

    def test_override_of_ablation_row_warns(self, caplog):
        with caplog.at_level(logging.WARNING, logger="src.shared.profile"):
            profile = parse_profile({"ABLATION": "MLU", "MODEL_USE_RAA_BOTTLENECK": "true", "MODEL_ALPHA": "0.25"})
        assert profile.model.use_raa_bottleneck
        warnings = [r.getMessage() for r in caplog.records if r.levelno == logging.WARNING]
        assert len(warnings) == 1
        assert "MODEL_USE_RAA_BOTTLENECK" in warnings[0] and "MODEL_ALPHA" not in warnings[0]

    def test_ablation_alone_does_not_warn(self, caplog):
        with caplog.at_level(logging.WARNING, logger="src.shared.profile"):
            parse_profile({"ABLATION": "LU-NS", "MODEL_DROP_RATE": "0.5"})
        assert not [r for r in caplog.records if r.levelno == logging.WARNING]

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_profile({"MODEL_DEPTH": "4"})

    def test_unknown_prefix(self):
        with pytest.raises(ConfigError):
            parse_profile({"OPTIM_LR": "0.1"})

    def test_invalid_value(self):
        with pytest.raises(ValidationError):
            parse_profile({"TRAIN_INPUT_SIZE": "60"})

    def test_dump_then_parse(self):
        original = parse_profile({"MODEL_RAA_ON_SKIPS": "2", "TRAIN_CLIP_NORM": "1.5", "TRAIN_AUGMENT": "true"})
        values = {}
        for line in dump_profile(original).splitlines():
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(" = ")
            values[key] = value
        assert parse_profile(values) == original


class TestLoadProfile:
    def test_none_gives_defaults(self):
        assert load_profile(None) == RunProfile()

    def test_shipped_profile_is_default(self):
        profile = load_profile(DEFAULT_PROFILE)
        assert profile.model == ModelConfig()
        assert profile == RunProfile()

    def test_missing_file(self, tmp_path):
        with pytest.raises(LfaIOError):
            load_profile(tmp_path / "missing.conf")

    def test_file_with_comments(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("# 小模型\nABLATION = LU-NS\nTRAIN_BATCH_SIZE = 2\n", encoding="utf-8")
        profile = load_profile(path)
        assert profile.model.stage_widths == (8, 16, 32)
        assert profile.train.batch_size == 2

    def test_ablation_line_in_shipped_profile_takes_effect(self, tmp_path, caplog):
        path = tmp_path / "ablation.conf"
        path.write_text(DEFAULT_PROFILE.read_text(encoding="utf-8") + "\nABLATION = LU-NS\n", encoding="utf-8")
        with caplog.at_level(logging.WARNING, logger="src.shared.profile"):
            profile = load_profile(path)
        assert profile.model.stage_widths == (8, 16, 32)
        assert not profile.model.use_skips
        assert not caplog.records
