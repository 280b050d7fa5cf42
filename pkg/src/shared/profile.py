# src/shared/profile.py

"""
实验配置文件 (key = value)

键名按分组加前缀：MODEL_* -> ModelConfig，LOSS_* -> DiceLossConfig，
TRAIN_* -> TrainRunConfig，AUGMENT_* -> AugmentConfig。
ABLATION 可选，给出消融行名时先套用该行的结构开关，再叠加 MODEL_* 中显式写出的键。
列表用逗号分隔，空值表示空集合；clip_norm 之类可空字段写 none。
"""

import logging
import typing
from pathlib import Path

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field

from src.core.errors import ConfigError, LfaIOError
from src.modules.data_io.schemas import AugmentConfig
from src.modules.lfa_model.ablations import ablation_config
from src.modules.lfa_model.schemas import ModelConfig
from src.modules.training.schemas import DiceLossConfig, TrainRunConfig

logger = logging.getLogger(__name__)

_SECTIONS: dict[str, type[BaseModel]] = {
    "MODEL": ModelConfig,
    "LOSS": DiceLossConfig,
    "TRAIN": TrainRunConfig,
    "AUGMENT": AugmentConfig,
}
_NONE_VALUES = {"", "none", "null"}


class RunProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    ablation: str | None = None
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: DiceLossConfig = Field(default_factory=DiceLossConfig)
    train: TrainRunConfig = Field(default_factory=TrainRunConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)


def _is_sequence(schema: type[BaseModel], field: str) -> bool:
    return typing.get_origin(schema.model_fields[field].annotation) is tuple


def _is_optional(schema: type[BaseModel], field: str) -> bool:
    return type(None) in typing.get_args(schema.model_fields[field].annotation)


def _parse_value(schema: type[BaseModel], field: str, raw: str | None):
    text = (raw or "").strip()
    if _is_sequence(schema, field):
        return [item.strip() for item in text.split(",") if item.strip()]
    if _is_optional(schema, field) and text.lower() in _NONE_VALUES:
        return None
    return text


def parse_profile(values: dict[str, str | None], source: str = "<profile>") -> RunProfile:
    sections: dict[str, dict] = {name: {} for name in _SECTIONS}
    ablation = None
    for key, raw in values.items():
        if key == "ABLATION":
            ablation = (raw or "").strip() or None
            continue
        prefix, _, field = key.partition("_")
        schema = _SECTIONS.get(prefix)
        if schema is None or field.lower() not in schema.model_fields:
            raise ConfigError(f"{source}: 未知配置项 {key}")
        field = field.lower()
        sections[prefix][field] = _parse_value(schema, field, raw)

    model_overrides = sections["MODEL"]
    if ablation is not None:
        row = ablation_config(ablation)
        model = ModelConfig.model_validate({**row.model_dump(), **model_overrides})
        changed = sorted(f for f in model_overrides if getattr(model, f) != getattr(row, f))
        if changed:
            keys = ", ".join(f"MODEL_{f.upper()}" for f in changed)
            logger.warning(f"{source}: {keys} 覆盖了消融行 {ablation} 的设置")
    else:
        model = ModelConfig.model_validate(model_overrides)

    return RunProfile(
        ablation=ablation,
        model=model,
        loss=DiceLossConfig.model_validate(sections["LOSS"]),
        train=TrainRunConfig.model_validate(sections["TRAIN"]),
        augment=AugmentConfig.model_validate(sections["AUGMENT"]),
    )


def load_profile(path: Path | None) -> RunProfile:
    """path 为空时返回全部默认值"""
    if path is None:
        return RunProfile()
    path = Path(path)
    if not path.is_file():
        raise LfaIOError(f"配置文件不存在: {path}")
    profile = parse_profile(dotenv_values(path, interpolate=False), str(path))
    logger.debug(f"已加载配置 {path}: {profile.model.describe()}")
    return profile


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def dump_profile(profile: RunProfile) -> str:
    """写回 key = value 文本；结构开关已经展开，不再写 ABLATION"""
    lines: list[str] = []
    for prefix, section in (
        ("MODEL", profile.model),
        ("LOSS", profile.loss),
        ("TRAIN", profile.train),
        ("AUGMENT", profile.augment),
    ):
        lines.append(f"# {prefix.lower()}")
        for field, value in section.model_dump().items():
            lines.append(f"{prefix}_{field.upper()} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)
