# src/modules/lfa_model/ablations.py

"""
十个消融配置，按结构从简到繁排列，最后一行就是完整的 LFA-Net
行名查找不区分大小写，并忽略空白
"""

from src.core.errors import AblationLookupError

from .schemas import ModelConfig

# 无多尺度分支时单个 3×3 卷积的参数量比三分支更大，基线行收窄宽度以保持参数量随结构单调增长
LU_NS_WIDTHS = (8, 16, 32)

_MLU = dict(
    use_multiscale=True,
    use_skips=True,
    raa_on_skips=(),
    use_lf_bottleneck=False,
    use_raa_bottleneck=False,
)

ABLATION_ROWS: dict[str, dict] = {
    "LU-NS": dict(_MLU, use_multiscale=False, use_skips=False, stage_widths=LU_NS_WIDTHS),
    "MLU-NS": dict(_MLU, use_skips=False),
    "MLU": dict(_MLU),
    "MLU+R-Skip": dict(_MLU, raa_on_skips=(1, 2, 3)),
    "MLU+LF-Bottleneck": dict(_MLU, use_lf_bottleneck=True),
    "MLU+R-Skip+LF-Bottleneck": dict(_MLU, raa_on_skips=(1, 2, 3), use_lf_bottleneck=True),
    "MLU+LF+R-Bottleneck": dict(_MLU, use_lf_bottleneck=True, use_raa_bottleneck=True),
    "MLU+R(1,3)-Skip+LF+R-Bottleneck": dict(_MLU, raa_on_skips=(1, 3), use_lf_bottleneck=True, use_raa_bottleneck=True),
    "MLU+R(2,3)-Skip+LF+R-Bottleneck": dict(_MLU, raa_on_skips=(2, 3), use_lf_bottleneck=True, use_raa_bottleneck=True),
    "MLU+R(1,2)-Skip+LF+R-Bottleneck": dict(_MLU, raa_on_skips=(1, 2), use_lf_bottleneck=True, use_raa_bottleneck=True),
}

FINAL_ROW = "MLU+R(1,2)-Skip+LF+R-Bottleneck"

# 最终模型的别名
_ALIASES = {"LFA-NET": FINAL_ROW, "FINAL": FINAL_ROW}


def _normalize(name: str) -> str:
    return "".join(name.split()).upper()


_LOOKUP = {_normalize(row): row for row in ABLATION_ROWS}
_LOOKUP.update({_normalize(alias): row for alias, row in _ALIASES.items()})


def ablation_names() -> list[str]:
    return list(ABLATION_ROWS)


def ablation_config(name: str, base: ModelConfig | None = None) -> ModelConfig:
    """
    按行名返回消融配置；base 提供 α / γ / dropout 等非结构字段，默认为 ModelConfig()
    """
    row = _LOOKUP.get(_normalize(name))
    if row is None:
        valid = ", ".join(ABLATION_ROWS)
        raise AblationLookupError(f"未知的消融配置 '{name}'，可选: {valid}")
    base = base or ModelConfig()
    return ModelConfig.model_validate({**base.model_dump(), **ABLATION_ROWS[row]})
