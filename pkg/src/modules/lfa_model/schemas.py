# src/modules/lfa_model/schemas.py

from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.modules.attention_blocks.schemas import CompositeParams
from src.modules.nn_layers.schemas import ParamBundle
from src.modules.tensor_core.tensor import Tensor

STAGE_COUNT = 3


class ModelConfig(BaseModel):
    """
    网络结构描述，每个消融行都是这里的一组开关
    默认值即最终模型 (RAA 用在第 1、2 个跳跃连接 + LiteFusion / RAA 瓶颈)
    """
    model_config = ConfigDict(frozen=True)

    in_channels: int = Field(default=3, ge=1)
    stage_widths: tuple[int, int, int] = (9, 18, 36)
    use_multiscale: bool = True
    use_skips: bool = True
    raa_on_skips: tuple[int, ...] = (1, 2)
    use_lf_bottleneck: bool = True
    use_raa_bottleneck: bool = True

    alpha: float = Field(default=0.25, gt=0, le=1)
    gamma: float = Field(default=2.0, ge=1)
    drop_rate: float = Field(default=0.5, ge=0, lt=1)
    leaky_slope: float = Field(default=0.01, ge=0)

    # 实现层面的细节参数
    dilation: int = Field(default=2, ge=1)
    mixer_ratio: int = Field(default=2, ge=1)
    bn_momentum: float = Field(default=0.9, gt=0, lt=1)
    norm_epsilon: float = Field(default=1e-5, gt=0)

    @field_validator("stage_widths")
    @classmethod
    def _positive_widths(cls, value: tuple[int, int, int]) -> tuple[int, int, int]:
        if any(w < 1 for w in value):
            raise ValueError(f"stage_widths 必须全部为正数: {value}")
        return value

    @field_validator("raa_on_skips")
    @classmethod
    def _normalize_skips(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        stages = sorted(set(value))
        unknown = [s for s in stages if not 1 <= s <= STAGE_COUNT]
        if unknown:
            raise ValueError(f"raa_on_skips 只能取 1..{STAGE_COUNT}，收到 {unknown}")
        return tuple(stages)

    def describe(self) -> str:
        """一行摘要，ablation-list 和日志使用"""
        skips = ",".join(str(s) for s in self.raa_on_skips) or "-"
        return (
            f"widths={'/'.join(str(w) for w in self.stage_widths)} "
            f"multiscale={self.use_multiscale} skips={self.use_skips} raa_skips={skips} "
            f"lf_bottleneck={self.use_lf_bottleneck} raa_bottleneck={self.use_raa_bottleneck}"
        )


class Model(BaseModel):
    """
    构建完成的网络：config + 按层名组织的参数
    层名如 "enc1"、"skip2.raa"、"bottleneck.lf"、"dec3"、"head"
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: ModelConfig
    seed: int
    layers: dict[str, ParamBundle | CompositeParams]

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            f"{layer}.{key}": tensor
            for layer, params in self.layers.items()
            for key, tensor in params.named_tensors().items()
        }

    def named_buffers(self) -> dict[str, Tensor]:
        return {
            f"{layer}.{key}": tensor
            for layer, params in self.layers.items()
            for key, tensor in params.named_buffers().items()
        }

    def zero_grad(self) -> None:
        for tensor in self.named_parameters().values():
            tensor.zero_grad()
