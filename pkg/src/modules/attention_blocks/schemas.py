# src/modules/attention_blocks/schemas.py

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.modules.nn_layers.schemas import ConvParams, DenseParams, NormParams, ParamBundle
from src.modules.tensor_core.tensor import Tensor


class CompositeParams(BaseModel):
    """
    由多个层参数组成的参数包，张量名形如 "conv3.kernel"
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    def children(self) -> list[tuple[str, ParamBundle]]:
        return [
            (name, getattr(self, name))
            for name in type(self).model_fields
            if isinstance(getattr(self, name), ParamBundle)
        ]

    def named_tensors(self) -> dict[str, Tensor]:
        return {
            f"{child}.{key}": tensor
            for child, bundle in self.children()
            for key, tensor in bundle.named_tensors().items()
        }

    def named_buffers(self) -> dict[str, Tensor]:
        return {
            f"{child}.{key}": tensor
            for child, bundle in self.children()
            for key, tensor in bundle.named_buffers().items()
        }


class RaaParams(CompositeParams):
    conv3: ConvParams
    bn: NormParams

    @model_validator(mode="after")
    def _check_width(self):
        if self.conv3.in_channels != self.conv3.out_channels:
            raise ValueError("RAA 的 3×3 卷积必须保持通道数不变")
        if self.bn.channels != self.conv3.out_channels:
            raise ValueError("RAA 的 BN 通道数与卷积输出不一致")
        return self

    @property
    def width(self) -> int:
        return self.conv3.in_channels


class LiteFusionParams(CompositeParams):
    """
    LiteFusion 注意力块的全部参数，块内所有特征图都保持宽度 W_b
    通道混合器的两个 dense 之间隐藏宽度为 mixer_ratio·W_b
    """
    # 入口：1×1 -> LayerNorm -> 3×3
    entry_pw: ConvParams
    entry_ln: NormParams
    entry_conv3: ConvParams
    # 通道注意力权重
    ctx_conv3: ConvParams
    ctx_pw: ConvParams
    att_pw: ConvParams
    # 空间滤波
    spatial_conv3: ConvParams
    # 焦点调制
    mod_pw: ConvParams
    # 残差投影
    proj_a: ConvParams
    proj_b: ConvParams
    # token 混合器
    tok_ln: NormParams
    tok_dwc: ConvParams
    # 通道混合器
    chan_ln: NormParams
    chan_dense1: DenseParams
    chan_dense2: DenseParams

    alpha: float = Field(default=0.25, gt=0, le=1)
    gamma: float = Field(default=2.0, ge=1)
    drop_rate: float = Field(default=0.5, ge=0, lt=1)

    @model_validator(mode="after")
    def _check_width(self):
        width = self.width
        for name in (
            "entry_pw", "entry_conv3", "ctx_conv3", "ctx_pw", "att_pw",
            "spatial_conv3", "mod_pw", "proj_a", "proj_b", "tok_dwc",
        ):
            conv: ConvParams = getattr(self, name)
            if conv.in_channels != width or conv.out_channels != width:
                raise ValueError(f"{name} 通道数 {conv.in_channels}->{conv.out_channels} 与块宽度 {width} 不一致")
        for name in ("entry_ln", "tok_ln", "chan_ln"):
            if getattr(self, name).channels != width:
                raise ValueError(f"{name} 通道数与块宽度 {width} 不一致")
        if self.chan_dense1.features_in != width or self.chan_dense2.features_out != width:
            raise ValueError("通道混合器的输入 / 输出宽度必须等于块宽度")
        if self.chan_dense1.features_out != self.chan_dense2.features_in:
            raise ValueError("通道混合器两个 dense 的隐藏宽度不一致")
        return self

    @property
    def width(self) -> int:
        return self.entry_pw.in_channels
