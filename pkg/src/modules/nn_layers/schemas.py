# src/modules/nn_layers/schemas.py

from enum import Enum
from typing import ClassVar

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.modules.tensor_core.tensor import Tensor


class Mode(str, Enum):
    train = "train"
    infer = "infer"


class Padding(str, Enum):
    same = "same"
    valid = "valid"


class PoolMode(str, Enum):
    max = "max"
    avg = "avg"


class ActivationKind(str, Enum):
    relu = "relu"
    leaky_relu = "leaky_relu"
    gelu = "gelu"
    sigmoid = "sigmoid"
    power = "power"


class ParamBundle(BaseModel):
    """
    层参数的公共基类：字段是 Tensor，named_tensors() 按字段名返回可学习张量
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    # 子类声明哪些字段是可学习参数、哪些是不参与训练的缓冲区
    LEARNABLE: ClassVar[tuple[str, ...]] = ()
    BUFFERS: ClassVar[tuple[str, ...]] = ()

    def named_tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.LEARNABLE if getattr(self, name) is not None}

    def named_buffers(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.BUFFERS if getattr(self, name) is not None}


class ConvParams(ParamBundle):
    """
    卷积参数
    - 普通卷积: kernel 形状 (C_out, C_in/groups, kH, kW)
    - 转置卷积: kernel 形状 (C_in, C_out, kH, kW)，与步长相同的普通卷积共用同一份数组布局
    bias 形状 (1, C_out, 1, 1)
    """
    kernel: Tensor
    bias: Tensor
    stride: int = Field(default=1, ge=1)
    dilation: int = Field(default=1, ge=1)
    groups: int = Field(default=1, ge=1)
    padding: Padding = Padding.same
    transposed: bool = False

    LEARNABLE: ClassVar[tuple[str, ...]] = ("kernel", "bias")

    @model_validator(mode="after")
    def _check_layout(self):
        k0, k1, kh, kw = self.kernel.shape
        if kh < 1 or kw < 1:
            raise ValueError("卷积核尺寸必须 >= 1")
        if self.transposed and self.groups != 1:
            raise ValueError("转置卷积不支持分组")
        if not self.transposed and k0 % self.groups != 0:
            raise ValueError(f"输出通道 {k0} 不能被 groups={self.groups} 整除")
        if self.bias.shape != (1, self.out_channels, 1, 1):
            raise ValueError(f"bias 形状应为 (1,{self.out_channels},1,1)，实际为 {self.bias.shape}")
        return self

    @property
    def in_channels(self) -> int:
        if self.transposed:
            return self.kernel.shape[0]
        return self.kernel.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        if self.transposed:
            return self.kernel.shape[1]
        return self.kernel.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.kernel.shape[2], self.kernel.shape[3]


class NormParams(ParamBundle):
    """
    BatchNorm / LayerNorm 参数；running_* 只有 BatchNorm 使用，不参与训练
    所有逐通道向量的形状都是 (1, C, 1, 1)
    """
    scale: Tensor
    shift: Tensor
    running_mean: Tensor | None = None
    running_var: Tensor | None = None
    epsilon: float = Field(default=1e-5, gt=0)
    momentum: float = Field(default=0.9, gt=0, lt=1)

    LEARNABLE: ClassVar[tuple[str, ...]] = ("scale", "shift")
    BUFFERS: ClassVar[tuple[str, ...]] = ("running_mean", "running_var")

    @model_validator(mode="after")
    def _check_stats(self):
        if self.shift.shape != self.scale.shape:
            raise ValueError("scale 与 shift 形状不一致")
        if self.running_var is not None and (self.running_var.data < 0).any():
            raise ValueError("running_var 必须非负")
        return self

    @property
    def channels(self) -> int:
        return self.scale.shape[1]


class DenseParams(ParamBundle):
    """
    逐像素全连接：weight 形状 (features_out, features_in, 1, 1)，bias 形状 (1, features_out, 1, 1)
    """
    weight: Tensor
    bias: Tensor

    LEARNABLE: ClassVar[tuple[str, ...]] = ("weight", "bias")

    @model_validator(mode="after")
    def _check_layout(self):
        if self.weight.shape[2:] != (1, 1):
            raise ValueError(f"dense 权重形状必须是 (out,in,1,1)，实际为 {self.weight.shape}")
        if self.bias.shape != (1, self.weight.shape[0], 1, 1):
            raise ValueError("dense bias 形状与 features_out 不一致")
        return self

    @property
    def features_in(self) -> int:
        return self.weight.shape[1]

    @property
    def features_out(self) -> int:
        return self.weight.shape[0]
