# src/modules/evalx/schemas.py

from pydantic import BaseModel, ConfigDict, Field

MIB = 1024 * 1024


class ConfusionCounts(BaseModel):
    model_config = ConfigDict(frozen=True)

    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    tn: int = Field(ge=0)
    fn: int = Field(ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            tn=self.tn + other.tn,
            fn=self.fn + other.fn,
        )


class MetricsReport(BaseModel):
    """
    分割指标，全部是 [0,1] 内的比例；打印时换算为百分比
    """
    model_config = ConfigDict(frozen=True)

    dice: float = Field(ge=0, le=1)
    jaccard: float = Field(ge=0, le=1)
    accuracy: float = Field(ge=0, le=1)
    sensitivity: float = Field(ge=0, le=1)
    specificity: float = Field(ge=0, le=1)


class LayerCost(BaseModel):
    name: str
    params: int
    flops: int


class ComplexityReport(BaseModel):
    """
    模型复杂度：参数量、单次前向 FLOPs (给定输入形状)、权重字节数 (4 字节浮点)
    """
    param_count: int
    flops: int
    model_size_bytes: int
    input_shape: tuple[int, int, int, int]
    layers: list[LayerCost] = Field(default_factory=list)

    @property
    def params_m(self) -> float:
        return self.param_count / 1e6

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def size_mb(self) -> float:
        return self.model_size_bytes / MIB
