# src/modules/data_io/schemas.py

from enum import Enum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.modules.lfa_model.schemas import ModelConfig
from src.modules.tensor_core.tensor import Tensor


class Sample(BaseModel):
    """
    一对训练样本：image (1,3,H,W) 取值 [0,1]，mask (1,1,H,W) 取值 {0,1}
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: Tensor
    mask: Tensor
    name: str = ""

    @model_validator(mode="after")
    def _check_pair(self):
        if self.image.shape[2:] != self.mask.shape[2:]:
            raise ValueError(f"图像 {self.image.shape} 与掩码 {self.mask.shape} 空间尺寸不一致")
        return self


class ManifestEntry(BaseModel):
    image_path: Path
    mask_path: Path


class Manifest(BaseModel):
    entries: list[ManifestEntry]
    split_seed: int = 0
    split_fraction: float = Field(default=0.8, gt=0, le=1)

    def split(self) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
        """
        按 split_seed 打乱后切分训练 / 验证集，训练集数量向下取整
        """
        order = np.random.default_rng(self.split_seed).permutation(len(self.entries))
        n_train = int(len(self.entries) * self.split_fraction)
        train = [self.entries[i] for i in order[:n_train]]
        val = [self.entries[i] for i in order[n_train:]]
        return train, val


class AugmentConfig(BaseModel):
    """
    旋转角度在 [-max_angle, +max_angle] 内均匀采样，对比度系数在 contrast_range 内均匀采样
    """
    model_config = ConfigDict(frozen=True)

    max_angle: float = Field(default=20.0, ge=0, le=180)
    contrast_range: tuple[float, float] = (0.8, 1.25)

    @model_validator(mode="after")
    def _check_range(self):
        low, high = self.contrast_range
        if not 0 < low <= high:
            raise ValueError(f"对比度范围非法: {self.contrast_range}")
        return self


# --- checkpoint 文件头 ---

class TensorKind(str, Enum):
    param = "param"
    buffer = "buffer"
    adam_m = "adam_m"
    adam_v = "adam_v"


class TensorRecord(BaseModel):
    """payload 中一段 float32 数据的位置；offset 以元素计"""
    name: str
    kind: TensorKind
    shape: tuple[int, ...]
    offset: int = Field(ge=0)

    @property
    def count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class OptimizerSnapshot(BaseModel):
    step: int = Field(ge=0)
    learning_rate: float
    beta1: float
    beta2: float
    epsilon: float


class CheckpointHeader(BaseModel):
    config: ModelConfig
    seed: int
    tensors: list[TensorRecord]
    optimizer: OptimizerSnapshot | None = None

    @property
    def payload_elements(self) -> int:
        return sum(record.count for record in self.tensors)
