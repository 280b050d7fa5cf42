# src/modules/training/schemas.py

import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator


class DiceLossConfig(BaseModel):
    """
    加权 Dice 损失：class_weights 依次为 (血管, 背景)，和必须为 1
    """
    model_config = ConfigDict(frozen=True)

    class_weights: tuple[float, float] = (0.7, 0.3)
    smoothing: float = Field(default=1e-6, gt=0)

    @field_validator("class_weights")
    @classmethod
    def _weights_sum_to_one(cls, value: tuple[float, float]) -> tuple[float, float]:
        if any(w < 0 for w in value):
            raise ValueError(f"类别权重不能为负: {value}")
        if not math.isclose(sum(value), 1.0, abs_tol=1e-9):
            raise ValueError(f"类别权重之和必须为 1，实际为 {sum(value)}")
        return value


class AdamState(BaseModel):
    """
    Adam 优化器状态；m / v 按参数名保存，形状与参数一致
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    step: int = Field(default=0, ge=0)
    learning_rate: float = Field(default=0.002, gt=0)
    beta1: float = Field(default=0.9, gt=0, lt=1)
    beta2: float = Field(default=0.999, gt=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)
    m: dict[str, np.ndarray] = Field(default_factory=dict)
    v: dict[str, np.ndarray] = Field(default_factory=dict)


class TrainRunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    batch_size: int = Field(default=8, ge=1)
    epochs: int = Field(default=1, ge=1)
    seed: int = 0
    learning_rate: float = Field(default=0.002, gt=0)
    # 训练集比例，其余作为验证集
    split_fraction: float = Field(default=0.8, gt=0, le=1)
    # 每隔多少个 epoch 保存一次 checkpoint，0 表示只保存最终结果
    checkpoint_every: int = Field(default=0, ge=0)
    # 梯度全局范数上限，None 表示不裁剪
    clip_norm: float | None = Field(default=None, gt=0)
    input_size: int = Field(default=512, ge=64)
    augment: bool = False
    # 每张训练图像离线扩增出的副本数 (1 = 不扩增)
    multiplicity: int = Field(default=1, ge=1)

    @field_validator("input_size")
    @classmethod
    def _multiple_of_eight(cls, value: int) -> int:
        if value % 8:
            raise ValueError(f"input_size 必须是 8 的倍数，实际为 {value}")
        return value


class EpochStats(BaseModel):
    epoch: int
    mean_loss: float
    train_dice: float
    val_dice: float | None = None

    def log_line(self) -> str:
        """epoch,mean_loss,train_dice,val_dice"""
        val = "nan" if self.val_dice is None else f"{self.val_dice:.6f}"
        return f"{self.epoch},{self.mean_loss:.6f},{self.train_dice:.6f},{val}"
