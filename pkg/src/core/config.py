# src/core/config.py
from pathlib import Path
from typing import Literal

from pydantic_settings import BaseSettings, SettingsConfigDict

# 仓库根目录 (src/core/config.py 向上两级)
PROJECT_ROOT = Path(__file__).resolve().parents[2]


class Settings(BaseSettings):
    """
    进程级全局配置 - 使用 Pydantic 进行类型校验和设置管理
    所有字段都可以通过 LFA_ 前缀的环境变量或 .env 文件覆盖
    模型结构 / 损失 / 训练超参数不在这里，见 configs/lfa_net.conf
    """
    # --- 环境配置 ---
    ENVIRONMENT: Literal["dev", "test", "prod"] = "dev"
    LOG_LEVEL: str = "INFO"

    # --- 路径配置 ---
    DEFAULT_PROFILE_PATH: Path = PROJECT_ROOT / "configs" / "lfa_net.conf"
    OUTPUT_DIR: Path = PROJECT_ROOT / "runs"

    # --- 推理 / 评估 ---
    DEFAULT_INPUT_SIZE: int = 512
    DEFAULT_THRESHOLD: float = 0.5
    INFER_WORKERS: int = 2

    # --- 梯度校验 ---
    GRADCHECK_EPSILON: float = 1e-3
    GRADCHECK_TOLERANCE: float = 1e-3
    MODEL_GRADCHECK_TOLERANCE: float = 1e-2
    GRADCHECK_SAMPLE_THRESHOLD: int = 4096
    GRADCHECK_MIN_SAMPLES: int = 64

    model_config = SettingsConfigDict(
        case_sensitive=True,
        env_prefix="LFA_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


settings = Settings()
