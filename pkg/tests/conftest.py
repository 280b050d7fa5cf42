# tests/conftest.py

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from src.modules.lfa_model.schemas import ModelConfig
from src.modules.lfa_model.service import build_model
from src.modules.nn_layers.service import reset_clamp_diagnostics


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


@pytest.fixture(autouse=True)
def _clean_diagnostics():
    reset_clamp_diagnostics()
    yield
    reset_clamp_diagnostics()


@pytest.fixture
def default_model():
    return build_model(ModelConfig(), seed=0)


def synthetic_pair(seed: int, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """
    一对容易学习的合成样本：亮条纹就是"血管"
    返回 (H,W,3) uint8 图像与 (H,W) uint8 掩码 (0/255)
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    angle = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin((xx * np.cos(angle) + yy * np.sin(angle)) / 3.0 + phase)
    mask = stripes > 0.6
    base = 0.25 + 0.05 * rng.standard_normal((size, size))
    red = np.clip(base + 0.6 * mask, 0, 1)
    image = np.stack([red, 0.8 * red, 0.5 * red], axis=-1)
    return (image * 255).astype(np.uint8), (mask * 255).astype(np.uint8)


@pytest.fixture
def dataset_dir(tmp_path: Path) -> Path:
    """四对 64×64 合成样本 + 数据清单 manifest.tsv (相对路径)"""
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    lines = ["# image\tmask"]
    for i in range(4):
        image, mask = synthetic_pair(i)
        Image.fromarray(image, mode="RGB").save(tmp_path / "images" / f"img{i}.png")
        Image.fromarray(mask, mode="L").save(tmp_path / "masks" / f"img{i}.png")
        lines.append(f"images/img{i}.png\tmasks/img{i}.png")
    (tmp_path / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return tmp_path
