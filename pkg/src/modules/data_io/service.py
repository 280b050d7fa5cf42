# src/modules/data_io/service.py

"""
图像 / 掩码读写、缩放、数据增强与数据清单
"""

from __future__ import annotations

import io
import logging
import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from src.core.errors import ConfigError, DataError, ImageReadError, LfaIOError, ShapeError
from src.modules.tensor_core.tensor import DEFAULT_DTYPE, Tensor

from .schemas import AugmentConfig, Manifest, ManifestEntry, Sample

logger = logging.getLogger(__name__)

# 8 位图像可接受的模式；其余 (16 位、浮点等) 视为位深不支持
_SUPPORTED_MODES = {"RGB", "RGBA", "L", "LA", "P"}
MASK_THRESHOLD = 127


# --- 原子写入 ---

def atomic_write_bytes(path: Path, data: bytes) -> None:
    """写到同目录的临时文件后 rename，失败时不留下半截文件"""
    path = Path(path)
    tmp_name = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp", delete=False) as fh:
            tmp_name = fh.name
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
    except OSError as exc:
        if tmp_name is not None and os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise LfaIOError(f"无法写入 {path}: {exc}") from exc


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# --- 读取 ---

def _open_8bit(path: Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in _SUPPORTED_MODES:
                raise ImageReadError(f"{path}: 不支持的图像模式 {img.mode} (需要 8 位图像)")
            return img.copy()
    except ImageReadError:
        raise
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageReadError(f"无法读取图像 {path}: {exc}") from exc


def load_image(path: Path) -> Tensor:
    """8 位 RGB 图像 -> (1,3,H,W)，取值缩放到 [0,1]"""
    img = _open_8bit(Path(path)).convert("RGB")
    arr = np.asarray(img, dtype=DEFAULT_DTYPE) / 255.0
    return Tensor(arr.transpose(2, 0, 1)[None].astype(DEFAULT_DTYPE))


def load_mask(path: Path) -> Tensor:
    """灰度或 RGB 掩码 -> (1,1,H,W)，亮度 > 127 记为 1"""
    img = _open_8bit(Path(path)).convert("L")
    arr = (np.asarray(img) > MASK_THRESHOLD).astype(DEFAULT_DTYPE)
    return Tensor(arr[None, None])


# --- 缩放 ---

def resize_to(t: Tensor, height: int, width: int, *, nearest: bool = False) -> Tensor:
    """逐通道缩放到任意 height×width，推理时把概率图还原到原图尺寸"""
    n, c, h, w = t.shape
    if (h, w) == (height, width):
        return Tensor(t.data.copy())
    resample = Image.Resampling.NEAREST if nearest else Image.Resampling.BILINEAR
    out = np.empty((n, c, height, width), dtype=DEFAULT_DTYPE)
    for i in range(n):
        for j in range(c):
            plane = Image.fromarray(t.data[i, j].astype(np.float32), mode="F")
            out[i, j] = np.asarray(plane.resize((width, height), resample=resample))
    return Tensor(out)


def resize(t: Tensor, target: int, *, nearest: bool = False) -> Tensor:
    """
    缩放到 target×target：图像用双线性，掩码 (nearest=True) 用最近邻以保持二值
    源尺寸已经等于目标时原样返回副本
    """
    if target < 8 or target % 8:
        raise ConfigError(f"目标尺寸必须 >= 8 且是 8 的倍数，实际为 {target}")
    return resize_to(t, target, target, nearest=nearest)


# --- 数据增强 ---

def _rotate(t: Tensor, angle: float, nearest: bool) -> Tensor:
    """逆时针旋转 angle 度，画布大小不变，超出原图的区域填 0"""
    resample = Image.Resampling.NEAREST if nearest else Image.Resampling.BILINEAR
    out = np.empty_like(t.data)
    for i in range(t.shape[0]):
        for j in range(t.shape[1]):
            plane = Image.fromarray(t.data[i, j].astype(np.float32), mode="F")
            out[i, j] = np.asarray(plane.rotate(angle, resample=resample, fillcolor=0.0))
    return Tensor(out)


def apply_augmentation(sample: Sample, angle: float, contrast: float) -> Sample:
    """
    确定性的增强：旋转 angle 度 (图像双线性、掩码最近邻)，再对图像做 clamp(0.5 + s·(x-0.5), 0, 1)
    """
    image, mask = sample.image, sample.mask
    if angle != 0.0:
        image = _rotate(image, angle, nearest=False)
        mask = _rotate(mask, angle, nearest=True)
    if contrast != 1.0:
        image = Tensor(np.clip(0.5 + contrast * (image.data - 0.5), 0.0, 1.0).astype(DEFAULT_DTYPE))
    return Sample(image=image, mask=mask, name=sample.name)


def augment(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> Sample:
    """随机旋转 [-20°, +20°] 与对比度系数 [0.8, 1.25]"""
    cfg = cfg or AugmentConfig()
    angle = float(rng.uniform(-cfg.max_angle, cfg.max_angle))
    contrast = float(rng.uniform(*cfg.contrast_range))
    return apply_augmentation(sample, angle, contrast)


def expand_with_augmentations(
    samples: Sequence[Sample],
    multiplicity: int,
    seed: int,
    cfg: AugmentConfig | None = None,
) -> list[Sample]:
    """每个样本保留原图，再追加 multiplicity-1 个随机增强副本"""
    if multiplicity < 1:
        raise ConfigError(f"multiplicity 必须 >= 1，实际为 {multiplicity}")
    rng = np.random.default_rng(seed)
    expanded: list[Sample] = []
    for sample in samples:
        expanded.append(sample)
        for k in range(1, multiplicity):
            copy = augment(sample, rng, cfg)
            expanded.append(Sample(image=copy.image, mask=copy.mask, name=f"{sample.name}#aug{k}"))
    return expanded


# --- 数据清单 ---

def read_manifest(path: Path, *, split_seed: int = 0, split_fraction: float = 0.8) -> Manifest:
    """
    每行 "图像路径<TAB>掩码路径"，# 开头为注释；相对路径以清单所在目录为基准
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise LfaIOError(f"无法读取数据清单 {path}: {exc}") from exc

    entries: list[ManifestEntry] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise DataError(f"{path}:{lineno}: 需要两列 (图像<TAB>掩码)，实际 {len(fields)} 列")
        image_path, mask_path = ((path.parent / f.strip()) for f in fields)
        for p in (image_path, mask_path):
            if not p.is_file():
                raise LfaIOError(f"{path}:{lineno}: 文件不存在 {p}")
        entries.append(ManifestEntry(image_path=image_path, mask_path=mask_path))

    logger.info(f"数据清单 {path}: 共 {len(entries)} 对样本")
    return Manifest(entries=entries, split_seed=split_seed, split_fraction=split_fraction)


def load_sample(entry: ManifestEntry, input_size: int) -> Sample:
    image = resize(load_image(entry.image_path), input_size)
    mask = resize(load_mask(entry.mask_path), input_size, nearest=True)
    return Sample(image=image, mask=mask, name=entry.image_path.stem)


def load_samples(entries: Sequence[ManifestEntry], input_size: int) -> list[Sample]:
    return [load_sample(entry, input_size) for entry in entries]


# --- 输出 ---

def write_mask_png(probabilities: Tensor, threshold: float, path: Path) -> None:
    """8 位灰度 PNG：p >= threshold 处为 255，其余为 0"""
    n, c, _, _ = probabilities.shape
    if (n, c) != (1, 1):
        raise ShapeError(f"只能写出单张单通道概率图，实际形状 {probabilities.shape}")
    arr = np.where(probabilities.data[0, 0] >= threshold, 255, 0).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buffer, format="PNG")
    atomic_write_bytes(Path(path), buffer.getvalue())
