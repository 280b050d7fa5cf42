# src/modules/data_io/checkpoint.py

"""
checkpoint 文件读写

文件布局 (全部小端)：
    b"LFANCKPT" | u32 版本 | u32 头长度 | u64 payload 字节数 | JSON 头 | float32 payload | SHA-256
SHA-256 覆盖摘要之前的全部字节。文件不含时间戳，相同模型两次保存得到相同字节。
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from src.core.errors import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    LfaIOError,
)
from src.modules.lfa_model.schemas import Model
from src.modules.lfa_model.service import build_model
from src.modules.training.schemas import AdamState

from .schemas import CheckpointHeader, OptimizerSnapshot, TensorKind, TensorRecord
from .service import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"LFANCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<IIQ")
_DIGEST_SIZE = hashlib.sha256().digest_size
_PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass
class CheckpointContents:
    header: CheckpointHeader
    arrays: dict[tuple[TensorKind, str], np.ndarray]


# --- 写入 ---

def _collect(model: Model, optimizer: AdamState | None) -> list[tuple[TensorKind, str, np.ndarray]]:
    items = [(TensorKind.param, name, t.data) for name, t in model.named_parameters().items()]
    items += [(TensorKind.buffer, name, t.data) for name, t in model.named_buffers().items()]
    if optimizer is not None:
        for name in sorted(optimizer.m):
            items.append((TensorKind.adam_m, name, optimizer.m[name]))
            items.append((TensorKind.adam_v, name, optimizer.v[name]))
    return items


def encode_checkpoint(model: Model, optimizer: AdamState | None = None) -> bytes:
    records: list[TensorRecord] = []
    chunks: list[bytes] = []
    offset = 0
    for kind, name, array in _collect(model, optimizer):
        records.append(TensorRecord(name=name, kind=kind, shape=array.shape, offset=offset))
        chunks.append(np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPE).tobytes())
        offset += array.size

    snapshot = None
    if optimizer is not None:
        snapshot = OptimizerSnapshot(
            step=optimizer.step,
            learning_rate=optimizer.learning_rate,
            beta1=optimizer.beta1,
            beta2=optimizer.beta2,
            epsilon=optimizer.epsilon,
        )
    header = CheckpointHeader(config=model.config, seed=model.seed, tensors=records, optimizer=snapshot)
    header_bytes = header.model_dump_json().encode("utf-8")
    payload = b"".join(chunks)

    body = MAGIC + _PREFIX.pack(FORMAT_VERSION, len(header_bytes), len(payload)) + header_bytes + payload
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: Model, path: Path, optimizer: AdamState | None = None) -> None:
    """原子写入：先写临时文件再 rename，中途失败不会留下半截 checkpoint"""
    data = encode_checkpoint(model, optimizer)
    atomic_write_bytes(Path(path), data)
    logger.info(f"checkpoint 已保存: {path} ({len(data)} 字节)")


# --- 读取 ---

def decode_checkpoint(data: bytes, source: str = "<bytes>") -> CheckpointContents:
    """
    依次校验：magic / 截断 -> 版本 -> 长度 -> 校验和 -> 头部结构
    """
    if data[:len(MAGIC)] != MAGIC:
        if len(data) < len(MAGIC) and MAGIC.startswith(data):
            raise CheckpointTruncatedError(f"{source}: 文件被截断")
        raise CheckpointFormatError(f"{source}: 不是 LFA-Net checkpoint (magic 不匹配)")

    prefix_end = len(MAGIC) + _PREFIX.size
    if len(data) < prefix_end:
        raise CheckpointTruncatedError(f"{source}: 文件被截断")
    version, header_len, payload_len = _PREFIX.unpack_from(data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{source}: 不支持的 checkpoint 版本 {version} (当前 {FORMAT_VERSION})")

    expected = prefix_end + header_len + payload_len + _DIGEST_SIZE
    if len(data) < expected:
        raise CheckpointTruncatedError(f"{source}: 文件被截断 ({len(data)} < {expected} 字节)")
    if len(data) > expected:
        raise CheckpointFormatError(f"{source}: 文件末尾有多余数据")

    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointChecksumError(f"{source}: 校验和不匹配，文件已损坏")

    try:
        header = CheckpointHeader.model_validate_json(data[prefix_end:prefix_end + header_len])
    except ValidationError as exc:
        raise CheckpointFormatError(f"{source}: 文件头无法解析: {exc}") from exc
    if header.payload_elements * _PAYLOAD_DTYPE.itemsize != payload_len:
        raise CheckpointFormatError(f"{source}: 张量表与 payload 长度不一致")

    payload = np.frombuffer(data, dtype=_PAYLOAD_DTYPE, count=payload_len // 4, offset=prefix_end + header_len)
    arrays: dict[tuple[TensorKind, str], np.ndarray] = {}
    for record in header.tensors:
        chunk = payload[record.offset:record.offset + record.count]
        if chunk.size != record.count:
            raise CheckpointFormatError(f"{source}: 张量 {record.name} 越界")
        # frombuffer 得到的是只读视图，拷贝成可写的本机字节序数组
        arrays[(record.kind, record.name)] = chunk.astype(np.float32).reshape(record.shape)
    return CheckpointContents(header=header, arrays=arrays)


def read_checkpoint(path: Path) -> CheckpointContents:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise LfaIOError(f"无法读取 checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data, str(path))


def _restore(model: Model, contents: CheckpointContents, source: str) -> Model:
    targets = {(TensorKind.param, n): t for n, t in model.named_parameters().items()}
    targets |= {(TensorKind.buffer, n): t for n, t in model.named_buffers().items()}
    stored = {key for key in contents.arrays if key[0] in (TensorKind.param, TensorKind.buffer)}
    if stored != set(targets):
        missing = sorted(n for _, n in set(targets) - stored)
        extra = sorted(n for _, n in stored - set(targets))
        raise CheckpointFormatError(f"{source}: 张量与模型结构不一致 (缺少 {missing}, 多出 {extra})")
    for key, tensor in targets.items():
        array = contents.arrays[key]
        if array.shape != tensor.shape:
            raise CheckpointFormatError(f"{source}: 张量 {key[1]} 形状 {array.shape} 与模型 {tensor.shape} 不一致")
        tensor.data = array.astype(tensor.dtype, copy=False)
    return model


def load_checkpoint(path: Path) -> Model:
    """按文件头里的 config / seed 重建模型，再用保存的参数与 BN 统计量覆盖"""
    contents = read_checkpoint(path)
    model = build_model(contents.header.config, contents.header.seed)
    _restore(model, contents, str(path))
    logger.info(f"checkpoint 已加载: {path}")
    return model


def load_optimizer_state(contents: CheckpointContents) -> AdamState | None:
    snapshot = contents.header.optimizer
    if snapshot is None:
        return None
    return AdamState(
        step=snapshot.step,
        learning_rate=snapshot.learning_rate,
        beta1=snapshot.beta1,
        beta2=snapshot.beta2,
        epsilon=snapshot.epsilon,
        m={name: a for (kind, name), a in contents.arrays.items() if kind is TensorKind.adam_m},
        v={name: a for (kind, name), a in contents.arrays.items() if kind is TensorKind.adam_v},
    )


def load_training_state(path: Path) -> tuple[Model, AdamState | None]:
    """恢复模型与 Adam 状态，用于继续训练"""
    contents = read_checkpoint(path)
    model = _restore(build_model(contents.header.config, contents.header.seed), contents, str(path))
    return model, load_optimizer_state(contents)
