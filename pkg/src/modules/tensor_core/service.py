# src/modules/tensor_core/service.py

from __future__ import annotations

from typing import Literal, Sequence

import numpy as np

from src.core.errors import ShapeError

from .profiler import record_flops
from .tensor import DEFAULT_DTYPE, Tensor

ElementwiseKind = Literal["add", "sub", "mul"]


def _check_shape(shape: Sequence[int]) -> tuple[int, int, int, int]:
    if len(shape) != 4:
        raise ShapeError(f"形状必须包含 4 个维度 (N,C,H,W)，实际为 {tuple(shape)}")
    dims = tuple(int(s) for s in shape)
    if any(d < 1 for d in dims):
        raise ShapeError(f"每个维度都必须 >= 1，实际为 {dims}")
    return dims  # type: ignore[return-value]


def tensor_new(shape: Sequence[int], fill: float | Sequence[float] = 0.0) -> Tensor:
    """按形状创建张量，fill 可以是标量或与元素个数一致的值列表"""
    dims = _check_shape(shape)
    count = int(np.prod(dims))
    if np.isscalar(fill):
        data = np.full(dims, fill, dtype=DEFAULT_DTYPE)
    else:
        values = np.asarray(fill, dtype=DEFAULT_DTYPE).reshape(-1)
        if values.size != count:
            raise ShapeError(f"值列表长度 {values.size} 与形状 {dims} 的元素个数 {count} 不一致")
        data = values.reshape(dims)
    return Tensor(data)


# --- 逐元素运算 ---

def _broadcast_kind(a: Tensor, b: Tensor) -> bool:
    """返回 b 是否按通道广播；形状不兼容时抛出 ShapeError"""
    if a.shape == b.shape:
        return False
    n, c, _, _ = a.shape
    bn, bc, bh, bw = b.shape
    if bc == c and bh == 1 and bw == 1 and bn in (1, n):
        return True
    raise ShapeError(f"逐元素运算形状不兼容: {a.shape} 与 {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度按 b 的形状求和回去"""
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def elementwise(kind: ElementwiseKind, a: Tensor, b: Tensor) -> Tensor:
    """
    逐元素加 / 减 / 乘。b 可以与 a 同形，也可以是 (N,C,1,1) 的逐通道向量
    """
    broadcast = _broadcast_kind(a, b)
    x, y = a.data, b.data
    if kind == "add":
        out = x + y
    elif kind == "sub":
        out = x - y
    elif kind == "mul":
        out = x * y
    else:
        raise ValueError(f"未知的逐元素运算: {kind}")
    record_flops(kind, out.size)

    def backward(g: np.ndarray):
        if kind == "add":
            ga, gb = g, g
        elif kind == "sub":
            ga, gb = g, -g
        else:
            ga, gb = g * y, g * x
        if broadcast:
            gb = _reduce_to(gb, b.shape)
        return ga, gb

    return Tensor.from_op(out, (a, b), backward, kind)


def scale(t: Tensor, factor: float) -> Tensor:
    out = t.data * factor
    record_flops("scale", out.size)
    return Tensor.from_op(out, (t,), lambda g: (g * factor,), "scale")


# --- 通道拼接 / 切分 ---

def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """沿通道维按参数顺序拼接 (⊕)"""
    if len(parts) < 2:
        raise ShapeError("通道拼接至少需要 2 个张量")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        pn, _, ph, pw = p.shape
        if (pn, ph, pw) != (n, h, w):
            raise ShapeError(f"通道拼接要求 N/H/W 一致: {parts[0].shape} 与 {p.shape}")
    sizes = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0, *sizes])

    def backward(g: np.ndarray):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor.from_op(out, tuple(parts), backward, "concat")


def split_channels(t: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """concat_channels 的逆运算"""
    if sum(sizes) != t.shape[1] or any(s < 1 for s in sizes):
        raise ShapeError(f"切分尺寸 {list(sizes)} 与通道数 {t.shape[1]} 不一致")
    pieces = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def backward(g: np.ndarray, lo=lo, hi=hi):
            full = np.zeros_like(t.data, dtype=g.dtype)
            full[:, lo:hi] = g
            return (full,)

        pieces.append(Tensor.from_op(t.data[:, lo:hi].copy(), (t,), backward, "split"))
        start = hi
    return pieces


# --- 归约 ---

def reduce_sum(t: Tensor) -> Tensor:
    """全部元素求和，结果形状 (1,1,1,1)；累加使用 64 位"""
    total = t.data.sum(dtype=np.float64).astype(t.dtype)
    out = np.full((1, 1, 1, 1), total, dtype=t.dtype)
    return Tensor.from_op(out, (t,), lambda g: (np.broadcast_to(g, t.shape),), "sum")


def reduce_mean(t: Tensor) -> Tensor:
    count = t.size
    mean = (t.data.sum(dtype=np.float64) / count).astype(t.dtype)
    out = np.full((1, 1, 1, 1), mean, dtype=t.dtype)
    return Tensor.from_op(out, (t,), lambda g: (np.broadcast_to(g / count, t.shape),), "mean")


def all_finite(t: Tensor) -> bool:
    return bool(np.isfinite(t.data).all())
