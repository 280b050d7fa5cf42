# src/modules/tensor_core/tensor.py

from __future__ import annotations

import contextlib
from contextvars import ContextVar
from typing import Callable, Iterator, Sequence

import numpy as np

from src.core.errors import ShapeError

# 模型计算统一使用 32 位浮点；64 位只在梯度校验中出现
DEFAULT_DTYPE = np.float32
FLOAT_DTYPES = (np.float32, np.float64)

# backward 闭包：输入输出梯度，返回每个 parent 的梯度 (不需要的位置返回 None)
BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """在该上下文内的运算不记录计算图 (推理 / 数值差分)"""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """
    四维稠密张量 (N, C, H, W)，行优先连续存储，带可选的梯度槽
    """
    __slots__ = ("data", "grad", "requires_grad", "op_name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op_name: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype.type not in FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"张量必须是 4 维 (N,C,H,W)，实际维度为 {arr.ndim}")
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op_name = op_name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # --- 构造运算结果 ---

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence[Tensor],
        backward: BackwardFn,
        op_name: str,
    ) -> Tensor:
        out = cls(data, op_name=op_name)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # --- 基本属性 ---

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() 只适用于单元素张量，当前形状 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data.copy(), op_name=self.op_name)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    # --- 反向传播 ---

    def backward(self, grad: np.ndarray | None = None) -> None:
        """
        从当前节点开始反向传播。只有叶子节点会保留 .grad
        grad 为空时要求当前张量是单元素 (标量损失)
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("非标量张量调用 backward() 时必须显式提供梯度")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad)
        if grad.shape != self.data.shape:
            raise ShapeError(f"种子梯度形状 {grad.shape} 与张量形状 {self.shape} 不一致")
        if not self.requires_grad:
            return

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.accumulate_grad(g)
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # --- 运算符 ---

    def __add__(self, other: Tensor) -> Tensor:
        from .service import elementwise
        return elementwise("add", self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        from .service import elementwise
        return elementwise("sub", self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        from .service import elementwise
        return elementwise("mul", self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op_name}{flag})"


def _topological_order(root: Tensor) -> list[Tensor]:
    """迭代式后序遍历，避免深层网络触发递归深度限制"""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order
