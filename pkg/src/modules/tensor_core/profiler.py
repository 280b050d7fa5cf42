# src/modules/tensor_core/profiler.py

"""
FLOPs 记账：前向运算在执行时上报自己的浮点运算量，
当前激活的 FlopProfiler 按 layer_scope 名字汇总
约定：卷积 / 转置卷积 / dense 记 2·MAC，其余逐元素类运算按输出元素记 1
"""

from __future__ import annotations

import contextlib
from collections import defaultdict
from contextvars import ContextVar
from typing import Iterator

_active_profiler: ContextVar["FlopProfiler | None"] = ContextVar("active_profiler", default=None)
_scope: ContextVar[str] = ContextVar("layer_scope", default="")


class FlopProfiler:
    def __init__(self) -> None:
        self.by_scope: dict[str, int] = defaultdict(int)
        self.by_op: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def add(self, scope: str, op: str, flops: int) -> None:
        self.by_scope[scope] += flops
        self.by_op[op] += flops


@contextlib.contextmanager
def profile_flops() -> Iterator[FlopProfiler]:
    profiler = FlopProfiler()
    token = _active_profiler.set(profiler)
    try:
        yield profiler
    finally:
        _active_profiler.reset(token)


@contextlib.contextmanager
def layer_scope(name: str) -> Iterator[None]:
    """给一段前向计算打上层名；嵌套时使用最内层名字"""
    token = _scope.set(name)
    try:
        yield
    finally:
        _scope.reset(token)


def current_scope() -> str:
    return _scope.get()


def record_flops(op: str, flops: int) -> None:
    profiler = _active_profiler.get()
    if profiler is not None:
        profiler.add(_scope.get() or "<root>", op, int(flops))
