# src/modules/tensor_core/gradcheck.py

"""
有限差分梯度校验

- 函数在 64 位浮点下求值 (输入先转成 float64，运算按 numpy 规则提升精度)
- 数值梯度使用中心差分 (f(x+ε) - f(x-ε)) / 2ε
- 对每个坐标再用 ε/2、ε/4 估计单侧曲率；光滑函数的单侧差随步长线性缩放，
  ReLU 拐点或最大值切换落在步长内时缩放关系被破坏，这类坐标不参与比较
"""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from src.core.config import settings
from src.core.errors import DomainError, EvaluationError, ShapeError

from .schemas import GradReport
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

ScalarFn = Callable[[Tensor], Tensor]

# 相对误差分母的下限：不低于本次检查最大梯度的 1%
REL_FLOOR = 1e-2
_F64_EPS = float(np.finfo(np.float64).eps)


def _evaluate(f: ScalarFn, values: np.ndarray) -> float:
    with no_grad():
        out = f(Tensor(values))
    if out.size != 1:
        raise ShapeError(f"梯度校验要求标量函数，实际输出形状 {out.shape}")
    value = float(out.data.reshape(-1)[0])
    if not np.isfinite(value):
        raise EvaluationError(f"函数值不是有限数: {value}")
    return value


def _choose_coords(size: int, sample: int | None, seed: int) -> np.ndarray:
    if sample is None:
        if size <= settings.GRADCHECK_SAMPLE_THRESHOLD:
            return np.arange(size)
        sample = settings.GRADCHECK_MIN_SAMPLES
    sample = min(sample, size)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(size, size=sample, replace=False))


def grad_check(
    f: ScalarFn,
    x: Tensor,
    epsilon: float | None = None,
    tolerance: float | None = None,
    *,
    op_name: str = "f",
    sample: int | None = None,
    seed: int = 0,
) -> GradReport:
    eps = settings.GRADCHECK_EPSILON if epsilon is None else float(epsilon)
    tol = settings.GRADCHECK_TOLERANCE if tolerance is None else float(tolerance)
    if eps <= 0:
        raise DomainError(f"epsilon 必须为正数，实际为 {eps}")

    base = x.data.astype(np.float64)

    # 1. 解析梯度
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ShapeError(f"梯度校验要求标量函数，实际输出形状 {out.shape}")
    f0 = float(out.data.reshape(-1)[0])
    if not np.isfinite(f0):
        raise EvaluationError(f"{op_name}: f(x) 不是有限数 ({f0})")
    out.backward()
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad.astype(np.float64)

    # 2. 数值梯度 + 光滑性判断
    coords = _choose_coords(base.size, sample, seed)
    work = base.copy()
    flat = work.reshape(-1)
    steps = (eps, eps / 2.0, eps / 4.0)
    numeric = np.empty(coords.size)
    deviation = np.empty(coords.size)
    for i, idx in enumerate(coords):
        original = flat[idx]
        asym = []
        central = 0.0
        for h in steps:
            flat[idx] = original + h
            f_plus = _evaluate(f, work)
            flat[idx] = original - h
            f_minus = _evaluate(f, work)
            if h == eps:
                central = (f_plus - f_minus) / (2.0 * eps)
            # 单侧差之差 = (f+ + f- - 2f0) / h，光滑时约等于 h·f''
            asym.append((f_plus + f_minus - 2.0 * f0) / h)
        flat[idx] = original
        numeric[i] = central
        deviation[i] = max(abs(asym[0] - 2.0 * asym[1]), abs(asym[0] - 4.0 * asym[2]))

    # 3. 误差统计
    ana = analytic.reshape(-1)[coords]
    scale = max(float(np.abs(numeric).max(initial=0.0)), float(np.abs(ana).max(initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(numeric)), REL_FLOOR * scale)
    roundoff = 64.0 * _F64_EPS * max(1.0, abs(f0)) / steps[-1]
    smooth = deviation <= 0.5 * tol * denom + roundoff
    checked = int(smooth.sum())
    if checked == 0:
        raise EvaluationError(f"{op_name}: 所有采样坐标都落在非光滑点附近，无法校验")

    abs_err = np.abs(ana - numeric)[smooth]
    rel_err = abs_err / denom[smooth]
    report = GradReport(
        op_name=op_name,
        max_abs_error=float(abs_err.max()),
        max_rel_error=float(rel_err.max()),
        checked_count=checked,
        skipped_count=int(coords.size - checked),
        tolerance=tol,
        passed=bool(rel_err.max() <= tol),
    )
    logger.debug(report.summary())
    return report
