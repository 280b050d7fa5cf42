# src/modules/evalx/service.py

"""
分割指标 (Dice / J / Acc / Sn / Sp) 与模型复杂度统计
"""

from __future__ import annotations

import logging
from collections import defaultdict
from typing import Sequence

import numpy as np

from src.core.errors import DomainError, ShapeError
from src.modules.lfa_model.schemas import Model
from src.modules.lfa_model.service import model_forward
from src.modules.nn_layers.schemas import Mode
from src.modules.tensor_core.profiler import profile_flops
from src.modules.tensor_core.tensor import Tensor, no_grad

from .schemas import ComplexityReport, ConfusionCounts, LayerCost, MetricsReport

logger = logging.getLogger(__name__)

BYTES_PER_PARAM = 4
METRIC_COLUMNS = (("Dice", "dice"), ("J", "jaccard"), ("Sn", "sensitivity"), ("Sp", "specificity"), ("Acc", "accuracy"))


# --- 指标 ---

def confusion_counts(pred: Tensor, gt: Tensor, threshold: float = 0.5) -> ConfusionCounts:
    """pred >= threshold 判为正类，与二值标注逐像素比较"""
    if pred.shape != gt.shape:
        raise ShapeError(f"预测 {pred.shape} 与标注 {gt.shape} 形状不一致")
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"阈值必须在 (0,1) 内，实际为 {threshold}")
    predicted = pred.data >= threshold
    actual = gt.data >= 0.5
    tp = int(np.count_nonzero(predicted & actual))
    fp = int(np.count_nonzero(predicted & ~actual))
    fn = int(np.count_nonzero(~predicted & actual))
    tn = int(predicted.size) - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num: int, den: int, vacuous: bool) -> float:
    """分母为 0 时：条件空成立 (既没有该类标注也没有该类预测) 返回 1，否则返回 0"""
    if den == 0:
        return 1.0 if vacuous else 0.0
    return num / den


def metrics(c: ConfusionCounts) -> MetricsReport:
    if c.total == 0:
        raise DomainError("混淆矩阵为空，无法计算指标")
    return MetricsReport(
        dice=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, vacuous=True),
        jaccard=_ratio(c.tp, c.tp + c.fp + c.fn, vacuous=True),
        accuracy=(c.tp + c.tn) / c.total,
        sensitivity=_ratio(c.tp, c.tp + c.fn, vacuous=c.fp == 0),
        specificity=_ratio(c.tn, c.tn + c.fp, vacuous=c.fn == 0),
    )


def format_metrics_table(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    """对齐的纯文本表格，百分比保留两位小数"""
    label_width = max([len("Image"), *(len(label) for label, _ in rows)])
    header = f"{'Image':<{label_width}}" + "".join(f"{title:>9}" for title, _ in METRIC_COLUMNS)
    lines = [header, "-" * len(header)]
    for label, report in rows:
        values = "".join(f"{getattr(report, field) * 100:>9.2f}" for _, field in METRIC_COLUMNS)
        lines.append(f"{label:<{label_width}}{values}")
    return "\n".join(lines)


def metrics_csv_row(label: str, report: MetricsReport) -> str:
    values = ",".join(f"{getattr(report, field):.6f}" for _, field in METRIC_COLUMNS)
    return f"{label},{values}"


# --- 复杂度 ---

def count_params(model: Model) -> int:
    """全部可学习元素个数，不含 BN 的 running 统计量"""
    return sum(t.size for t in model.named_parameters().values())


def _scope_of(layer_name: str) -> str:
    """参数层名 -> 前向记账用的 layer_scope 名"""
    if layer_name.startswith(("bottleneck.", "skip")):
        return layer_name
    return layer_name.split(".", 1)[0]


def estimate_flops(model: Model, input_shape: tuple[int, int, int, int] = (1, 3, 512, 512)) -> ComplexityReport:
    """
    在 infer 模式下实际跑一遍前向，按层汇总各运算上报的 FLOPs
    卷积类 2·MAC，其余按输出元素计 1
    """
    image = Tensor(np.zeros(input_shape, dtype=np.float32))
    with no_grad(), profile_flops() as profiler:
        model_forward(image, model, Mode.infer)

    params_by_scope: dict[str, int] = defaultdict(int)
    for layer, bundle in model.layers.items():
        params_by_scope[_scope_of(layer)] += sum(t.size for t in bundle.named_tensors().values())

    names = list(dict.fromkeys([*profiler.by_scope, *params_by_scope]))
    layers = [
        LayerCost(name=name, params=params_by_scope.get(name, 0), flops=profiler.by_scope.get(name, 0))
        for name in names
    ]
    param_count = count_params(model)
    report = ComplexityReport(
        param_count=param_count,
        flops=profiler.total,
        model_size_bytes=BYTES_PER_PARAM * param_count,
        input_shape=input_shape,
        layers=layers,
    )
    logger.debug(f"复杂度统计 {input_shape}: params={param_count} flops={report.flops}")
    return report


def format_complexity(report: ComplexityReport, per_layer: bool = False) -> str:
    n, c, h, w = report.input_shape
    lines = [
        f"Params (M): {report.params_m:.2f}",
        f"FLOPs (G):  {report.gflops:.2f}  @ {n}x{c}x{h}x{w}",
        f"Size (MB):  {report.size_mb:.2f}",
    ]
    if per_layer:
        width = max(len(row.name) for row in report.layers)
        lines.append("")
        lines.append(f"{'layer':<{width}} {'params':>10} {'flops':>16}")
        for row in report.layers:
            lines.append(f"{row.name:<{width}} {row.params:>10d} {row.flops:>16d}")
        lines.append(f"{'total':<{width}} {report.param_count:>10d} {report.flops:>16d}")
    return "\n".join(lines)
