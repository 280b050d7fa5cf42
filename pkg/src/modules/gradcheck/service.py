# src/modules/gradcheck/service.py

"""
梯度校验套件：覆盖每个层运算、两个注意力块、Dice 损失，以及整网的参数抽样校验

每一项把被测运算包装成标量函数 f(x) = Σ R ⊙ op(x)，R 是固定种子的随机权重，
然后交给 grad_check。所有参数与输入都在 64 位下构造。
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from src.core.config import settings
from src.core.errors import ConfigError
from src.modules.attention_blocks.schemas import CompositeParams
from src.modules.attention_blocks.service import (
    focal_modulation,
    init_litefusion,
    init_raa,
    litefusion_forward,
    raa_forward,
)
from src.modules.lfa_model.schemas import Model, ModelConfig
from src.modules.lfa_model.service import build_model, model_forward
from src.modules.nn_layers.schemas import ActivationKind, Mode, Padding, ParamBundle, PoolMode
from src.modules.nn_layers.service import (
    activation,
    batch_norm,
    conv2d,
    dense,
    dropout,
    global_pool,
    init_conv,
    init_dense,
    init_norm,
    layer_norm,
    pool2d,
    transposed_conv2d,
)
from src.modules.tensor_core.gradcheck import ScalarFn, grad_check
from src.modules.tensor_core.schemas import GradReport
from src.modules.tensor_core.service import elementwise, reduce_sum
from src.modules.tensor_core.tensor import Tensor
from src.modules.training.schemas import DiceLossConfig
from src.modules.training.service import dice_loss_op

from .schemas import SuiteReport

logger = logging.getLogger(__name__)

DICE_TOLERANCE = 1e-4
MODEL_INPUT_SHAPE = (1, 3, 64, 64)
# 整网校验抽查的参数张量，每个张量抽 8 个坐标
MODEL_CHECKED_PARAMS = (
    "enc1.conv3.kernel",
    "skip1.raa.conv3.kernel",
    "bottleneck.lf.chan_dense1.weight",
    "head.kernel",
)
MODEL_SAMPLES_PER_PARAM = 8

CheckFn = Callable[[float | None], list[GradReport]]


@dataclass(frozen=True)
class GradCase:
    name: str
    run: CheckFn


# --- 构造工具 ---

def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _away_from_zero(rng: np.random.Generator, shape: tuple[int, ...], margin: float = 0.1) -> Tensor:
    """|x| >= margin 的随机输入，避开 ReLU / power 的拐点"""
    u = rng.standard_normal(shape)
    return Tensor(np.sign(u) * (margin + np.abs(u)))


def _normal(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _as_float64(params: ParamBundle | CompositeParams) -> ParamBundle | CompositeParams:
    if isinstance(params, CompositeParams):
        return params.model_copy(update={name: _as_float64(child) for name, child in params.children()})
    tensors = {**params.named_tensors(), **params.named_buffers()}
    return params.model_copy(update={key: Tensor(t.data.astype(np.float64)) for key, t in tensors.items()})


def _scalarize(op: Callable[[Tensor], Tensor], seed: int = 99) -> ScalarFn:
    """op 的输出与固定随机权重做内积，得到标量函数"""
    weights: dict[tuple[int, ...], Tensor] = {}

    def f(x: Tensor) -> Tensor:
        out = op(x)
        w = weights.get(out.shape)
        if w is None:
            w = weights[out.shape] = Tensor(_rng(seed).standard_normal(out.shape))
        return reduce_sum(elementwise("mul", out, w))

    return f


def _check(name: str, op: Callable[[Tensor], Tensor], x: Tensor, tolerance: float | None) -> list[GradReport]:
    return [grad_check(_scalarize(op), x, tolerance=tolerance, op_name=name)]


# --- 层运算 ---

def _conv_case(name: str, c_in: int, c_out: int, kernel: int, **kwargs) -> GradCase:
    def run(tol: float | None) -> list[GradReport]:
        rng = _rng(1)
        p = _as_float64(init_conv(rng, c_in, c_out, kernel, **kwargs))
        p = p.model_copy(update={"bias": Tensor(rng.standard_normal(p.bias.shape))})
        x = _normal(rng, (2, c_in, 7, 7))
        return _check(name, lambda t: conv2d(t, p), x, tol)

    return GradCase(name, run)


def _conv_kernel(tol: float | None) -> list[GradReport]:
    rng = _rng(2)
    p = _as_float64(init_conv(rng, 3, 4, 3, dilation=2))
    x = _normal(rng, (2, 3, 6, 6))
    return _check("conv2d.kernel", lambda k: conv2d(x, p.model_copy(update={"kernel": k})), p.kernel, tol)


def _transposed(tol: float | None) -> list[GradReport]:
    rng = _rng(3)
    p = _as_float64(init_conv(rng, 4, 3, 2, stride=2, padding=Padding.valid, transposed=True))
    x = _normal(rng, (2, 4, 4, 4))
    return [
        *_check("transposed_conv2d", lambda t: transposed_conv2d(t, p), x, tol),
        *_check(
            "transposed_conv2d.kernel",
            lambda k: transposed_conv2d(x, p.model_copy(update={"kernel": k})),
            p.kernel,
            tol,
        ),
    ]


def _dense(tol: float | None) -> list[GradReport]:
    rng = _rng(4)
    p = _as_float64(init_dense(rng, 5, 3))
    x = _normal(rng, (2, 5, 3, 3))
    return [
        *_check("dense", lambda t: dense(t, p), x, tol),
        *_check("dense.weight", lambda w: dense(x, p.model_copy(update={"weight": w})), p.weight, tol),
    ]


def _pool_case(mode: PoolMode) -> GradCase:
    def run(tol: float | None) -> list[GradReport]:
        x = _normal(_rng(5), (2, 3, 8, 8))
        return _check(f"pool.{mode.value}", lambda t: pool2d(t, mode, 2), x, tol)

    return GradCase(f"pool.{mode.value}", run)


def _global_pool_case(mode: PoolMode) -> GradCase:
    def run(tol: float | None) -> list[GradReport]:
        x = _normal(_rng(6), (2, 3, 5, 5))
        return _check(f"global_pool.{mode.value}", lambda t: global_pool(t, mode), x, tol)

    return GradCase(f"global_pool.{mode.value}", run)


def _norm_params(rng: np.random.Generator, channels: int, running: bool):
    p = _as_float64(init_norm(channels, running=running))
    update = {
        "scale": Tensor(1.0 + 0.5 * rng.standard_normal(p.scale.shape)),
        "shift": Tensor(rng.standard_normal(p.shift.shape)),
    }
    if running:
        update["running_mean"] = Tensor(0.2 * rng.standard_normal(p.scale.shape))
        update["running_var"] = Tensor(0.5 + rng.random(p.scale.shape))
    return p.model_copy(update=update)


def _batch_norm_case(mode: Mode) -> GradCase:
    name = f"batch_norm.{mode.value}"

    def run(tol: float | None) -> list[GradReport]:
        rng = _rng(7)
        p = _norm_params(rng, 3, running=True)
        x = _normal(rng, (2, 3, 4, 4))
        reports = _check(name, lambda t: batch_norm(t, p, mode), x, tol)
        reports += _check(
            f"{name}.scale",
            lambda s: batch_norm(x, p.model_copy(update={"scale": s}), mode),
            p.scale,
            tol,
        )
        return reports

    return GradCase(name, run)


def _layer_norm(tol: float | None) -> list[GradReport]:
    rng = _rng(8)
    p = _norm_params(rng, 4, running=False)
    x = _normal(rng, (2, 4, 3, 3))
    return [
        *_check("layer_norm", lambda t: layer_norm(t, p), x, tol),
        *_check("layer_norm.scale", lambda s: layer_norm(x, p.model_copy(update={"scale": s})), p.scale, tol),
    ]


def _activation_case(kind: ActivationKind) -> GradCase:
    name = f"activation.{kind.value}"

    def run(tol: float | None) -> list[GradReport]:
        rng = _rng(9)
        if kind == ActivationKind.power:
            x = Tensor(0.2 + rng.random((2, 3, 4, 4)))
        else:
            x = _away_from_zero(rng, (2, 3, 4, 4))
        return _check(name, lambda t: activation(kind, t, gamma=2.0), x, tol)

    return GradCase(name, run)


def _dropout(tol: float | None) -> list[GradReport]:
    x = _normal(_rng(10), (2, 3, 4, 4))
    # 每次求值都用同一个种子，保证掩码固定
    return _check("dropout.train", lambda t: dropout(t, 0.3, _rng(11), Mode.train), x, tol)


# --- 注意力块 ---

def _raa_case(mode: Mode) -> GradCase:
    name = "raa" if mode == Mode.infer else "raa.train"

    def run(tol: float | None) -> list[GradReport]:
        rng = _rng(12)
        p = _as_float64(init_raa(rng, 4))
        x = _normal(rng, (2, 4, 8, 8))
        return _check(name, lambda t: raa_forward(t, p, mode), x, tol)

    return GradCase(name, run)


def _litefusion(tol: float | None) -> list[GradReport]:
    rng = _rng(13)
    p = _as_float64(init_litefusion(rng, 4))
    x = _normal(rng, (1, 4, 6, 6))
    return _check("litefusion", lambda t: litefusion_forward(t, p, Mode.infer), x, tol)


def _focal(tol: float | None) -> list[GradReport]:
    rng = _rng(14)
    p = _as_float64(init_litefusion(rng, 4))
    x = _normal(rng, (1, 4, 5, 5))
    return _check("focal_modulation", lambda t: focal_modulation(t, p), x, tol)


# --- 损失与整网 ---

def _dice(tol: float | None) -> list[GradReport]:
    rng = _rng(15)
    s = Tensor(0.05 + 0.9 * rng.random((2, 1, 4, 4)))
    g = Tensor((rng.random((2, 1, 4, 4)) > 0.6).astype(np.float64))
    cfg = DiceLossConfig()
    return [grad_check(
        lambda t: dice_loss_op(t, g, cfg),
        s,
        tolerance=DICE_TOLERANCE if tol is None else tol,
        op_name="dice_loss",
    )]


def _locate(model: Model, name: str) -> tuple[object, str]:
    """参数全名 -> (所在参数包, 字段名)"""
    for layer, params in model.layers.items():
        if name.startswith(f"{layer}."):
            *path, field = name[len(layer) + 1:].split(".")
            owner = params
            for part in path:
                owner = getattr(owner, part)
            return owner, field
    raise KeyError(name)


def _model(tol: float | None) -> list[GradReport]:
    tolerance = settings.MODEL_GRADCHECK_TOLERANCE if tol is None else tol
    base = build_model(ModelConfig(), seed=0)
    model = base.model_copy(update={"layers": {n: _as_float64(p) for n, p in base.layers.items()}})
    rng = _rng(16)
    image = Tensor(rng.random(MODEL_INPUT_SHAPE))
    target = Tensor((rng.random((1, 1, *MODEL_INPUT_SHAPE[2:])) > 0.8).astype(np.float64))
    loss_cfg = DiceLossConfig()

    reports = []
    for param_name in MODEL_CHECKED_PARAMS:
        owner, field = _locate(model, param_name)
        original = getattr(owner, field)

        def f(t: Tensor, owner=owner, field=field, original=original) -> Tensor:
            setattr(owner, field, t)
            try:
                return dice_loss_op(model_forward(image, model, Mode.infer), target, loss_cfg)
            finally:
                setattr(owner, field, original)

        reports.append(grad_check(
            f,
            original,
            tolerance=tolerance,
            op_name=f"model[{param_name}]",
            sample=MODEL_SAMPLES_PER_PARAM,
        ))
    return reports


# --- 注册表 ---

def _registry() -> list[GradCase]:
    return [
        _conv_case("conv2d.same", 3, 4, 3),
        _conv_case("conv2d.valid", 3, 4, 3, padding=Padding.valid),
        _conv_case("conv2d.dilated", 3, 4, 3, dilation=2),
        _conv_case("conv2d.strided", 3, 4, 3, stride=2),
        _conv_case("conv2d.pointwise", 3, 4, 1),
        _conv_case("conv2d.depthwise", 4, 4, 3, groups=4),
        GradCase("conv2d.kernel", _conv_kernel),
        GradCase("transposed_conv2d", _transposed),
        GradCase("dense", _dense),
        _pool_case(PoolMode.max),
        _pool_case(PoolMode.avg),
        _global_pool_case(PoolMode.max),
        _global_pool_case(PoolMode.avg),
        _batch_norm_case(Mode.train),
        _batch_norm_case(Mode.infer),
        GradCase("layer_norm", _layer_norm),
        *(_activation_case(kind) for kind in ActivationKind),
        GradCase("dropout.train", _dropout),
        _raa_case(Mode.infer),
        _raa_case(Mode.train),
        GradCase("litefusion", _litefusion),
        GradCase("focal_modulation", _focal),
        GradCase("dice_loss", _dice),
        GradCase("model", _model),
    ]


def case_names() -> list[str]:
    return [case.name for case in _registry()]


def _matches(name: str, op_filter: str) -> bool:
    return name == op_filter or name.startswith(f"{op_filter}.")


def run_suite(op_filter: str | None = None, tolerance: float | None = None) -> SuiteReport:
    """
    op_filter 为空时运行全部；"conv2d" 匹配 conv2d.* 全部变体
    tolerance 给出时覆盖每一项的默认阈值
    """
    cases = _registry()
    if op_filter is not None:
        cases = [c for c in cases if _matches(c.name, op_filter)]
        if not cases:
            raise ConfigError(f"没有名为 {op_filter} 的梯度校验项，可选: {', '.join(case_names())}")

    started = time.perf_counter()
    reports: list[GradReport] = []
    for case in cases:
        case_reports = case.run(tolerance)
        for report in case_reports:
            log = logger.info if report.passed else logger.warning
            log(report.summary())
        reports.extend(case_reports)
    return SuiteReport(reports=reports, elapsed_seconds=time.perf_counter() - started)
