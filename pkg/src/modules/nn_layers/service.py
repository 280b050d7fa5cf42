# src/modules/nn_layers/service.py

"""
基础层：卷积 / 转置卷积 / 池化 / 归一化 / dense / 激活 / dropout

- 卷积一律是互相关 (不翻转卷积核)，通过 im2col + 矩阵乘实现
- dense 与 1×1 卷积共用同一个卷积内核，二者结果逐位一致
- 每个函数都向 FLOPs 记账器上报运算量 (卷积类 2·MAC，其余按输出元素计 1)
"""

from __future__ import annotations

import logging
import math
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from src.core.errors import ConfigError, DomainError, ShapeError
from src.modules.tensor_core.profiler import record_flops
from src.modules.tensor_core.tensor import DEFAULT_DTYPE, Tensor

from .schemas import ActivationKind, ConvParams, DenseParams, Mode, NormParams, Padding, PoolMode

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
# sigmoid 输出限制在 [SIGMOID_CLIP, 1 - SIGMOID_CLIP]，保证概率严格落在 (0,1) 内
SIGMOID_CLIP = 1e-7
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

Pads = tuple[tuple[int, int], tuple[int, int]]

# power 激活把负输入截断到 0 的次数
_clamp_lock = threading.Lock()
_clamp_counts: dict[str, int] = {"power": 0}


def clamp_diagnostics() -> dict[str, int]:
    with _clamp_lock:
        return dict(_clamp_counts)


def reset_clamp_diagnostics() -> None:
    with _clamp_lock:
        for key in _clamp_counts:
            _clamp_counts[key] = 0


# --- 参数初始化 ---

def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True)


def he_normal(rng: np.random.Generator, shape: tuple[int, int, int, int], fan_in: float) -> Tensor:
    std = math.sqrt(2.0 / fan_in)
    return parameter(rng.standard_normal(shape) * std)


def init_conv(
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    kernel: int,
    *,
    stride: int = 1,
    dilation: int = 1,
    groups: int = 1,
    padding: Padding = Padding.same,
    transposed: bool = False,
) -> ConvParams:
    """He-normal 卷积核 + 全零 bias"""
    if transposed:
        shape = (c_in, c_out, kernel, kernel)
        # 每个输出像素平均只接收 kernel²/stride² 个输入位置
        fan_in = c_in * kernel * kernel / (stride * stride)
    else:
        if c_in % groups or c_out % groups:
            raise ConfigError(f"通道数 {c_in}->{c_out} 不能被 groups={groups} 整除")
        shape = (c_out, c_in // groups, kernel, kernel)
        fan_in = (c_in // groups) * kernel * kernel
    return ConvParams(
        kernel=he_normal(rng, shape, fan_in),
        bias=parameter(np.zeros((1, c_out, 1, 1))),
        stride=stride,
        dilation=dilation,
        groups=groups,
        padding=padding,
        transposed=transposed,
    )


def init_norm(channels: int, *, running: bool = False, epsilon: float = 1e-5, momentum: float = 0.9) -> NormParams:
    """scale 全 1、shift 全 0；running=True 时附带 BatchNorm 的滑动统计量 (0, 1)"""
    shape = (1, channels, 1, 1)
    return NormParams(
        scale=parameter(np.ones(shape)),
        shift=parameter(np.zeros(shape)),
        running_mean=Tensor(np.zeros(shape, dtype=DEFAULT_DTYPE)) if running else None,
        running_var=Tensor(np.ones(shape, dtype=DEFAULT_DTYPE)) if running else None,
        epsilon=epsilon,
        momentum=momentum,
    )


def init_dense(rng: np.random.Generator, features_in: int, features_out: int) -> DenseParams:
    return DenseParams(
        weight=he_normal(rng, (features_out, features_in, 1, 1), features_in),
        bias=parameter(np.zeros((1, features_out, 1, 1))),
    )


# --- 卷积内核 ---

def _same_pads(size: int, kernel: int, stride: int, dilation: int) -> tuple[int, int]:
    """输出尺寸 ceil(size/stride)；需要奇数个填充时多出的一格放在下 / 右侧"""
    span = dilation * (kernel - 1) + 1
    out = -(-size // stride)
    total = max((out - 1) * stride + span - size, 0)
    return total // 2, total - total // 2


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, out_h: int, out_w: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N,C,out_h,out_w,kh,kw) 的只读视图，不复制数据"""
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    view = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    return view[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :out_h, :out_w]


def _col2im(cols: np.ndarray, shape: tuple[int, ...], stride: int, dilation: int) -> np.ndarray:
    """_windows 的伴随运算：把窗口值累加回 (N,C,H,W)"""
    _, _, oh, ow, kh, kw = cols.shape
    out = np.zeros(shape, dtype=cols.dtype)
    h_span = stride * (oh - 1) + 1
    w_span = stride * (ow - 1) + 1
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            out[:, :, hi:hi + h_span:stride, wj:wj + w_span:stride] += cols[:, :, :, :, i, j]
    return out


def _conv_node(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor,
    stride: int,
    dilation: int,
    groups: int,
    pads: Pads,
    op_name: str,
) -> Tensor:
    n, _, h, w = x.shape
    c_out, cg, kh, kw = kernel.shape
    og = c_out // groups
    (pt, pb), (pl, pr) = pads
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    hp, wp = xp.shape[2:]
    oh = (hp - dilation * (kh - 1) - 1) // stride + 1
    ow = (wp - dilation * (kw - 1) - 1) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"{op_name}: 输入 {x.shape} 小于卷积核覆盖范围")

    win = _windows(xp, kh, kw, stride, dilation, oh, ow)
    cols = (
        win.reshape(n, groups, cg, oh, ow, kh, kw)
        .transpose(0, 1, 3, 4, 2, 5, 6)
        .reshape(n, groups, oh * ow, cg * kh * kw)
    )
    k2 = kernel.data.reshape(groups, og, cg * kh * kw)
    out = np.matmul(cols, k2.transpose(0, 2, 1))
    out = out.transpose(0, 1, 3, 2).reshape(n, c_out, oh, ow) + bias.data

    def backward(g: np.ndarray):
        g2 = g.reshape(n, groups, og, oh * ow)
        dk = np.matmul(g2, cols).sum(axis=0).reshape(kernel.shape)
        dcols = np.matmul(g2.transpose(0, 1, 3, 2), k2)
        dcols = (
            dcols.reshape(n, groups, oh, ow, cg, kh, kw)
            .transpose(0, 1, 4, 2, 3, 5, 6)
            .reshape(n, groups * cg, oh, ow, kh, kw)
        )
        dxp = _col2im(dcols, xp.shape, stride, dilation)
        dx = dxp[:, :, pt:pt + h, pl:pl + w]
        return dx, dk, g.sum(axis=(0, 2, 3), keepdims=True)

    return Tensor.from_op(out, (x, kernel, bias), backward, op_name)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    if p.transposed:
        raise ConfigError("转置卷积参数请使用 transposed_conv2d")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"conv2d 输入通道 {x.shape[1]} 与卷积核要求的 {p.in_channels} 不一致")
    kh, kw = p.kernel_size
    if p.padding == Padding.same:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"same 填充不支持偶数卷积核 {kh}x{kw}")
        pads = (
            _same_pads(x.shape[2], kh, p.stride, p.dilation),
            _same_pads(x.shape[3], kw, p.stride, p.dilation),
        )
    else:
        pads = ((0, 0), (0, 0))
    out = _conv_node(x, p.kernel, p.bias, p.stride, p.dilation, p.groups, pads, "conv2d")
    record_flops("conv2d", 2 * out.size * (p.in_channels // p.groups) * kh * kw)
    return out


def transposed_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """
    转置卷积，等价于同步长普通卷积 (valid 填充) 的伴随运算
    输出尺寸 (H-1)·stride + dilation·(k-1) + 1；k=2、stride=2 时恰好放大一倍
    padding 字段对转置卷积不起作用
    """
    if not p.transposed:
        raise ConfigError("transposed_conv2d 需要 transposed=True 的参数")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"转置卷积输入通道 {x.shape[1]} 与卷积核要求的 {p.in_channels} 不一致")
    n, c_in, h, w = x.shape
    _, c_out, kh, kw = p.kernel.shape
    s, d = p.stride, p.dilation
    oh = (h - 1) * s + d * (kh - 1) + 1
    ow = (w - 1) * s + d * (kw - 1) + 1

    kernel, bias = p.kernel, p.bias
    x2 = x.data.transpose(0, 2, 3, 1).reshape(n, h * w, c_in)
    k2 = kernel.data.reshape(c_in, c_out * kh * kw)
    cols = np.matmul(x2, k2).reshape(n, h, w, c_out, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    out = _col2im(cols, (n, c_out, oh, ow), s, d) + bias.data
    record_flops("transposed_conv2d", 2 * n * h * w * c_in * c_out * kh * kw)

    def backward(g: np.ndarray):
        win = _windows(g, kh, kw, s, d, h, w)
        dcols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c_out * kh * kw)
        dx = np.matmul(dcols, k2.T).reshape(n, h, w, c_in).transpose(0, 3, 1, 2)
        dk = np.matmul(x2.transpose(0, 2, 1), dcols).sum(axis=0).reshape(kernel.shape)
        return dx, dk, g.sum(axis=(0, 2, 3), keepdims=True)

    return Tensor.from_op(out, (x, kernel, bias), backward, "transposed_conv2d")


def dense(x: Tensor, p: DenseParams) -> Tensor:
    """逐空间位置的全连接，和 1×1 卷积走同一个内核"""
    if x.shape[1] != p.features_in:
        raise ShapeError(f"dense 输入特征数 {x.shape[1]} 与权重要求的 {p.features_in} 不一致")
    out = _conv_node(x, p.weight, p.bias, 1, 1, 1, ((0, 0), (0, 0)), "dense")
    record_flops("dense", 2 * out.size * p.features_in)
    return out


# --- 池化 ---

def pool2d(x: Tensor, mode: PoolMode | str, window: int = 2, stride: int | None = None) -> Tensor:
    """
    窗口池化，尺寸不能整除时向下取整
    max 的反向只把梯度送到窗口内第一个最大值位置
    """
    mode = PoolMode(mode)
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ConfigError(f"池化窗口与步长必须 >= 1 (window={window}, stride={stride})")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"池化窗口 {window} 大于特征图尺寸 {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    flat = _windows(x.data, window, window, stride, 1, oh, ow).reshape(n, c, oh, ow, window * window)
    k2 = window * window

    if mode == PoolMode.max:
        idx = flat.argmax(axis=-1)[..., None]
        out = np.take_along_axis(flat, idx, axis=-1)[..., 0]

        def backward(g: np.ndarray):
            routed = np.zeros(flat.shape, dtype=g.dtype)
            np.put_along_axis(routed, idx, g[..., None], axis=-1)
            return (_col2im(routed.reshape(n, c, oh, ow, window, window), x.shape, stride, 1),)
    else:
        out = flat.mean(axis=-1)

        def backward(g: np.ndarray):
            share = np.broadcast_to((g / k2)[..., None, None], (n, c, oh, ow, window, window))
            return (_col2im(share, x.shape, stride, 1),)

    record_flops(f"{mode.value}_pool", out.size)
    return Tensor.from_op(out, (x,), backward, f"{mode.value}_pool")


def global_pool(x: Tensor, mode: PoolMode | str) -> Tensor:
    """逐通道对全部空间位置做 max / avg，输出 (N,C,1,1)"""
    mode = PoolMode(mode)
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    if mode == PoolMode.max:
        idx = flat.argmax(axis=-1)[..., None]
        out = np.take_along_axis(flat, idx, axis=-1)

        def backward(g: np.ndarray):
            routed = np.zeros(flat.shape, dtype=g.dtype)
            np.put_along_axis(routed, idx, g.reshape(n, c, 1), axis=-1)
            return (routed.reshape(x.shape),)
    else:
        out = flat.mean(axis=-1, keepdims=True)

        def backward(g: np.ndarray):
            return (np.broadcast_to(g / (h * w), x.shape),)

    record_flops(f"global_{mode.value}_pool", n * c)
    return Tensor.from_op(out.reshape(n, c, 1, 1), (x,), backward, f"global_{mode.value}_pool")


# --- 归一化 ---

def _check_norm_channels(x: Tensor, p: NormParams, op_name: str) -> None:
    if p.scale.shape != (1, x.shape[1], 1, 1):
        raise ShapeError(f"{op_name}: 输入通道 {x.shape[1]} 与归一化参数的 {p.channels} 不一致")


def batch_norm(x: Tensor, p: NormParams, mode: Mode | str) -> Tensor:
    """
    逐通道在 (N,H,W) 上归一化
    train: 使用批统计量 (有偏方差)，并更新 running = momentum·running + (1-momentum)·batch
    infer: 使用 running 统计量
    """
    mode = Mode(mode)
    _check_norm_channels(x, p, "batch_norm")
    if p.running_mean is None or p.running_var is None:
        raise ConfigError("batch_norm 需要 running_mean / running_var")
    axes = (0, 2, 3)
    data = x.data
    scale, shift = p.scale.data, p.shift.data

    if mode == Mode.train:
        count = data.shape[0] * data.shape[2] * data.shape[3]
        if count < 2:
            raise ShapeError(f"train 模式的 batch_norm 需要 N·H·W >= 2，实际为 {count}")
        mean = data.mean(axis=axes, keepdims=True)
        var = data.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + p.epsilon)
        x_hat = (data - mean) * inv_std

        m = p.momentum
        p.running_mean.data[...] = m * p.running_mean.data + (1.0 - m) * mean
        p.running_var.data[...] = m * p.running_var.data + (1.0 - m) * var

        def backward(g: np.ndarray):
            d_hat = g * scale
            dx = inv_std / count * (
                count * d_hat
                - d_hat.sum(axis=axes, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True)
            )
            return dx, (g * x_hat).sum(axis=axes, keepdims=True), g.sum(axis=axes, keepdims=True)
    else:
        inv_std = 1.0 / np.sqrt(p.running_var.data + p.epsilon)
        x_hat = (data - p.running_mean.data) * inv_std

        def backward(g: np.ndarray):
            return g * scale * inv_std, (g * x_hat).sum(axis=axes, keepdims=True), g.sum(axis=axes, keepdims=True)

    out = x_hat * scale + shift
    record_flops("batch_norm", out.size)
    return Tensor.from_op(out, (x, p.scale, p.shift), backward, "batch_norm")


def layer_norm(x: Tensor, p: NormParams) -> Tensor:
    """在通道维上归一化：每个 (n,h,w) 位置单独计算均值 / 方差"""
    _check_norm_channels(x, p, "layer_norm")
    data = x.data
    channels = data.shape[1]
    scale, shift = p.scale.data, p.shift.data
    mean = data.mean(axis=1, keepdims=True)
    var = data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    x_hat = (data - mean) * inv_std
    out = x_hat * scale + shift
    record_flops("layer_norm", out.size)

    def backward(g: np.ndarray):
        d_hat = g * scale
        dx = inv_std / channels * (
            channels * d_hat
            - d_hat.sum(axis=1, keepdims=True)
            - x_hat * (d_hat * x_hat).sum(axis=1, keepdims=True)
        )
        return dx, (g * x_hat).sum(axis=(0, 2, 3), keepdims=True), g.sum(axis=(0, 2, 3), keepdims=True)

    return Tensor.from_op(out, (x, p.scale, p.shift), backward, "layer_norm")


# --- 激活 ---

def activation(
    kind: ActivationKind | str,
    x: Tensor,
    *,
    slope: float = LEAKY_SLOPE,
    gamma: float = 2.0,
) -> Tensor:
    """
    逐元素激活
    - gelu 使用基于 erf 的精确形式
    - power(γ) 先把负输入截断到 0 再求幂，截断次数计入 clamp_diagnostics()
    """
    kind = ActivationKind(kind)
    data = x.data

    if kind == ActivationKind.relu:
        positive = data > 0
        out = np.where(positive, data, 0)

        def backward(g: np.ndarray):
            return (g * positive,)

    elif kind == ActivationKind.leaky_relu:
        positive = data > 0
        out = np.where(positive, data, data * slope)

        def backward(g: np.ndarray):
            return (np.where(positive, g, g * slope),)

    elif kind == ActivationKind.gelu:
        cdf = 0.5 * (1.0 + erf(data / _SQRT2))
        out = data * cdf

        def backward(g: np.ndarray):
            pdf = np.exp(-0.5 * data * data) * _INV_SQRT_2PI
            return (g * (cdf + data * pdf),)

    elif kind == ActivationKind.sigmoid:
        raw = expit(data)
        out = np.clip(raw, SIGMOID_CLIP, 1.0 - SIGMOID_CLIP)
        # 被截断的位置输出为常数，梯度为 0
        saturated = out != raw

        def backward(g: np.ndarray):
            return (np.where(saturated, 0.0, g * out * (1.0 - out)).astype(out.dtype, copy=False),)

    else:
        if gamma < 1:
            raise DomainError(f"power 激活要求 γ >= 1，实际为 {gamma}")
        negative = data < 0
        clamped = int(negative.sum())
        if clamped:
            with _clamp_lock:
                _clamp_counts["power"] += clamped
            logger.debug(f"power 激活截断了 {clamped} 个负输入")
        base = np.where(negative, 0, data)
        out = base ** gamma

        def backward(g: np.ndarray):
            return (np.where(negative, 0, g * gamma * base ** (gamma - 1)),)

    record_flops(kind.value, out.size)
    return Tensor.from_op(out, (x,), backward, kind.value)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, mode: Mode | str) -> Tensor:
    """inverted dropout：训练时保留的元素放大 1/(1-rate)，推理时原样返回"""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout 概率必须在 [0,1) 内，实际为 {rate}")
    if Mode(mode) == Mode.infer or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("train 模式的 dropout 需要随机数发生器")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = x.data * mask
    record_flops("dropout", out.size)
    return Tensor.from_op(out, (x,), lambda g: (g * mask,), "dropout")
