# src/modules/attention_blocks/service.py

"""
两种注意力模块：
- Region-Aware Attention (RAA)：多尺度 max/avg 池化统计量 -> 逐通道门控
- LiteFusion Attention：调制子网络 + token 混合器 + 通道混合器，全部带残差
"""

from __future__ import annotations

import numpy as np

from src.core.errors import ShapeError
from src.modules.nn_layers.schemas import ActivationKind, ConvParams, Mode, NormParams, Padding, PoolMode
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
)
from src.modules.tensor_core.service import elementwise, scale
from src.modules.tensor_core.tensor import Tensor

from .schemas import LiteFusionParams, RaaParams

# 两级池化共缩小 8 倍
RAA_MIN_EXTENT = 8


# --- 参数构造 ---

def init_raa(rng: np.random.Generator, width: int, *, epsilon: float = 1e-5, momentum: float = 0.9) -> RaaParams:
    return RaaParams(
        conv3=init_conv(rng, width, width, 3),
        bn=init_norm(width, running=True, epsilon=epsilon, momentum=momentum),
    )


def init_litefusion(
    rng: np.random.Generator,
    width: int,
    *,
    alpha: float = 0.25,
    gamma: float = 2.0,
    drop_rate: float = 0.5,
    mixer_ratio: int = 2,
    epsilon: float = 1e-5,
) -> LiteFusionParams:
    def pw() -> ConvParams:
        return init_conv(rng, width, width, 1)

    def c3() -> ConvParams:
        return init_conv(rng, width, width, 3)

    def ln() -> NormParams:
        return init_norm(width, epsilon=epsilon)

    # 字段顺序即随机数消耗顺序，改动会影响同一 seed 下的初始化结果
    return LiteFusionParams(
        entry_pw=pw(),
        entry_ln=ln(),
        entry_conv3=c3(),
        ctx_conv3=c3(),
        ctx_pw=pw(),
        att_pw=pw(),
        spatial_conv3=c3(),
        mod_pw=pw(),
        proj_a=pw(),
        proj_b=pw(),
        tok_ln=ln(),
        tok_dwc=init_conv(rng, width, width, 1, groups=width, padding=Padding.same),
        chan_ln=ln(),
        chan_dense1=init_dense(rng, width, mixer_ratio * width),
        chan_dense2=init_dense(rng, mixer_ratio * width, width),
        alpha=alpha,
        gamma=gamma,
        drop_rate=drop_rate,
    )


# --- Region-Aware Attention ---

def raa_forward(x: Tensor, p: RaaParams, mode: Mode | str) -> Tensor:
    """
    m      = ReLU(BN(conv3×3(I)))
    m1, m2 = 先 2×2 再 4×4 的 max / avg 池化
    S      = m1 ⊗ m2
    Att    = 空间均值(S) · 空间均值(m)，每个通道一个标量
    输出   = I ⊗ Att
    """
    _, c, h, w = x.shape
    if h < RAA_MIN_EXTENT or w < RAA_MIN_EXTENT:
        raise ShapeError(f"RAA 要求空间尺寸 >= {RAA_MIN_EXTENT}，实际为 {h}x{w}")
    if c != p.width:
        raise ShapeError(f"RAA 输入通道 {c} 与参数宽度 {p.width} 不一致")

    m = activation(ActivationKind.relu, batch_norm(conv2d(x, p.conv3), p.bn, mode))
    m1 = pool2d(pool2d(m, PoolMode.max, 2), PoolMode.max, 4)
    m2 = pool2d(pool2d(m, PoolMode.avg, 2), PoolMode.avg, 4)
    s = elementwise("mul", m1, m2)
    att = elementwise("mul", global_pool(s, PoolMode.avg), global_pool(m, PoolMode.avg))
    return elementwise("mul", x, att)


# --- LiteFusion Attention ---

def _focal_terms(l4: Tensor, p: LiteFusionParams) -> tuple[Tensor, Tensor]:
    """返回 (M_out, L5)；残差投影同时需要两者"""
    contrast = elementwise("sub", global_pool(l4, PoolMode.max), global_pool(l4, PoolMode.avg))
    m = scale(contrast, p.alpha)
    m_prime = activation(ActivationKind.sigmoid, conv2d(m, p.mod_pw))
    modulated = elementwise("mul", l4, m_prime)
    # 负值先截断到 0 再求 γ 次幂
    m_out = activation(ActivationKind.power, modulated, gamma=p.gamma)
    l5 = elementwise("mul", m_out, l4)
    return m_out, l5


def focal_modulation(l4: Tensor, p: LiteFusionParams) -> Tensor:
    """
    m = (GMP(L4) - GAP(L4))·α，m' = σ(pw(m))，M = L4 ⊗ m'，M_out = M^γ，返回 L5 = M_out ⊗ L4
    """
    _, l5 = _focal_terms(l4, p)
    return l5


def litefusion_forward(
    f_map: Tensor,
    p: LiteFusionParams,
    mode: Mode | str,
    rng: np.random.Generator | None = None,
) -> Tensor:
    if f_map.shape[1] != p.width:
        raise ShapeError(f"LiteFusion 输入通道 {f_map.shape[1]} 与块宽度 {p.width} 不一致")
    mode = Mode(mode)
    relu, sigmoid = ActivationKind.relu, ActivationKind.sigmoid

    # 调制子网络
    l1 = conv2d(layer_norm(conv2d(f_map, p.entry_pw), p.entry_ln), p.entry_conv3)
    context = activation(relu, conv2d(activation(relu, conv2d(l1, p.ctx_conv3)), p.ctx_pw))
    l2 = activation(sigmoid, conv2d(global_pool(context, PoolMode.avg), p.att_pw))
    l3 = conv2d(l1, p.spatial_conv3)
    l4 = elementwise("mul", l3, l2)
    m_out, l5 = _focal_terms(l4, p)
    l6 = elementwise("add", conv2d(l5, p.proj_a), conv2d(m_out, p.proj_b))

    # token 混合器 (残差为恒等映射)
    tok = conv2d(layer_norm(l6, p.tok_ln), p.tok_dwc)
    tok = dropout(activation(ActivationKind.gelu, tok), p.drop_rate, rng, mode)
    tok = elementwise("add", tok, l6)

    # 通道混合器
    hidden = activation(relu, dense(layer_norm(tok, p.chan_ln), p.chan_dense1))
    hidden = dropout(hidden, p.drop_rate, rng, mode)
    chan = dropout(dense(hidden, p.chan_dense2), p.drop_rate, rng, mode)
    return elementwise("add", chan, tok)
