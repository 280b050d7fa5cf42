# src/modules/lfa_model/service.py

"""
LFA-Net 组装：三级多尺度编码器 -> LiteFusion / RAA 瓶颈 -> 三级解码器 -> 1×1 + sigmoid

解码器从最深层开始 (3 -> 2 -> 1)，第 k 级解码器消费第 k 级编码器池化前的特征作为跳跃连接
"""

from __future__ import annotations

import logging

import numpy as np

from src.core.errors import ConfigError, NumericalError, ShapeError
from src.modules.attention_blocks.schemas import CompositeParams
from src.modules.attention_blocks.service import (
    RAA_MIN_EXTENT,
    init_litefusion,
    init_raa,
    litefusion_forward,
    raa_forward,
)
from src.modules.nn_layers.schemas import ActivationKind, Mode, Padding, ParamBundle, PoolMode
from src.modules.nn_layers.service import (
    activation,
    batch_norm,
    conv2d,
    init_conv,
    init_norm,
    pool2d,
    transposed_conv2d,
)
from src.modules.tensor_core.profiler import layer_scope
from src.modules.tensor_core.service import all_finite, concat_channels
from src.modules.tensor_core.tensor import Tensor

from .schemas import STAGE_COUNT, Model, ModelConfig

logger = logging.getLogger(__name__)

# 三次 2×2 池化
SPATIAL_MULTIPLE = 2 ** STAGE_COUNT
# 瓶颈处于 H/8，RAA 在那里仍需 >= 8
MIN_INPUT_EXTENT = SPATIAL_MULTIPLE * RAA_MIN_EXTENT


def split_branch_widths(width: int) -> tuple[int, int, int]:
    """
    多尺度分支宽度 (1×1, 3×3, 空洞 3×3)：尽量均分，余数给 3×3 分支
    """
    side = width // 3
    return side, width - 2 * side, side


def bottleneck_channels(config: ModelConfig) -> int:
    w3 = config.stage_widths[-1]
    return 2 * w3 if (config.use_lf_bottleneck or config.use_raa_bottleneck) else w3


# --- 构建 ---

def _check_config(config: ModelConfig) -> None:
    if not config.use_skips and config.raa_on_skips:
        raise ConfigError(f"use_skips=false 时不能在跳跃连接上使用 RAA (raa_on_skips={list(config.raa_on_skips)})")
    if config.use_multiscale and min(config.stage_widths) < 3:
        raise ConfigError(f"多尺度编码器每级宽度至少为 3，实际为 {config.stage_widths}")


def build_model(config: ModelConfig, seed: int) -> Model:
    """
    按配置构建网络并初始化参数 (He-normal 卷积核，bias 为 0，归一化 scale=1 / shift=0)
    相同 (config, seed) 得到逐位一致的参数
    """
    _check_config(config)
    rng = np.random.default_rng(seed)
    eps, momentum = config.norm_epsilon, config.bn_momentum
    layers: dict[str, ParamBundle | CompositeParams] = {}

    c_in = config.in_channels
    for k, width in enumerate(config.stage_widths, start=1):
        if config.use_multiscale:
            w_1x1, w_3x3, w_dil = split_branch_widths(width)
            layers[f"enc{k}.conv1"] = init_conv(rng, c_in, w_1x1, 1)
            layers[f"enc{k}.conv3"] = init_conv(rng, c_in, w_3x3, 3)
            layers[f"enc{k}.dil3"] = init_conv(rng, c_in, w_dil, 3, dilation=config.dilation)
        else:
            layers[f"enc{k}.conv3"] = init_conv(rng, c_in, width, 3)
        layers[f"enc{k}.bn"] = init_norm(width, running=True, epsilon=eps, momentum=momentum)
        c_in = width

    w3 = config.stage_widths[-1]
    if config.use_lf_bottleneck:
        layers["bottleneck.lf"] = init_litefusion(
            rng,
            w3,
            alpha=config.alpha,
            gamma=config.gamma,
            drop_rate=config.drop_rate,
            mixer_ratio=config.mixer_ratio,
            epsilon=eps,
        )
    if config.use_raa_bottleneck:
        layers["bottleneck.raa"] = init_raa(rng, w3, epsilon=eps, momentum=momentum)

    for k in config.raa_on_skips:
        layers[f"skip{k}.raa"] = init_raa(rng, config.stage_widths[k - 1], epsilon=eps, momentum=momentum)

    below = bottleneck_channels(config)
    for k in range(STAGE_COUNT, 0, -1):
        width = config.stage_widths[k - 1]
        layers[f"dec{k}.up"] = init_conv(rng, below, width, 2, stride=2, padding=Padding.valid, transposed=True)
        fused = 2 * width if config.use_skips else width
        layers[f"dec{k}.conv3"] = init_conv(rng, fused, width, 3)
        below = width

    layers["head"] = init_conv(rng, config.stage_widths[0], 1, 1)

    model = Model(config=config, seed=seed, layers=layers)
    logger.debug(f"模型构建完成: {config.describe()} seed={seed} 参数张量 {len(model.named_parameters())} 个")
    return model


# --- 前向 ---

def _encoder_stage(x: Tensor, stage: int, model: Model, mode: Mode) -> tuple[Tensor, Tensor]:
    """返回 (C_k, 跳跃连接特征)"""
    cfg = model.config
    layers = model.layers
    if not 1 <= stage <= STAGE_COUNT:
        raise ShapeError(f"编码器级数必须在 1..{STAGE_COUNT}，实际为 {stage}")
    expected = cfg.in_channels if stage == 1 else cfg.stage_widths[stage - 2]
    if x.shape[1] != expected:
        raise ShapeError(f"第 {stage} 级编码器需要 {expected} 个输入通道，实际为 {x.shape[1]}")

    if cfg.use_multiscale:
        c_ms = concat_channels([
            conv2d(x, layers[f"enc{stage}.conv1"]),
            conv2d(x, layers[f"enc{stage}.conv3"]),
            conv2d(x, layers[f"enc{stage}.dil3"]),
        ])
    else:
        c_ms = conv2d(x, layers[f"enc{stage}.conv3"])
    normed = batch_norm(c_ms, layers[f"enc{stage}.bn"], mode)
    skip = activation(ActivationKind.leaky_relu, normed, slope=cfg.leaky_slope)
    # BN -> MaxPool -> LeakyReLU
    pooled = activation(ActivationKind.leaky_relu, pool2d(normed, PoolMode.max, 2), slope=cfg.leaky_slope)
    return pooled, skip


def encoder_block(x: Tensor, stage: int, model: Model, mode: Mode | str) -> Tensor:
    """C_ms = 1×1 ⊕ 3×3 ⊕ 空洞 3×3；C_k = LeakyReLU(MaxPool(BN(C_ms)))，空间尺寸减半"""
    pooled, _ = _encoder_stage(x, stage, model, Mode(mode))
    return pooled


def bottleneck(c3: Tensor, model: Model, mode: Mode | str, rng: np.random.Generator | None = None) -> Tensor:
    """
    两个开关都打开: R(F_lite(C3)) ⊕ C3
    只有 LF: F_lite(C3) ⊕ C3；只有 RAA: R(C3) ⊕ C3；都关闭: C3
    """
    cfg = model.config
    mode = Mode(mode)
    if not (cfg.use_lf_bottleneck or cfg.use_raa_bottleneck):
        return c3
    refined = c3
    if cfg.use_lf_bottleneck:
        with layer_scope("bottleneck.lf"):
            refined = litefusion_forward(refined, model.layers["bottleneck.lf"], mode, rng)
    if cfg.use_raa_bottleneck:
        with layer_scope("bottleneck.raa"):
            refined = raa_forward(refined, model.layers["bottleneck.raa"], mode)
    with layer_scope("bottleneck"):
        return concat_channels([refined, c3])


def decoder_stage(
    skip: Tensor | None,
    below: Tensor,
    stage: int,
    model: Model,
    mode: Mode | str,
) -> Tensor:
    """
    up    = ReLU(TransConv(below))
    fused = (RAA(skip) 或 skip) ⊕ up；不使用跳跃连接时 fused = up
    D_k   = ReLU(conv3×3(fused))
    """
    cfg = model.config
    mode = Mode(mode)
    with layer_scope(f"dec{stage}"):
        up = activation(ActivationKind.relu, transposed_conv2d(below, model.layers[f"dec{stage}.up"]))
    if cfg.use_skips:
        if skip is None:
            raise ShapeError(f"第 {stage} 级解码器缺少跳跃连接输入")
        if skip.shape[2:] != up.shape[2:]:
            raise ShapeError(f"跳跃连接尺寸 {skip.shape[2:]} 与上采样结果 {up.shape[2:]} 不一致")
        if stage in cfg.raa_on_skips:
            with layer_scope(f"skip{stage}.raa"):
                skip = raa_forward(skip, model.layers[f"skip{stage}.raa"], mode)
        with layer_scope(f"dec{stage}"):
            fused = concat_channels([skip, up])
    else:
        fused = up
    with layer_scope(f"dec{stage}"):
        return activation(ActivationKind.relu, conv2d(fused, model.layers[f"dec{stage}.conv3"]))


def model_forward(
    image: Tensor,
    model: Model,
    mode: Mode | str,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """输入 (N,3,H,W)，H/W 必须是 8 的倍数且不小于 64；输出 (N,1,H,W) 的血管概率"""
    cfg = model.config
    mode = Mode(mode)
    _, c, h, w = image.shape
    if c != cfg.in_channels:
        raise ShapeError(f"输入需要 {cfg.in_channels} 个通道，实际为 {c}")
    if h < MIN_INPUT_EXTENT or w < MIN_INPUT_EXTENT:
        raise ShapeError(f"输入尺寸 {h}x{w} 过小，至少需要 {MIN_INPUT_EXTENT}x{MIN_INPUT_EXTENT}")
    if h % SPATIAL_MULTIPLE or w % SPATIAL_MULTIPLE:
        raise ShapeError(f"输入尺寸 {h}x{w} 必须是 {SPATIAL_MULTIPLE} 的倍数")

    skips: list[Tensor] = []
    x = image
    for k in range(1, STAGE_COUNT + 1):
        with layer_scope(f"enc{k}"):
            x, skip = _encoder_stage(x, k, model, mode)
        skips.append(skip)

    below = bottleneck(x, model, mode, rng)
    for k in range(STAGE_COUNT, 0, -1):
        below = decoder_stage(skips[k - 1] if cfg.use_skips else None, below, k, model, mode)

    with layer_scope("head"):
        out = activation(ActivationKind.sigmoid, conv2d(below, model.layers["head"]))
    if not all_finite(out):
        raise NumericalError("前向输出包含 NaN/Inf")
    return out
