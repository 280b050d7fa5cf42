# src/modules/training/service.py

"""
加权 Dice 损失、Adam 优化器与训练循环
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from src.core.errors import DataError, DomainError, NonFiniteGradientError, NumericalError, ShapeError
from src.modules.data_io.checkpoint import save_checkpoint
from src.modules.data_io.schemas import AugmentConfig, Sample
from src.modules.data_io.service import atomic_write_text, augment
from src.modules.evalx.service import confusion_counts, metrics
from src.modules.lfa_model.schemas import Model
from src.modules.lfa_model.service import model_forward
from src.modules.nn_layers.schemas import Mode
from src.modules.tensor_core.tensor import Tensor, no_grad

from .schemas import AdamState, DiceLossConfig, EpochStats, TrainRunConfig

logger = logging.getLogger(__name__)

TRAIN_LOG_NAME = "train_log.csv"
FINAL_CHECKPOINT_NAME = "final.lfan"


# --- 损失 ---

def _class_ratio(p: np.ndarray, t: np.ndarray, smoothing: float) -> tuple[float, np.ndarray]:
    """2ΣPT / (ΣP² + ΣT² + ξ) 及其对 P 的梯度"""
    num = 2.0 * float(np.sum(p * t))
    den = float(np.sum(p * p)) + float(np.sum(t * t)) + smoothing
    grad = (2.0 * t * den - num * 2.0 * p) / (den * den)
    return num / den, grad


def weighted_dice_loss(s: Tensor, g: Tensor, cfg: DiceLossConfig) -> tuple[float, np.ndarray]:
    """
    两类形式的加权 Dice 损失：血管类用 (S, G)，背景类用 (1-S, 1-G)
    loss = 1 - Σ_k w_k · 2ΣS_kG_k / (ΣS_k² + ΣG_k² + ξ)
    返回 (loss, ∂loss/∂S)，全部在 64 位下计算
    """
    if s.shape != g.shape:
        raise ShapeError(f"预测 {s.shape} 与标注 {g.shape} 形状不一致")
    if s.shape[1] != 1:
        raise ShapeError(f"Dice 损失只接受单通道概率图，实际通道数 {s.shape[1]}")
    prob = s.data.astype(np.float64)
    target = g.data.astype(np.float64)
    if not ((prob > 0) & (prob < 1)).all():
        raise DomainError("预测概率必须严格落在 (0,1) 内")
    if not np.isin(target, (0.0, 1.0)).all():
        raise DomainError("标注必须是 0/1 二值图")

    w_vessel, w_background = cfg.class_weights
    r_vessel, d_vessel = _class_ratio(prob, target, cfg.smoothing)
    r_background, d_background = _class_ratio(1.0 - prob, 1.0 - target, cfg.smoothing)
    loss = 1.0 - (w_vessel * r_vessel + w_background * r_background)
    grad = -(w_vessel * d_vessel - w_background * d_background)
    return loss, grad


def dice_loss_op(s: Tensor, g: Tensor, cfg: DiceLossConfig) -> Tensor:
    """weighted_dice_loss 的计算图版本，输出 (1,1,1,1)"""
    loss, grad = weighted_dice_loss(s, g, cfg)
    out = np.full((1, 1, 1, 1), loss, dtype=s.dtype)
    return Tensor.from_op(out, (s,), lambda up: ((grad * up.reshape(-1)[0]).astype(s.dtype),), "dice_loss")


# --- 优化器 ---

def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """按全局 L2 范数等比缩放梯度，返回缩放前的范数"""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * factor
    return total


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState) -> AdamState:
    """
    带偏差修正的 Adam，原地更新参数与 state
    全部梯度恰好为 0 时整步跳过 (step 不递增)；否则对所有坐标做标准稠密更新
    任何梯度含 NaN/Inf 时拒绝整步更新
    """
    for name, grad in grads.items():
        if grad is not None and not np.isfinite(grad).all():
            raise NonFiniteGradientError(f"参数 {name} 的梯度包含 NaN/Inf，本次更新被拒绝")

    if not any(grad is not None and np.any(grad) for grad in grads.values()):
        logger.debug("全部梯度为 0，跳过本次 Adam 更新")
        return state

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        grad = np.asarray(grad, dtype=param.dtype).reshape(param.shape)
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return state


# --- 训练循环 ---

def _stack(samples: Sequence[Sample]) -> tuple[Tensor, Tensor]:
    images = np.concatenate([s.image.data for s in samples], axis=0)
    masks = np.concatenate([s.mask.data for s in samples], axis=0)
    return Tensor(images), Tensor(masks)


def _batch_dice(probs: Tensor, masks: Tensor, threshold: float) -> float:
    return metrics(confusion_counts(probs, masks, threshold)).dice


def train_epoch(
    model: Model,
    samples: Sequence[Sample],
    run_cfg: TrainRunConfig,
    loss_cfg: DiceLossConfig,
    optimizer: AdamState,
    rng: np.random.Generator,
    *,
    epoch: int = 0,
    augment_cfg: AugmentConfig | None = None,
    threshold: float = 0.5,
) -> EpochStats:
    """
    一个 epoch：按种子打乱 -> 逐批前向 / 损失 / 反向 / Adam
    BN 使用 train 模式，dropout 生效；返回平均损失与平均训练 Dice
    """
    if not samples:
        raise DataError("训练集为空")
    params = model.named_parameters()
    order = rng.permutation(len(samples))
    loss_sum = 0.0
    dice_sum = 0.0

    for start in range(0, len(order), run_cfg.batch_size):
        batch = [samples[i] for i in order[start:start + run_cfg.batch_size]]
        if run_cfg.augment:
            batch = [augment(s, rng, augment_cfg) for s in batch]
        images, masks = _stack(batch)

        model.zero_grad()
        probs = model_forward(images, model, Mode.train, rng)
        loss = dice_loss_op(probs, masks, loss_cfg)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise NumericalError(f"epoch {epoch} 损失不是有限数: {loss_value}")
        loss.backward()

        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        if run_cfg.clip_norm is not None:
            norm = clip_grad_norm(grads, run_cfg.clip_norm)
            logger.debug(f"梯度范数 {norm:.4f} (上限 {run_cfg.clip_norm})")
        adam_step(params, grads, optimizer)

        loss_sum += loss_value * len(batch)
        dice_sum += _batch_dice(probs, masks, threshold) * len(batch)

    count = len(samples)
    return EpochStats(epoch=epoch, mean_loss=loss_sum / count, train_dice=dice_sum / count)


def evaluate_dice(model: Model, samples: Sequence[Sample], batch_size: int = 8, threshold: float = 0.5) -> float:
    """infer 模式下对全部样本汇总混淆矩阵后计算 Dice"""
    if not samples:
        raise DataError("评估样本为空")
    total = None
    with no_grad():
        for start in range(0, len(samples), batch_size):
            images, masks = _stack(samples[start:start + batch_size])
            counts = confusion_counts(model_forward(images, model, Mode.infer), masks, threshold)
            total = counts if total is None else total + counts
    return metrics(total).dice


def fit(
    model: Model,
    train: Sequence[Sample],
    val: Sequence[Sample],
    run_cfg: TrainRunConfig,
    loss_cfg: DiceLossConfig,
    out_dir: Path,
    *,
    optimizer: AdamState | None = None,
    augment_cfg: AugmentConfig | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> list[EpochStats]:
    """
    多 epoch 训练：每个 epoch 结束后原子地重写日志文件，按 checkpoint_every 保存 checkpoint，
    结束时保存 final.lfan
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = optimizer or AdamState(learning_rate=run_cfg.learning_rate)
    rng = np.random.default_rng(run_cfg.seed)
    history: list[EpochStats] = []

    for epoch in range(run_cfg.epochs):
        stats = train_epoch(
            model, train, run_cfg, loss_cfg, optimizer, rng,
            epoch=epoch, augment_cfg=augment_cfg,
        )
        if val:
            stats.val_dice = evaluate_dice(model, val, run_cfg.batch_size)
        history.append(stats)
        atomic_write_text(out_dir / TRAIN_LOG_NAME, "".join(f"{s.log_line()}\n" for s in history))
        logger.info(f"epoch {epoch}: loss={stats.mean_loss:.4f} train_dice={stats.train_dice:.4f} val_dice={stats.val_dice}")
        if on_epoch is not None:
            on_epoch(stats)
        if run_cfg.checkpoint_every and (epoch + 1) % run_cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"epoch_{epoch + 1:04d}.lfan", optimizer)

    save_checkpoint(model, out_dir / FINAL_CHECKPOINT_NAME, optimizer)
    return history
