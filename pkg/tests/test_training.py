# tests/test_training.py

import numpy as np
import pytest
from pydantic import ValidationError

from src.core.errors import DataError, DomainError, NonFiniteGradientError, ShapeError
from src.modules.data_io.checkpoint import load_checkpoint
from src.modules.data_io.schemas import Sample
from src.modules.lfa_model.schemas import ModelConfig
from src.modules.lfa_model.service import build_model
from src.modules.tensor_core.gradcheck import grad_check
from src.modules.tensor_core.tensor import Tensor
from src.modules.training.schemas import AdamState, DiceLossConfig, EpochStats, TrainRunConfig
from src.modules.training.service import (
    FINAL_CHECKPOINT_NAME,
    TRAIN_LOG_NAME,
    adam_step,
    clip_grad_norm,
    dice_loss_op,
    evaluate_dice,
    fit,
    train_epoch,
    weighted_dice_loss,
)

from tests.conftest import synthetic_pair


def brute_force_loss(s: np.ndarray, g: np.ndarray, weights=(0.7, 0.3), xi=1e-6) -> float:
    s, g = s.ravel().tolist(), g.ravel().tolist()
    total = 0.0
    for w, (ps, pg) in zip(weights, ((s, g), ([1 - v for v in s], [1 - v for v in g]))):
        num = sum(2 * a * b for a, b in zip(ps, pg))
        den = sum(a * a for a in ps) + sum(b * b for b in pg) + xi
        total += w * num / den
    return 1.0 - total


def make_samples(count: int, size: int = 64) -> list[Sample]:
    samples = []
    for i in range(count):
        image, mask = synthetic_pair(i, size)
        samples.append(Sample(
            image=Tensor((image.transpose(2, 0, 1)[None] / 255.0).astype(np.float32)),
            mask=Tensor((mask[None, None] > 127).astype(np.float32)),
            name=f"img{i}",
        ))
    return samples


class TestDiceLoss:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        s = 0.01 + 0.98 * rng.random((1, 1, 4, 4))
        g = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
        loss, _ = weighted_dice_loss(Tensor(s), Tensor(g), DiceLossConfig())
        assert abs(loss - brute_force_loss(s, g)) <= 1e-6
        assert 0.0 <= loss <= 1.0

    def test_perfect_overlap(self):
        g = (np.random.default_rng(0).random((1, 1, 8, 8)) > 0.7).astype(np.float64)
        s = np.clip(g, 1e-7, 1 - 1e-7)
        loss, _ = weighted_dice_loss(Tensor(s), Tensor(g), DiceLossConfig())
        assert loss <= 1e-3

    def test_gradient(self):
        rng = np.random.default_rng(1)
        s = Tensor(0.05 + 0.9 * rng.random((2, 1, 4, 4)))
        g = Tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64))
        report = grad_check(lambda t: dice_loss_op(t, g, DiceLossConfig()), s, tolerance=1e-4)
        assert report.passed

    @pytest.mark.parametrize("seed", range(5))
    def test_swapping_classes_and_weights_is_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        s = 0.01 + 0.98 * rng.random((2, 1, 6, 6))
        g = (rng.random((2, 1, 6, 6)) > 0.6).astype(np.float64)
        loss, _ = weighted_dice_loss(Tensor(s), Tensor(g), DiceLossConfig(class_weights=(0.3, 0.7)))
        swapped, _ = weighted_dice_loss(Tensor(1 - s), Tensor(1 - g), DiceLossConfig(class_weights=(0.7, 0.3)))
        assert loss == pytest.approx(swapped, abs=1e-12)

    def test_probabilities_must_be_interior(self):
        g = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(DomainError):
            weighted_dice_loss(Tensor(np.ones((1, 1, 2, 2))), g, DiceLossConfig())

    def test_target_must_be_binary(self):
        with pytest.raises(DomainError):
            weighted_dice_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), Tensor(np.full((1, 1, 2, 2), 0.5)), DiceLossConfig())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            weighted_dice_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), Tensor(np.zeros((1, 1, 4, 4))), DiceLossConfig())

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            DiceLossConfig(class_weights=(0.5, 0.4))


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        p = Tensor(np.array([1.0, -2.0]).reshape(1, 1, 1, 2), requires_grad=True)
        state = AdamState(learning_rate=0.002)
        adam_step({"p": p}, {"p": np.array([0.5, -3.0]).reshape(1, 1, 1, 2)}, state)
        np.testing.assert_allclose(p.data.ravel(), [0.998, -1.998], atol=1e-7)
        assert state.step == 1

    def test_zero_gradient_leaves_state(self):
        p = Tensor(np.array([1.0, 2.0]).reshape(1, 1, 1, 2), requires_grad=True)
        state = AdamState()
        adam_step({"p": p}, {"p": np.array([0.1, 0.2]).reshape(1, 1, 1, 2)}, state)
        before_p, before_m, before_v = p.data.copy(), state.m["p"].copy(), state.v["p"].copy()
        adam_step({"p": p}, {"p": np.zeros((1, 1, 1, 2))}, state)
        np.testing.assert_array_equal(p.data, before_p)
        np.testing.assert_array_equal(state.m["p"], before_m)
        np.testing.assert_array_equal(state.v["p"], before_v)
        assert state.step == 1

    def test_matches_textbook_adam_with_sparse_gradients(self):
        lr, b1, b2, eps = 0.002, 0.9, 0.999, 1e-8
        gradients = [np.array([1.0, 0.0])] * 5 + [np.array([0.0, 1.0])]
        x = np.array([0.5, -0.5])
        m, v = np.zeros(2), np.zeros(2)
        for t, g in enumerate(gradients, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)

        p = Tensor(np.array([0.5, -0.5]).reshape(1, 1, 1, 2), requires_grad=True)
        state = AdamState(learning_rate=lr)
        for g in gradients:
            adam_step({"p": p}, {"p": g.reshape(1, 1, 1, 2)}, state)
        np.testing.assert_allclose(p.data.ravel(), x, rtol=0, atol=1e-12)
        # 第 6 步第一个坐标梯度为 0，但动量仍在推动它
        assert p.data.ravel()[0] < 0.5 - 5 * lr

    def test_two_step_trace_on_half_square(self):
        # f(x) = x²/2，梯度就是 x
        p = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        state = AdamState(learning_rate=0.002)
        adam_step({"p": p}, {"p": p.data.copy()}, state)
        assert p.data.item() == pytest.approx(0.998, abs=1e-9)
        adam_step({"p": p}, {"p": p.data.copy()}, state)
        m_hat = (0.9 * 0.1 + 0.1 * 0.998) / (1 - 0.9 ** 2)
        v_hat = (0.999 * 0.001 + 0.001 * 0.998 ** 2) / (1 - 0.999 ** 2)
        expected = 0.998 - 0.002 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert p.data.item() == pytest.approx(expected, abs=1e-9)
        assert p.data.item() == pytest.approx(0.9960001, abs=1e-6)
        assert state.step == 2

    def test_non_finite_gradient_rejected(self):
        p = Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
        state = AdamState()
        with pytest.raises(NonFiniteGradientError):
            adam_step({"p": p}, {"p": np.array([np.nan, 1.0]).reshape(1, 1, 1, 2)}, state)
        assert np.all(p.data == 1.0)
        assert state.step == 0

    def test_minimizes_quadratic(self):
        p = Tensor(np.full((1, 1, 1, 3), 5.0), requires_grad=True)
        state = AdamState(learning_rate=0.1)
        for _ in range(1000):
            adam_step({"p": p}, {"p": 2 * p.data}, state)
        assert np.abs(p.data).max() < 0.1

    def test_clip_grad_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        norm = clip_grad_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        total = np.sqrt(grads["a"] ** 2 + grads["b"] ** 2)
        assert total[0] == pytest.approx(1.0, rel=1e-6)


class TestTrainLoop:
    def test_log_line(self):
        assert EpochStats(epoch=3, mean_loss=0.5, train_dice=0.25).log_line() == "3,0.500000,0.250000,nan"

    def test_input_size_multiple_of_eight(self):
        with pytest.raises(ValidationError):
            TrainRunConfig(input_size=60)

    def test_input_size_at_least_model_minimum(self):
        with pytest.raises(ValidationError):
            TrainRunConfig(input_size=32)
        assert TrainRunConfig(input_size=64).input_size == 64

    def test_empty_training_set(self, default_model):
        with pytest.raises(DataError):
            train_epoch(
                default_model, [], TrainRunConfig(), DiceLossConfig(), AdamState(), np.random.default_rng(0),
            )

    def test_epoch_updates_parameters(self):
        model = build_model(ModelConfig(), seed=0)
        before = model.named_parameters()["head.kernel"].data.copy()
        stats = train_epoch(
            model, make_samples(2), TrainRunConfig(batch_size=2), DiceLossConfig(), AdamState(),
            np.random.default_rng(0),
        )
        assert 0.0 <= stats.mean_loss <= 1.0
        assert not np.array_equal(before, model.named_parameters()["head.kernel"].data)

    def test_fit_writes_log_and_checkpoints(self, tmp_path):
        model = build_model(ModelConfig(), seed=0)
        samples = make_samples(3)
        run_cfg = TrainRunConfig(batch_size=2, epochs=2, checkpoint_every=1, input_size=64)
        history = fit(model, samples[:2], samples[2:], run_cfg, DiceLossConfig(), tmp_path)

        lines = (tmp_path / TRAIN_LOG_NAME).read_text().splitlines()
        assert len(lines) == 2 == len(history)
        assert lines[0].startswith("0,")
        assert history[-1].val_dice is not None
        assert (tmp_path / "epoch_0001.lfan").is_file()
        assert (tmp_path / "epoch_0002.lfan").is_file()
        restored = load_checkpoint(tmp_path / FINAL_CHECKPOINT_NAME)
        np.testing.assert_array_equal(
            restored.named_parameters()["head.kernel"].data,
            model.named_parameters()["head.kernel"].data,
        )

    def test_fit_is_deterministic(self, tmp_path):
        logs = []
        for run in ("a", "b"):
            model = build_model(ModelConfig(), seed=7)
            fit(model, make_samples(2), [], TrainRunConfig(batch_size=2, epochs=2, seed=7), DiceLossConfig(), tmp_path / run)
            logs.append((tmp_path / run / TRAIN_LOG_NAME).read_bytes())
        assert logs[0] == logs[1]
        assert (tmp_path / "a" / FINAL_CHECKPOINT_NAME).read_bytes() == (tmp_path / "b" / FINAL_CHECKPOINT_NAME).read_bytes()

    @pytest.mark.slow
    def test_overfit_smoke(self, tmp_path):
        model = build_model(ModelConfig(), seed=7)
        samples = make_samples(4)
        run_cfg = TrainRunConfig(batch_size=8, epochs=200, seed=7, learning_rate=0.002, input_size=64)
        history = fit(model, samples, [], run_cfg, DiceLossConfig(), tmp_path)
        assert history[-1].mean_loss < 0.15
        assert history[-1].train_dice >= 0.90
        losses = [stats.mean_loss for stats in history[:11]]
        assert sum(b < a for a, b in zip(losses, losses[1:])) >= 7
        assert evaluate_dice(model, samples) >= 0.90
