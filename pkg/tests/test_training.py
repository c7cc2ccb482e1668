import numpy as np
import pytest

from ecgkit import tensor as tk
from ecgkit.errors import ConfigError, NumericalError, ParseError, UsageError
from ecgkit.models import ModelDescriptor, build
from ecgkit.tensor import Tensor
from ecgkit.training import (
    AdamW,
    EpochRecord,
    FocalLossConfig,
    PlateauScheduler,
    TABLE1,
    TrainRunConfig,
    TrainingHistory,
    evaluate_split,
    focal_loss,
    train,
)
from helpers import toy_two_class


def probs_from_logits(logits):
    return tk.softmax(Tensor(np.asarray(logits, dtype=np.float64)), axis=-1)


class TestFocalLoss:
    def test_certain_prediction_has_zero_loss(self):
        p = Tensor(np.array([[1.0, 0.0, 0.0]]))
        loss = focal_loss(p, [0], FocalLossConfig(alpha=1, gamma=2))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_half_confidence_value(self):
        p = Tensor(np.array([[0.5, 0.5]]))
        loss = focal_loss(p, [0], FocalLossConfig(alpha=1, gamma=2))
        assert loss.item() == pytest.approx(0.25 * np.log(2), rel=1e-9)

    def test_gamma_zero_is_cross_entropy(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            logits = rng.normal(scale=3, size=(16, 5))
            y = rng.integers(0, 5, size=16)
            p = probs_from_logits(logits)
            fl = focal_loss(p, y, FocalLossConfig(alpha=1, gamma=0)).item()
            ce = -np.log(p.data[np.arange(16), y]).mean()
            assert fl == pytest.approx(ce, abs=1e-9)

    def test_alpha_scales_linearly(self):
        p = probs_from_logits(np.random.default_rng(1).normal(size=(8, 5)))
        y = np.arange(8) % 5
        base = focal_loss(p, y, FocalLossConfig(alpha=1, gamma=2)).item()
        double = focal_loss(p, y, FocalLossConfig(alpha=2, gamma=2)).item()
        assert double == pytest.approx(2 * base, rel=1e-9)

    def test_monotone_decreasing_in_confidence(self):
        grid = np.linspace(0.01, 0.99, 50)
        losses = []
        for p_t in grid:
            rest = (1 - p_t) / 4
            p = Tensor(np.array([[p_t, rest, rest, rest, rest]]))
            losses.append(focal_loss(p, [0]).item())
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_never_exceeds_cross_entropy(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            p = probs_from_logits(rng.normal(scale=2, size=(12, 5)))
            y = rng.integers(0, 5, size=12)
            fl = focal_loss(p, y, FocalLossConfig(gamma=2)).item()
            ce = focal_loss(p, y, FocalLossConfig(gamma=0)).item()
            assert fl <= ce + 1e-12

    def test_target_range_checked(self):
        p = Tensor(np.full((2, 5), 0.2))
        with pytest.raises(UsageError):
            focal_loss(p, [0, 5])
        with pytest.raises(UsageError):
            focal_loss(p, [-1, 0])

    def test_rejects_logits(self):
        with pytest.raises(UsageError):
            focal_loss(Tensor(np.array([[3.0, -1.0]])), [0])

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            FocalLossConfig(gamma=-1)
        with pytest.raises(ConfigError):
            FocalLossConfig(alpha=0)

    def test_gradient_flows_to_logits(self):
        logits = Tensor(np.random.default_rng(3).normal(size=(4, 5)),
                        requires_grad=True)
        loss = focal_loss(tk.softmax(logits, axis=-1), [0, 1, 2, 3])
        loss.backward()
        assert logits.grad is not None
        assert np.isfinite(logits.grad).all()


def reference_adamw(theta, grads, lr, wd=0.0, betas=(0.9, 0.999), eps=1e-8):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = betas[0] * m + (1 - betas[0]) * g
        v = betas[1] * v + (1 - betas[1]) * g * g
        m_hat = m / (1 - betas[0] ** t)
        v_hat = v / (1 - betas[1] ** t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * wd * theta
    return theta


class TestAdamW:
    def make_param(self, value):
        return Tensor(np.array(value, dtype=np.float64), requires_grad=True)

    def test_first_step_size(self):
        p = self.make_param([0.0])
        opt = AdamW({"w": p}, lr=1e-3, weight_decay=0.0)
        p.grad = np.array([1.0])
        opt.step()
        assert p.data[0] == pytest.approx(-1e-3, rel=1e-6)

    def test_zero_grad_zero_decay_is_noop(self):
        p = self.make_param([0.7, -0.3])
        opt = AdamW({"w": p}, lr=1e-2, weight_decay=0.0)
        p.grad = np.zeros(2)
        before = p.data.copy()
        for _ in range(5):
            opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_pure_decay_recurrence(self):
        p = self.make_param([2.0])
        lr, wd = 1e-2, 0.1
        opt = AdamW({"w": p}, lr=lr, weight_decay=wd)
        for _ in range(5):
            p.grad = np.zeros(1)
            opt.step()
        assert p.data[0] == pytest.approx(2.0 * (1 - lr * wd) ** 5, rel=1e-12)

    def test_matches_reference_sequence(self):
        rng = np.random.default_rng(4)
        start = rng.normal(size=6)
        grads = [rng.normal(size=6) for _ in range(7)]
        p = self.make_param(start)
        opt = AdamW({"w": p}, lr=3e-3, weight_decay=1e-4)
        for g in grads:
            p.grad = g
            opt.step()
        expected = reference_adamw(start, grads, 3e-3, wd=1e-4)
        np.testing.assert_allclose(p.data, expected, atol=1e-12)

    def test_unset_grad_is_skipped(self):
        used = self.make_param([1.0])
        idle = self.make_param([1.0])
        opt = AdamW({"a": used, "b": idle}, lr=1e-2, weight_decay=0.1)
        used.grad = np.array([0.5])
        opt.step()
        assert idle.data[0] == 1.0
        assert used.data[0] != 1.0

    def test_nonfinite_gradient_names_parameter(self):
        p = self.make_param([1.0])
        opt = AdamW({"head.w": p}, lr=1e-3)
        p.grad = np.array([np.nan])
        with pytest.raises(NumericalError) as exc:
            opt.step()
        assert "head.w" in str(exc.value)


class TestPlateauScheduler:
    def make(self, lr=1e-3, **kw):
        p = Tensor(np.zeros(1), requires_grad=True)
        opt = AdamW({"w": p}, lr=lr)
        return opt, PlateauScheduler(opt, **kw)

    def test_halves_after_exactly_three_stagnant_epochs(self):
        opt, sched = self.make(1e-3)
        sched.step(0.4)
        assert opt.lr == 1e-3
        sched.step(0.5)
        sched.step(0.5)
        assert opt.lr == 1e-3      # two stagnant epochs: not yet
        sched.step(0.5)
        assert opt.lr == 5e-4      # third fires the reduction
        sched.step(0.5)
        assert opt.lr == 5e-4      # counter reset, one stagnant epoch again

    def test_floor_is_exact(self):
        opt, sched = self.make(1.5e-6, min_lr=1e-6)
        sched.step(1.0)
        for _ in range(3):
            sched.step(1.0)
        assert opt.lr == 1e-6

    def test_strictly_decreasing_losses_keep_lr(self):
        opt, sched = self.make(1e-3)
        for loss in np.linspace(1.0, 0.1, 20):
            sched.step(float(loss))
        assert opt.lr == 1e-3

    def test_tiny_improvement_counts_as_stagnant(self):
        opt, sched = self.make(1e-3)
        sched.step(0.5)
        for _ in range(3):
            sched.step(0.5 - 1e-12)
        assert opt.lr == 5e-4

    def test_lr_sequence_nonincreasing_and_floored(self):
        rng = np.random.default_rng(5)
        opt, sched = self.make(1e-3, min_lr=1e-6)
        seen = [opt.lr]
        for _ in range(200):
            sched.step(float(rng.uniform(0.4, 0.6)))
            seen.append(opt.lr)
        assert all(a >= b for a, b in zip(seen, seen[1:]))
        assert all(lr >= 1e-6 for lr in seen)

    def test_factor_validation(self):
        with pytest.raises(ConfigError):
            self.make(1e-3, factor=1.0)
        with pytest.raises(ConfigError):
            self.make(1e-3, patience=0)


class TestRunConfig:
    def test_table_defaults(self):
        cnn = TrainRunConfig.for_arch("cnn")
        assert (cnn.batch_size, cnn.lr) == (128, 1.15e-3)
        assert (cnn.epochs, cnn.early_stop_patience) == (50, 8)
        lstm = TrainRunConfig.for_arch("cnn_lstm")
        assert (lstm.batch_size, lstm.lr) == (96, 1.0e-3)
        attn = TrainRunConfig.for_arch("cnn_lstm_attn")
        assert (attn.batch_size, attn.lr) == (96, 1.0e-3)
        res = TrainRunConfig.for_arch("resnet1d")
        assert (res.batch_size, res.lr) == (96, 1.22e-3)

    def test_overrides(self):
        cfg = TrainRunConfig.for_arch("cnn", epochs=5, seed=3)
        assert cfg.epochs == 5 and cfg.seed == 3
        assert cfg.batch_size == TABLE1["cnn"]["batch_size"]

    def test_unknown_arch(self):
        with pytest.raises(ConfigError):
            TrainRunConfig.for_arch("mlp")

    def test_value_validation(self):
        with pytest.raises(ConfigError):
            TrainRunConfig("cnn", batch_size=0, lr=1e-3)
        with pytest.raises(ConfigError):
            TrainRunConfig("cnn", batch_size=8, lr=-1.0)


class TestTrainingHistory:
    def test_csv_round_trip_is_lossless(self, tmp_path):
        rng = np.random.default_rng(6)
        history = TrainingHistory([
            EpochRecord(i + 1, *(float(v) for v in rng.random(4)))
            for i in range(5)])
        path = history.to_csv(tmp_path / "history.csv")
        assert TrainingHistory.from_csv(path) == history

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("epoch,loss\n1,0.5\n")
        with pytest.raises(ParseError):
            TrainingHistory.from_csv(path)

    def test_best_epoch(self):
        history = TrainingHistory([
            EpochRecord(1, 1.0, 0.9, 0.5, 0.5),
            EpochRecord(2, 0.8, 0.6, 0.6, 0.6),
            EpochRecord(3, 0.7, 0.65, 0.7, 0.6),
        ])
        assert history.best_epoch() == 2


def tiny_cnn(length=64, seed=0):
    return build(ModelDescriptor("cnn", input_len=length,
                                 channel_plan=(8, 8)), seed)


class TestTrainLoop:
    def test_learns_separable_toy_set(self):
        dataset = toy_two_class(n_per_class=20, length=64, seed=1)
        model = tiny_cnn(seed=1)
        cfg = TrainRunConfig("cnn", batch_size=8, lr=1e-2, epochs=30, seed=1)
        model, history = train(model, dataset, cfg)
        assert max(r.train_acc for r in history.records) == 1.0

    def test_same_seed_reproduces_history(self):
        histories = []
        for _ in range(2):
            dataset = toy_two_class(n_per_class=10, length=64, seed=2)
            model = tiny_cnn(seed=2)
            cfg = TrainRunConfig("cnn", batch_size=8, lr=2e-3, epochs=4,
                                 seed=9)
            _, history = train(model, dataset, cfg)
            histories.append(history)
        assert histories[0] == histories[1]

    def test_history_has_one_record_per_epoch(self):
        dataset = toy_two_class(n_per_class=10, length=64, seed=3)
        model = tiny_cnn(seed=3)
        cfg = TrainRunConfig("cnn", batch_size=8, lr=1e-3, epochs=3, seed=5)
        _, history = train(model, dataset, cfg)
        assert [r.epoch for r in history.records] == [1, 2, 3]

    def test_early_stop_and_best_weight_restore(self):
        dataset = toy_two_class(n_per_class=15, length=64, seed=4)
        model = tiny_cnn(seed=4)
        cfg = TrainRunConfig("cnn", batch_size=8, lr=5e-3, epochs=50, seed=4,
                             early_stop_patience=4)
        model, history = train(model, dataset, cfg)
        assert len(history) < 50   # plateaued long before the epoch budget
        X_val, y_val = dataset.matrix("val")
        val_loss, _ = evaluate_split(model, X_val, y_val, cfg.focal)
        assert val_loss == pytest.approx(min(history.val_losses()), rel=1e-5)

    def test_missing_split_tags_rejected(self):
        from ecgkit.beats import BeatDataset, BeatRecord
        rng = np.random.default_rng(7)
        dataset = BeatDataset([BeatRecord(rng.random(64), 0)
                               for _ in range(10)])
        with pytest.raises(ConfigError):
            train(tiny_cnn(), dataset, TrainRunConfig("cnn", 8, 1e-3))
