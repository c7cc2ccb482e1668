import numpy as np
import pytest

from ecgkit import tensor as tk
from ecgkit.errors import ShapeError, UsageError
from ecgkit.tensor import RunningStats, Tensor


def t(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad)


class TestAutodiffCore:
    def test_sum_gradient_is_ones(self):
        x = t(np.arange(6).reshape(2, 3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gradient(self):
        x = t([1.0, -2.0, 3.0], requires_grad=True)
        tk.mul(x, x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])

    def test_gradients_accumulate_across_reuse(self):
        x = t([2.0], requires_grad=True)
        y = tk.add(tk.mul(x, x), x)  # x^2 + x
        y.backward()
        np.testing.assert_allclose(x.grad, [5.0])

    def test_backward_requires_scalar(self):
        x = t([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            tk.mul(x, x).backward()

    def test_backward_on_untaped_tensor(self):
        with pytest.raises(UsageError):
            t([1.0]).backward()

    def test_no_grad_blocks_taping(self):
        x = t([1.0], requires_grad=True)
        with tk.no_grad():
            y = tk.mul(x, x)
        assert y._parents == ()
        with pytest.raises(UsageError):
            y.backward()

    def test_no_grad_is_thread_local(self):
        import threading
        entered, release = threading.Event(), threading.Event()

        def hold_no_grad():
            with tk.no_grad():
                entered.set()
                release.wait(timeout=10)

        worker = threading.Thread(target=hold_no_grad)
        worker.start()
        assert entered.wait(timeout=10)
        try:
            x = t([1.0], requires_grad=True)
            assert tk.mul(x, x)._parents  # this thread still tapes
        finally:
            release.set()
            worker.join()

    def test_detach_cuts_graph(self):
        x = t([3.0], requires_grad=True)
        w = t([2.0], requires_grad=True)
        y = tk.mul(x, x).detach()
        tk.mul(y, w).backward()
        assert x.grad is None
        np.testing.assert_allclose(w.grad, [9.0])

    def test_hook_fires_once_per_backward(self):
        x = t([1.0, 2.0], requires_grad=True)
        calls = []
        y = tk.mul(x, x)
        y.register_hook(lambda g: calls.append(g.copy()))
        # y feeds two consumers; the hook must still see the final grad once
        tk.add(y.sum(), tk.mul(y, t([3.0, 3.0])).sum()).backward()
        assert len(calls) == 1
        np.testing.assert_allclose(calls[0], [4.0, 4.0])

    def test_deep_chain_does_not_recurse(self):
        x = t([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = tk.add(y, t([0.0]))
        y.backward()
        np.testing.assert_allclose(x.grad, [1.0])

    def test_unused_parameter_gets_no_gradient(self):
        x = t([1.0], requires_grad=True)
        unused = t([1.0], requires_grad=True)
        tk.mul(x, x).backward()
        assert unused.grad is None

    def test_int_input_promoted_to_float(self):
        x = Tensor(np.array([1, 2, 3]))
        assert np.issubdtype(x.data.dtype, np.floating)


class TestElementwise:
    def test_broadcast_add_unbroadcasts_gradient(self):
        a = t(np.ones((2, 3)), requires_grad=True)
        b = t(np.ones((1, 3)), requires_grad=True)
        tk.add(a, b).sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, [[2.0, 2.0, 2.0]])

    def test_scalar_operand_keeps_dtype(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        y = tk.mul(x, 2.5)
        assert y.data.dtype == np.float32

    def test_clamp_min(self):
        x = t([-1.0, 0.5, 2.0], requires_grad=True)
        y = tk.clamp_min(x, 0.0)
        np.testing.assert_allclose(y.data, [0.0, 0.5, 2.0])
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [0.0, 1.0, 1.0])

    def test_gather_rows(self):
        x = t([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], requires_grad=True)
        y = tk.gather_rows(x, [1, 0, 1])
        np.testing.assert_allclose(y.data, [2.0, 3.0, 6.0])
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [[0, 1], [1, 0], [0, 1]])

    def test_narrow_and_concat_invert(self):
        x = t(np.arange(12.0).reshape(3, 4), requires_grad=True)
        parts = [tk.narrow(x, 1, i, 2) for i in (0, 2)]
        y = tk.concat(parts, 1)
        np.testing.assert_array_equal(y.data, x.data)
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


class TestActivations:
    def test_swish_values(self):
        x = t([0.0, 1.0])
        y = tk.swish(x)
        assert y.data[0] == 0.0
        assert y.data[1] == pytest.approx(0.731059, abs=1e-6)

    def test_relu(self):
        np.testing.assert_allclose(tk.relu(t([-2.0, 0.0, 3.0])).data,
                                   [0.0, 0.0, 3.0])

    def test_leaky_relu_slope(self):
        y = tk.leaky_relu(t([-1.0, 2.0]), slope=0.2)
        np.testing.assert_allclose(y.data, [-0.2, 2.0])

    def test_sigmoid_extremes_are_stable(self):
        y = tk.sigmoid(t([-1000.0, 0.0, 1000.0]))
        np.testing.assert_allclose(y.data, [0.0, 0.5, 1.0], atol=1e-12)

    def test_activation_dispatch(self):
        x = t([0.3])
        assert tk.activation("tanh", x).data[0] == pytest.approx(np.tanh(0.3))
        with pytest.raises(UsageError):
            tk.activation("gelu", x)


class TestSoftmax:
    def test_symmetric_logits(self):
        np.testing.assert_allclose(tk.softmax(t([[0.0, 0.0]])).data,
                                   [[0.5, 0.5]])

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 4))
        a = tk.softmax(t(x)).data
        b = tk.softmax(t(x + 123.456)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rows_sum_to_one_and_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            x = rng.normal(scale=50, size=(8, 5))
            y = tk.softmax(t(x)).data
            assert (y >= 0).all()
            np.testing.assert_allclose(y.sum(axis=1), np.ones(8), atol=1e-9)

    def test_huge_logits_do_not_overflow(self):
        y = tk.softmax(t([[1e4, 0.0, -1e4]])).data
        assert np.isfinite(y).all()
        assert y[0, 0] == pytest.approx(1.0)


class TestDense:
    def test_identity(self):
        x = t(np.eye(3))
        w = t(np.eye(3))
        b = t(np.zeros(3))
        np.testing.assert_array_equal(tk.dense(x, w, b).data, np.eye(3))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tk.dense(t(np.ones((2, 3))), t(np.ones((4, 5))))


class TestConv1d:
    def test_identity_kernel(self):
        x = t(np.arange(8.0).reshape(1, 1, 8))
        w = t(np.ones((1, 1, 1)))
        np.testing.assert_array_equal(tk.conv1d(x, w).data, x.data)

    def test_edge_detector(self):
        x = t([[[1.0, 2.0, 3.0, 4.0]]])
        w = t([[[1.0, 0.0, -1.0]]])
        np.testing.assert_allclose(tk.conv1d(x, w).data, [[[-2.0, -2.0]]])

    def test_zero_kernel_with_bias(self):
        x = t(np.random.default_rng(0).normal(size=(2, 3, 6)))
        w = t(np.zeros((4, 3, 3)))
        b = t(np.full(4, 3.0))
        out = tk.conv1d(x, w, b)
        np.testing.assert_allclose(out.data, np.full((2, 4, 4), 3.0))

    def test_output_length_formula(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            length = int(rng.integers(4, 40))
            kernel = int(rng.integers(1, 8))
            stride = int(rng.integers(1, 4))
            padding = int(rng.integers(0, 4))
            if kernel > length + 2 * padding:
                continue
            x = t(rng.normal(size=(2, 2, length)))
            w = t(rng.normal(size=(3, 2, kernel)))
            out = tk.conv1d(x, w, stride=stride, padding=padding)
            expected = (length + 2 * padding - kernel) // stride + 1
            assert out.data.shape == (2, 3, expected)

    def test_matches_direct_cross_correlation(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 10))
        w = rng.normal(size=(4, 3, 3))
        out = tk.conv1d(t(x), t(w), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
        for b in range(2):
            for co in range(4):
                for o in range(out.shape[2]):
                    ref = (xp[b, :, 2 * o:2 * o + 3] * w[co]).sum()
                    assert out[b, co, o] == pytest.approx(ref, rel=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            tk.conv1d(t(np.ones((1, 2, 5))), t(np.ones((3, 4, 3))))

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError):
            tk.conv1d(t(np.ones((1, 1, 3))), t(np.ones((1, 1, 9))))


class TestBatchNorm:
    def test_eval_identity_with_unit_stats(self):
        x = np.random.default_rng(5).normal(size=(4, 3, 6))
        stats = RunningStats(3, dtype=np.float64)
        out = tk.batch_norm1d(t(x), t(np.ones(3)), t(np.zeros(3)), stats,
                              training=False)
        # eps inflates the denominator by 1e-5, so identity holds to ~5e-6
        np.testing.assert_allclose(out.data, x, rtol=1e-5, atol=1e-5)

    def test_train_constant_channel_is_zeroed(self):
        x = np.full((4, 2, 5), 7.0)
        stats = RunningStats(2, dtype=np.float64)
        out = tk.batch_norm1d(t(x), t(np.ones(2)), t(np.zeros(2)), stats,
                              training=True)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_train_two_point_batch(self):
        x = np.array([[0.0], [2.0]])
        stats = RunningStats(1, dtype=np.float64)
        out = tk.batch_norm1d(t(x), t(np.ones(1)), t(np.zeros(1)), stats,
                              training=True)
        np.testing.assert_allclose(out.data, [[-1.0], [1.0]], atol=1e-4)

    def test_running_stats_update(self):
        rng = np.random.default_rng(6)
        x = rng.normal(loc=2.0, scale=3.0, size=(64, 1, 32))
        stats = RunningStats(1, dtype=np.float64)
        tk.batch_norm1d(t(x), t(np.ones(1)), t(np.zeros(1)), stats,
                        training=True, momentum=1.0)
        assert stats.mean[0] == pytest.approx(x.mean(), rel=1e-6)
        n = x.size
        assert stats.var[0] == pytest.approx(x.var() * n / (n - 1), rel=1e-6)

    def test_single_value_batch_warns(self):
        stats = RunningStats(2, dtype=np.float64)
        with pytest.warns(RuntimeWarning):
            tk.batch_norm1d(t(np.ones((1, 2))), t(np.ones(2)), t(np.zeros(2)),
                            stats, training=True)


class TestPooling:
    def test_max_pool_known(self):
        x = t([[[1.0, 3.0, 2.0, 5.0]]])
        np.testing.assert_allclose(tk.max_pool1d(x, 2, 2).data, [[[3.0, 5.0]]])

    def test_max_pool_overlapping(self):
        x = t([[[4.0, 1.0, 1.0, 1.0]]])
        np.testing.assert_allclose(tk.max_pool1d(x, 3, 1).data, [[[4.0, 1.0]]])

    def test_max_pool_constant(self):
        x = t(np.full((2, 2, 6), 1.5))
        np.testing.assert_allclose(tk.max_pool1d(x, 2, 2).data,
                                   np.full((2, 2, 3), 1.5))

    def test_max_pool_length_formula(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            length = int(rng.integers(2, 40))
            kernel = int(rng.integers(1, min(length, 6) + 1))
            stride = int(rng.integers(1, 4))
            out = tk.max_pool1d(t(rng.normal(size=(1, 1, length))), kernel,
                                stride)
            assert out.data.shape[2] == (length - kernel) // stride + 1

    def test_adaptive_avg_global(self):
        x = t([[[1.0, 2.0, 3.0, 4.0]]])
        np.testing.assert_allclose(tk.adaptive_pool1d(x, 1, "avg").data,
                                   [[[2.5]]])

    def test_adaptive_identity_when_out_equals_len(self):
        x = t(np.random.default_rng(8).normal(size=(2, 3, 7)))
        for mode in ("avg", "max"):
            np.testing.assert_allclose(
                tk.adaptive_pool1d(x, 7, mode).data, x.data)

    def test_adaptive_max_bins(self):
        x = t([[[1.0, 5.0, 2.0, 3.0, 4.0]]])
        np.testing.assert_allclose(tk.adaptive_pool1d(x, 2, "max").data,
                                   [[[5.0, 4.0]]])

    def test_adaptive_bins_partition_indices(self):
        for length in range(1, 30):
            for out_len in range(1, length + 1):
                bounds = [(i * length // out_len, (i + 1) * length // out_len)
                          for i in range(out_len)]
                covered = []
                for lo, hi in bounds:
                    assert hi > lo
                    covered.extend(range(lo, hi))
                assert covered == list(range(length))


def ref_lstm_step(x, h, c, w_ih, w_hh, b):
    z = x @ w_ih.T + h @ w_hh.T + b
    hid = h.shape[1]
    i = 1.0 / (1.0 + np.exp(-z[:, :hid]))
    f = 1.0 / (1.0 + np.exp(-z[:, hid:2 * hid]))
    g = np.tanh(z[:, 2 * hid:3 * hid])
    o = 1.0 / (1.0 + np.exp(-z[:, 3 * hid:]))
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


class TestLstm:
    def gates(self, rng, d_in, hidden, forget_bias=0.0):
        return {
            "w_ih": t(rng.normal(scale=0.4, size=(4 * hidden, d_in))),
            "w_hh": t(rng.normal(scale=0.4, size=(4 * hidden, hidden))),
            "b": t(np.concatenate([np.zeros(hidden),
                                   np.full(hidden, forget_bias),
                                   np.zeros(2 * hidden)])),
        }

    def test_zero_everything_gives_zero_state(self):
        z = t(np.zeros((2, 3)))
        p = {"w_ih": t(np.zeros((8, 3))), "w_hh": t(np.zeros((8, 2))),
             "b": t(np.zeros(8))}
        h, c = tk.lstm_step(z, t(np.zeros((2, 2))), t(np.zeros((2, 2))),
                            p["w_ih"], p["w_hh"], p["b"])
        np.testing.assert_array_equal(h.data, 0.0)
        np.testing.assert_array_equal(c.data, 0.0)

    def test_saturated_forget_gate_preserves_cell(self):
        rng = np.random.default_rng(9)
        p = self.gates(rng, 3, 4, forget_bias=50.0)
        p["w_ih"] = t(np.zeros((16, 3)))
        p["w_hh"] = t(np.zeros((16, 4)))
        c_prev = rng.normal(size=(2, 4)) * 0.5
        _, c = tk.lstm_step(t(np.zeros((2, 3))), t(np.zeros((2, 4))),
                            t(c_prev), p["w_ih"], p["w_hh"], p["b"])
        np.testing.assert_allclose(c.data, c_prev, atol=1e-9)

    def test_matches_reference_arithmetic(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            p = self.gates(rng, 3, 4)
            x = rng.normal(size=(2, 3))
            h0 = rng.normal(size=(2, 4))
            c0 = rng.normal(size=(2, 4))
            h, c = tk.lstm_step(t(x), t(h0), t(c0), p["w_ih"], p["w_hh"],
                                p["b"])
            rh, rc = ref_lstm_step(x, h0, c0, p["w_ih"].data, p["w_hh"].data,
                                   p["b"].data)
            np.testing.assert_allclose(h.data, rh, atol=1e-12)
            np.testing.assert_allclose(c.data, rc, atol=1e-12)

    def test_hidden_state_bounded(self):
        rng = np.random.default_rng(11)
        p = self.gates(rng, 3, 4)
        h = t(np.zeros((2, 4)))
        c = t(np.zeros((2, 4)))
        for _ in range(50):
            h, c = tk.lstm_step(t(rng.normal(size=(2, 3)) * 5), h, c,
                                p["w_ih"], p["w_hh"], p["b"])
        assert np.abs(h.data).max() <= 1.0


class TestBilstm:
    def layer(self, rng, d_in, hidden, shared=False):
        def gates():
            return {
                "w_ih": t(rng.normal(scale=0.5, size=(4 * hidden, d_in))),
                "w_hh": t(rng.normal(scale=0.5, size=(4 * hidden, hidden))),
                "b": t(rng.normal(scale=0.5, size=4 * hidden)),
            }
        fwd = gates()
        return {"fwd": fwd, "bwd": fwd if shared else gates()}

    def test_single_step_halves_agree(self):
        rng = np.random.default_rng(12)
        layer = self.layer(rng, 3, 4, shared=True)
        out = tk.bilstm(t(rng.normal(size=(2, 1, 3))), [layer], 4)
        np.testing.assert_allclose(out.data[:, 0, :4], out.data[:, 0, 4:])

    def test_palindrome_symmetry_with_shared_weights(self):
        rng = np.random.default_rng(13)
        layer = self.layer(rng, 2, 3, shared=True)
        half = rng.normal(size=(1, 3, 2))
        x = np.concatenate([half, half[:, ::-1, :]], axis=1)  # length 6
        out = tk.bilstm(t(x), [layer], 3).data
        length = x.shape[1]
        for step in range(length):
            np.testing.assert_allclose(out[:, step, :3],
                                       out[:, length - 1 - step, 3:],
                                       atol=1e-10)

    def test_zero_weights_give_zero_states(self):
        zero = {"w_ih": t(np.zeros((8, 3))), "w_hh": t(np.zeros((8, 2))),
                "b": t(np.zeros(8))}
        layer = {"fwd": zero, "bwd": zero}
        out = tk.bilstm(t(np.random.default_rng(14).normal(size=(2, 5, 3))),
                        [layer], 2)
        np.testing.assert_array_equal(out.data, np.zeros((2, 5, 4)))

    def test_stacked_output_shape(self):
        rng = np.random.default_rng(15)
        layers = [self.layer(rng, 3, 4), self.layer(rng, 8, 4)]
        out = tk.bilstm(t(rng.normal(size=(2, 6, 3))), layers, 4)
        assert out.data.shape == (2, 6, 8)

    def test_dropout_only_in_training(self):
        rng = np.random.default_rng(16)
        layers = [self.layer(rng, 3, 4), self.layer(rng, 8, 4)]
        x = t(rng.normal(size=(2, 5, 3)))
        eval_a = tk.bilstm(x, layers, 4, dropout_rate=0.5, training=False,
                           rng=np.random.default_rng(0))
        eval_b = tk.bilstm(x, layers, 4, dropout_rate=0.5, training=False,
                           rng=np.random.default_rng(99))
        np.testing.assert_array_equal(eval_a.data, eval_b.data)
        train = tk.bilstm(x, layers, 4, dropout_rate=0.5, training=True,
                          rng=np.random.default_rng(0))
        assert not np.allclose(train.data, eval_a.data)


class TestAttentionPool:
    def params(self, rng, dim, attn):
        return (t(rng.normal(scale=0.5, size=(attn, dim))),
                t(rng.normal(scale=0.5, size=attn)),
                t(rng.normal(scale=0.5, size=attn)))

    def test_identical_steps_give_uniform_weights(self):
        rng = np.random.default_rng(17)
        w_h, b_h, v = self.params(rng, 4, 3)
        row = rng.normal(size=(2, 1, 4))
        h = np.repeat(row, 5, axis=1)
        _, alpha = tk.attention_pool(t(h), w_h, b_h, v)
        np.testing.assert_allclose(alpha.data, np.full((2, 5), 0.2),
                                   atol=1e-9)

    def test_single_step(self):
        rng = np.random.default_rng(18)
        w_h, b_h, v = self.params(rng, 4, 3)
        h = rng.normal(size=(3, 1, 4))
        context, alpha = tk.attention_pool(t(h), w_h, b_h, v)
        np.testing.assert_allclose(alpha.data, np.ones((3, 1)))
        np.testing.assert_allclose(context.data, h[:, 0, :])

    def test_matches_explicit_weighted_sum(self):
        rng = np.random.default_rng(19)
        w_h, b_h, v = self.params(rng, 4, 3)
        h = rng.normal(size=(2, 3, 4))
        context, alpha = tk.attention_pool(t(h), w_h, b_h, v)
        u = np.tanh(h @ w_h.data.T + b_h.data)
        scores = u @ v.data
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        ref_alpha = e / e.sum(axis=1, keepdims=True)
        ref_context = (ref_alpha[..., None] * h).sum(axis=1)
        np.testing.assert_allclose(alpha.data, ref_alpha, atol=1e-12)
        np.testing.assert_allclose(context.data, ref_context, atol=1e-12)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(20)
        w_h, b_h, v = self.params(rng, 6, 4)
        for _ in range(10):
            h = rng.normal(scale=3.0, size=(3, 7, 6))
            _, alpha = tk.attention_pool(t(h), w_h, b_h, v)
            np.testing.assert_allclose(alpha.data.sum(axis=1), np.ones(3),
                                       atol=1e-9)


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = t(np.ones((4, 4)))
        assert tk.dropout(x, 0.5, False, np.random.default_rng(0)) is x

    def test_zero_rate_is_identity(self):
        x = t(np.ones((4, 4)))
        assert tk.dropout(x, 0.0, True, np.random.default_rng(0)) is x

    def test_train_mode_scales_survivors(self):
        rng = np.random.default_rng(21)
        x = t(np.ones((200, 200)))
        y = tk.dropout(x, 0.25, True, rng)
        survivors = y.data != 0
        assert survivors.mean() == pytest.approx(0.75, abs=0.01)
        np.testing.assert_allclose(y.data[survivors], 1.0 / 0.75)

    def test_bad_rate_rejected(self):
        with pytest.raises(UsageError):
            tk.dropout(t(np.ones(3)), 1.0, True, np.random.default_rng(0))
