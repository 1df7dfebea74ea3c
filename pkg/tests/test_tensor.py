"""Tensor op forward oracles and backward rules."""

import numpy as np
import pytest

from mfnet import tensor as T
from mfnet.gradcheck import check_gradients
from mfnet.tensor import ConfigurationError, ParamRegistry, SgdState, Tensor, sgd_step


def conv2d_loop_reference(x, w, b, stride, padding):
    """Direct six-nested-loop cross-correlation (independent oracle)."""
    B, cin, H, W = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hout = (H + 2 * padding - kh) // stride + 1
    wout = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, cout, hout, wout), dtype=x.dtype)
    for n in range(B):
        for o in range(cout):
            for oy in range(hout):
                for ox in range(wout):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            for c in range(cin):
                                acc += w[o, c, i, j] * xp[n, c, oy * stride + i, ox * stride + j]
                    out[n, o, oy, ox] = acc + (b[o] if b is not None else 0.0)
    return out


class TestConv2d:
    def test_scalar_product(self):
        x = Tensor(np.full((1, 1, 1, 1), 2.0))
        w = Tensor(np.full((1, 1, 1, 1), 3.0))
        y = T.conv2d(x, w)
        assert y.data.item() == pytest.approx(6.0)

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 1, 4, 4)).astype(np.float32))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        y = T.conv2d(x, w, b)
        np.testing.assert_array_equal(y.data, x.data)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).data
        want = conv2d_loop_reference(x, w, b, 1, 1)
        assert np.abs(got - want).max() <= 1e-6 * max(1.0, np.abs(want).max())

    def test_bitwise_against_oracle_on_integer_inputs(self):
        rng = np.random.default_rng(3)
        x = rng.integers(-16, 17, size=(2, 2, 6, 6)).astype(np.float64)
        w = rng.integers(-16, 17, size=(3, 2, 3, 3)).astype(np.float64)
        got = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        want = conv2d_loop_reference(x, w, None, 2, 1)
        np.testing.assert_array_equal(got, want)

    def test_channel_mismatch(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        w = Tensor(np.zeros((1, 2, 3, 3)))
        with pytest.raises(ConfigurationError):
            T.conv2d(x, w)


class TestBatchNorm:
    def test_constant_input_gives_zeros(self):
        x = Tensor(np.full((2, 3, 2, 2), 4.2, dtype=np.float32))
        g = Tensor(np.ones(3, dtype=np.float32))
        b = Tensor(np.zeros(3, dtype=np.float32))
        y = T.batchnorm2d(x, g, b, np.zeros(3), np.ones(3), training=True)
        assert np.abs(y.data).max() < 1e-2  # epsilon-guarded zero variance

    def test_beta_shifts_mean(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((4, 3, 2, 2)).astype(np.float32))
        g = Tensor(np.ones(3, dtype=np.float32))
        b = Tensor(np.full(3, 5.0, dtype=np.float32))
        y = T.batchnorm2d(x, g, b, np.zeros(3), np.ones(3), training=True)
        means = y.data.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(means, 5.0, atol=1e-5)

    def test_against_two_pass_statistics(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 3, 2, 2)).astype(np.float64)
        g = Tensor(np.ones(3))
        b = Tensor(np.zeros(3))
        y = T.batchnorm2d(Tensor(x), g, b, np.zeros(3), np.ones(3), training=True)
        # two-pass reference: explicit mean then variance, per channel
        for c in range(3):
            vals = x[:, c]
            mu = vals.sum() / vals.size
            var = ((vals - mu) ** 2).sum() / vals.size
            want = (vals - mu) / np.sqrt(var + 1e-5)
            np.testing.assert_allclose(y.data[:, c], want, atol=1e-10)
        np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-7)
        np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1.0, atol=1e-2)

    def test_degenerate_batch_rejected(self):
        x = Tensor(np.zeros((1, 2, 1, 1)))
        g = Tensor(np.ones(2))
        b = Tensor(np.zeros(2))
        with pytest.raises(ConfigurationError):
            T.batchnorm2d(x, g, b, np.zeros(2), np.ones(2), training=True)

    def test_running_stats_updated(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((8, 2, 4, 4)) + 3.0)
        rm, rv = np.zeros(2), np.ones(2)
        T.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
        assert rm.mean() > 0.1  # moved toward batch mean of ~3


class TestSimpleOps:
    def test_relu(self):
        y = T.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])

    def test_maxpool(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        y = T.maxpool2d(x, 2, 2)
        assert y.data.reshape(()) == 4.0

    def test_concat_shapes(self):
        a = Tensor(np.zeros((1, 3, 4, 4)))
        b = Tensor(np.zeros((1, 5, 4, 4)))
        assert T.concat_channels([a, b]).shape == (1, 8, 4, 4)

    def test_concat_extent_mismatch(self):
        a = Tensor(np.zeros((1, 3, 4, 4)))
        b = Tensor(np.zeros((1, 5, 3, 4)))
        with pytest.raises(ConfigurationError):
            T.concat_channels([a, b])

    def test_dropout_eval_is_identity(self):
        x = Tensor(np.ones((3, 3)))
        assert T.dropout(x, 0.5, np.random.default_rng(0), training=False) is x


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = T.softmax_cross_entropy(Tensor(np.zeros((1, 2))), [0])
        assert float(loss.data) == pytest.approx(np.log(2), abs=1e-6)

    def test_large_logits_stable(self):
        loss = T.softmax_cross_entropy(Tensor(np.array([[1000.0, 0.0]])), [0])
        assert float(loss.data) == pytest.approx(0.0, abs=1e-6)
        assert np.isfinite(loss.data)

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        logits = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        labels = rng.integers(0, 5, size=3)
        err = check_gradients(
            lambda: T.softmax_cross_entropy(logits, labels), [logits]
        )
        assert err <= 1e-4

    def test_gradient_rows_sum_to_zero(self):
        rng = np.random.default_rng(12)
        logits = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        loss = T.softmax_cross_entropy(logits, rng.integers(0, 6, size=4))
        T.backward(loss)
        np.testing.assert_allclose(logits.grad.sum(axis=1), 0.0, atol=1e-6)


class TestBackward:
    def test_linear_chain(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = T.scale(x, 3.0)
        T.backward(y)
        assert x.grad.item() == 3.0

    def test_square(self):
        x = Tensor(np.array([4.0]), requires_grad=True)
        y = T.mul(x, x)
        T.backward(y)
        assert x.grad.item() == 8.0

    def test_two_consumers_accumulate(self):
        # z = 3x + 2x -> dz/dx = 5, derived by hand
        x = Tensor(np.array([1.5]), requires_grad=True)
        z = T.add(T.scale(x, 3.0), T.scale(x, 2.0))
        T.backward(z)
        assert x.grad.item() == pytest.approx(5.0)

    def test_repeated_backward_accumulates_on_leaves(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = T.scale(x, 3.0)
        T.backward(y)
        T.backward(y)
        assert x.grad.item() == 6.0

    def test_non_scalar_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(RuntimeError):
            T.backward(T.scale(x, 1.0))


@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_randomized(seed):
    """Analytic vs central FD (64-bit, h=1e-5) across randomized small shapes."""
    rng = np.random.default_rng(seed)
    B, C, H, W = (int(rng.integers(1, 3)) for _ in range(4))
    H, W = H + 2, W + 2
    x = Tensor(rng.standard_normal((B, C, H, W)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, C, 3, 3)), requires_grad=True)
    probe = rng.standard_normal((B, 2, H, W))

    def loss_fn():
        out = T.relu(T.conv2d(x, w, stride=1, padding=1))
        flat = T.reshape(T.mul_const(out, probe), (1, out.data.size))
        return T.mean_axis(flat, axis=1)

    assert check_gradients(loss_fn, [x, w]) <= 1e-4


class TestSgd:
    def _registry_with(self, value, decay=True):
        reg = ParamRegistry()
        p = reg.add("p", Tensor(np.array([value])), weight_decay=decay)
        return reg, p

    def test_plain_step(self):
        reg, p = self._registry_with(1.0)
        p.grad = np.array([0.5])
        sgd_step(reg, SgdState(learning_rate=1.0, momentum=0.0, weight_decay=0.0))
        assert p.data.item() == pytest.approx(0.5)
        assert p.grad is None

    def test_momentum_recurrence(self):
        reg, p = self._registry_with(0.0)
        state = SgdState(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
        p.grad = np.array([1.0])
        sgd_step(reg, state)
        before = p.data.copy()
        p.grad = np.array([1.0])
        sgd_step(reg, state)
        second_update = before - p.data
        assert second_update.item() == pytest.approx(0.1 * 1.9)

    def test_weight_decay_closed_form(self):
        reg, p = self._registry_with(2.0)
        state = SgdState(learning_rate=0.1, momentum=0.0, weight_decay=0.0005)
        p.grad = np.array([0.3])
        sgd_step(reg, state)
        want = 2.0 - 0.1 * (0.3 + 0.0005 * 2.0)
        assert p.data.item() == pytest.approx(want, rel=1e-6)

    def test_decay_flag_skips_decay(self):
        reg, p = self._registry_with(2.0, decay=False)
        state = SgdState(learning_rate=0.1, momentum=0.0, weight_decay=0.0005)
        p.grad = np.array([0.0])
        sgd_step(reg, state)
        assert p.data.item() == 2.0

    def test_missing_grad_raises(self):
        reg, p = self._registry_with(1.0)
        with pytest.raises(RuntimeError):
            sgd_step(reg, SgdState(learning_rate=0.1))

    def test_deterministic(self):
        results = []
        for _ in range(2):
            reg, p = self._registry_with(1.0)
            state = SgdState(learning_rate=0.05, momentum=0.9, weight_decay=0.0005)
            for step in range(5):
                p.grad = np.array([0.1 * (step + 1)])
                sgd_step(reg, state)
            results.append(p.data.copy())
        np.testing.assert_array_equal(results[0], results[1])

    def test_duplicate_name_rejected(self):
        reg = ParamRegistry()
        reg.add("p", Tensor(np.zeros(1)))
        with pytest.raises(ConfigurationError):
            reg.add("p", Tensor(np.zeros(1)))
