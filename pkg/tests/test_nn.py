import numpy as np
import pytest

from pcmu.errors import ConfigError, DataError
from pcmu.nn import (DenseStack, LstmStack, RmsProp, max_rel_error, mse_loss,
                     sigmoid_bce, softmax, softmax_xent)
from pcmu.nn import backend

GRAD_TOL = 1e-4
N_SEEDS = 20


def _relu_kink_margin(net, x):
    """Smallest |pre-activation| of any relu unit; finite differences are
    only valid when no kink lies inside the perturbation radius."""
    margin = np.inf
    cur = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = cur @ w + b
        if act == backend.ACT_RELU:
            margin = min(margin, np.abs(z).min())
        cur = np.maximum(z, 0.0) if act == backend.ACT_RELU else z
    return margin


def _dense_gradcheck(seed, widths, acts):
    rng = np.random.default_rng(seed)
    net = DenseStack.create(widths, acts, rng)
    for _ in range(50):
        x = rng.normal(size=(4, widths[0]))
        if _relu_kink_margin(net, x) > 2e-4:
            break
    out0, _ = net.forward(x)
    target = out0 + 0.1 * rng.normal(size=out0.shape)

    def loss_fn():
        out, _ = net.forward(x)
        return mse_loss(out, target)[0]

    out, cache = net.forward(x)
    _loss, grad = mse_loss(out, target)
    grads, _gx = net.backward(cache, grad)
    return net, grads, loss_fn


class TestDense:
    def test_identity_linear(self, nn_backend):
        net = DenseStack([np.eye(3)], [np.zeros(3)], [backend.ACT_LINEAR])
        x = np.array([[1.0, -2.0, 0.5]])
        out, _ = net.forward(x)
        assert np.array_equal(out, x)

    def test_relu_clamps_negative(self, nn_backend):
        net = DenseStack([np.eye(2)], [np.array([-10.0, -10.0])],
                         [backend.ACT_RELU])
        out, _ = net.forward(np.array([[1.0, 2.0]]))
        assert np.array_equal(out, [[0.0, 0.0]])

    def test_width_mismatch(self, nn_backend):
        net = DenseStack.create([3, 4], ["linear"], np.random.default_rng(0))
        with pytest.raises(ConfigError):
            net.forward(np.ones((1, 5)))

    def test_gradcheck_spec_shape(self, nn_backend):
        """2 -> 64 -> 64 -> 9 relu net against central differences."""
        worst = 0.0
        for seed in range(N_SEEDS):
            net, grads, loss_fn = _dense_gradcheck(
                seed, [2, 64, 64, 9], ["relu", "relu", "linear"])
            worst = max(worst, max_rel_error(net.arrays(), grads, loss_fn))
        assert worst < GRAD_TOL

    def test_zero_grad_out_gives_zero_bundle(self, nn_backend):
        net = DenseStack.create([3, 5, 2], ["relu", "linear"],
                                np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(4, 3))
        _out, cache = net.forward(x)
        grads, gx = net.backward(cache, np.zeros((4, 2)))
        assert all(np.all(g == 0) for g in grads)
        assert np.all(gx == 0)

    def test_single_linear_layer_closed_form(self, nn_backend):
        rng = np.random.default_rng(5)
        net = DenseStack.create([3, 2], ["linear"], rng)
        x = rng.normal(size=(1, 3))
        g_out = rng.normal(size=(1, 2))
        _out, cache = net.forward(x)
        grads, _ = net.backward(cache, g_out)
        assert np.allclose(grads[0], np.outer(x[0], g_out[0]))
        assert np.allclose(grads[1], g_out[0])

    def test_batch_consistent_with_single(self, nn_backend):
        rng = np.random.default_rng(7)
        net = DenseStack.create([4, 8, 3], ["relu", "linear"], rng)
        xs = rng.normal(size=(10, 4))
        batch_out, _ = net.forward(xs)
        for i in range(10):
            single, _ = net.forward(xs[i:i + 1])
            assert np.allclose(single[0], batch_out[i], atol=1e-12)

    def test_corrupted_gradient_negative_control(self, nn_backend):
        net, grads, loss_fn = _dense_gradcheck(0, [2, 8, 3],
                                               ["relu", "linear"])
        bad = [-g for g in grads]
        assert max_rel_error(net.arrays(), bad, loss_fn) > 1e-1


def _lstm_gradcheck(seed, bidirectional, t_len=5):
    rng = np.random.default_rng(seed)
    stack = LstmStack.create(3, 4, 2, bidirectional, rng)
    x = rng.normal(size=(t_len, 2, 3))
    out0, _ = stack.forward(x)
    target = out0 + 0.1 * rng.normal(size=out0.shape)

    def loss_fn():
        out, _ = stack.forward(x)
        return mse_loss(out, target)[0]

    out, cache = stack.forward(x)
    _loss, grad = mse_loss(out, target)
    grads, _ = stack.backward(cache, grad)
    return stack, grads, loss_fn


class TestLstm:
    def test_single_step_bidirectional(self, nn_backend):
        rng = np.random.default_rng(0)
        stack = LstmStack.create(2, 3, 1, True, rng)
        out, _ = stack.forward(rng.normal(size=(1, 1, 2)))
        assert out.shape == (1, 1, 6)

    def test_zero_weights_give_zero_states(self, nn_backend):
        stack = LstmStack.create(2, 3, 2, True, np.random.default_rng(0))
        for directions in stack.layers:
            for layer in directions:
                layer.wx[...] = 0.0
                layer.wh[...] = 0.0
                layer.b[...] = 0.0
        out, _ = stack.forward(np.random.default_rng(1).normal(size=(4, 2, 2)))
        assert np.all(out == 0.0)

    def test_empty_sequence_rejected(self, nn_backend):
        stack = LstmStack.create(2, 3, 1, False, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            stack.forward(np.empty((0, 1, 2)))

    @pytest.mark.parametrize("bidirectional", [False, True])
    def test_gradcheck(self, nn_backend, bidirectional):
        worst = 0.0
        for seed in range(N_SEEDS):
            stack, grads, loss_fn = _lstm_gradcheck(seed, bidirectional)
            worst = max(worst, max_rel_error(stack.arrays(), grads, loss_fn))
        assert worst < GRAD_TOL

    def test_two_step_hand_chain(self, nn_backend):
        """Single cell, T=2, scalar weights: compare with a hand-expanded
        recurrence evaluated by the same finite-difference oracle."""
        rng = np.random.default_rng(3)
        stack = LstmStack.create(1, 1, 1, False, rng)
        x = np.array([[[0.7]], [[-0.4]]])

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        def manual(wx, wh, b):
            h = c = 0.0
            for t in range(2):
                g = x[t, 0, 0] * wx + h * wh + b
                i, f = sig(g[0]), sig(g[1])
                gc, o = np.tanh(g[2]), sig(g[3])
                c = f * c + i * gc
                h = o * np.tanh(c)
            return h

        layer = stack.layers[0][0]
        out, cache = stack.forward(x)
        assert out[1, 0, 0] == pytest.approx(
            manual(layer.wx[0], layer.wh[0], layer.b), abs=1e-12)
        grad = np.zeros_like(out)
        grad[1, 0, 0] = 1.0   # d h_2 / d params
        grads, _ = stack.backward(cache, grad)
        h = 1e-6
        for arr, g_arr in zip(stack.arrays(), grads):
            flat = arr.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                up = manual(layer.wx[0], layer.wh[0], layer.b)
                flat[j] = orig - h
                down = manual(layer.wx[0], layer.wh[0], layer.b)
                flat[j] = orig
                assert g_arr.reshape(-1)[j] == pytest.approx(
                    (up - down) / (2 * h), abs=1e-6)

    def test_zero_grad_gives_zero_bundle(self, nn_backend):
        stack = LstmStack.create(2, 3, 1, True, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(4, 2, 2))
        out, cache = stack.forward(x)
        grads, gx = stack.backward(cache, np.zeros_like(out))
        assert all(np.all(g == 0) for g in grads)
        assert np.all(gx == 0)


class TestCrossBackend:
    @pytest.mark.skipif(len(backend.available()) < 2,
                        reason="compiled kernels unavailable")
    def test_backends_agree(self):
        rng = np.random.default_rng(9)
        stack = LstmStack.create(3, 5, 2, True, rng)
        dense = DenseStack.create([4, 16, 3], ["relu", "linear"], rng)
        x_seq = rng.normal(size=(7, 3, 3))
        x = rng.normal(size=(6, 4))
        results = {}
        for name in backend.available():
            backend.use(name)
            out_seq, cache_seq = stack.forward(x_seq)
            gseq, _ = stack.backward(cache_seq, np.ones_like(out_seq))
            out, cache = dense.forward(x)
            gd, _ = dense.backward(cache, np.ones_like(out))
            results[name] = (out_seq, gseq, out, gd)
        a, b = (results[n] for n in backend.available())
        assert np.allclose(a[0], b[0], atol=1e-12)
        assert all(np.allclose(u, v, atol=1e-10) for u, v in zip(a[1], b[1]))
        assert np.allclose(a[2], b[2], atol=1e-12)
        assert all(np.allclose(u, v, atol=1e-10) for u, v in zip(a[3], b[3]))


class TestLosses:
    def test_uniform_logits_loss_is_log_k(self):
        for k in (2, 5, 32):
            loss, _ = softmax_xent(np.zeros((1, k)), [0])
            assert loss == pytest.approx(np.log(k), abs=1e-12)

    def test_saturated_correct_class(self):
        loss, _ = softmax_xent(np.array([[50.0, 0.0]]), [0])
        assert 0 <= loss < 1e-20

    def test_two_class_closed_form(self):
        loss, grad = softmax_xent(np.array([[0.0, 0.0]]), [0])
        assert loss == pytest.approx(np.log(2), abs=1e-12)
        assert np.allclose(grad, [[-0.5, 0.5]])

    def test_xent_nonnegative_random(self, rng):
        for _ in range(50):
            logits = rng.normal(size=(3, 6)) * 3
            targets = rng.integers(0, 6, size=3)
            loss, _ = softmax_xent(logits, targets)
            assert loss >= 0.0

    def test_nonfinite_logits_rejected(self):
        with pytest.raises(DataError):
            softmax_xent(np.array([[np.inf, 0.0]]), [0])

    def test_xent_gradcheck(self, nn_backend):
        worst = 0.0
        for seed in range(N_SEEDS):
            rng = np.random.default_rng(seed)
            logits = rng.normal(size=(4, 5))
            targets = rng.integers(0, 5, size=4)
            _loss, grad = softmax_xent(logits, targets)
            params = [logits]
            worst = max(worst, max_rel_error(
                params, [grad], lambda: softmax_xent(logits, targets)[0]))
        assert worst < GRAD_TOL

    def test_mse_trivials(self):
        x = np.array([1.0, 2.0, 3.0])
        assert mse_loss(x, x)[0] == 0.0
        assert mse_loss(x + 1.0, x)[0] == pytest.approx(1.0)
        with pytest.raises(DataError):
            mse_loss(np.ones(3), np.ones(4))

    def test_mse_gradient_exact(self, rng):
        pred = rng.normal(size=8)
        target = rng.normal(size=8)
        _loss, grad = mse_loss(pred, target)
        err = max_rel_error([pred], [grad],
                            lambda: mse_loss(pred, target)[0], h=1e-6)
        assert err < 1e-7  # quadratic: central differences are near-exact

    def test_bce_matches_brute_force(self, rng):
        logits = rng.normal(size=(3, 4))
        targets = (rng.random((3, 4)) < 0.5).astype(float)
        loss, grad = sigmoid_bce(logits, targets)
        p = 1 / (1 + np.exp(-logits))
        brute = -np.mean(targets * np.log(p) + (1 - targets) * np.log(1 - p))
        assert loss == pytest.approx(brute, abs=1e-12)
        err = max_rel_error([logits], [grad],
                            lambda: sigmoid_bce(logits, targets)[0])
        assert err < GRAD_TOL


class TestRmsProp:
    def test_zero_gradient_decays_accumulator(self):
        opt = RmsProp(0.001)
        p = np.array([1.0])
        opt.apply([p], [np.array([1.0])])
        v_before = opt.accumulators[0].copy()
        p_before = p.copy()
        opt.apply([p], [np.array([0.0])])
        assert p[0] == p_before[0]
        assert opt.accumulators[0][0] == pytest.approx(0.99 * v_before[0])

    def test_hand_arithmetic_first_step(self):
        opt = RmsProp(0.001, rho=0.99, eps=1e-8)
        p = np.array([0.0])
        opt.apply([p], [np.array([1.0])])
        assert opt.accumulators[0][0] == pytest.approx(0.01)
        assert p[0] == pytest.approx(-0.001 / np.sqrt(0.01 + 1e-8), rel=1e-9)

    def test_constant_gradient_step_approaches_lr(self):
        opt = RmsProp(0.001)
        p = np.array([0.0])
        prev = 0.0
        for _ in range(3000):
            prev = p[0]
            opt.apply([p], [np.array([1.0])])
        assert abs(p[0] - prev) == pytest.approx(0.001, rel=1e-2)

    def test_finite_params_fuzz(self, rng):
        opt = RmsProp(0.01)
        p = rng.normal(size=50)
        for _ in range(200):
            opt.apply([p], [rng.normal(size=50) * 100])
            assert np.all(np.isfinite(p))

    def test_shape_mismatch_rejected(self):
        opt = RmsProp(0.001)
        with pytest.raises(ConfigError):
            opt.apply([np.zeros(3)], [np.zeros(4)])
