"""Layer math: direct-summation oracles, finite differences, optimizer."""

import math

import numpy as np
import pytest

from actcomp.errors import DataError, DimensionError
from actcomp.nn import (
    LayerSpec,
    Network,
    OptimizerState,
    conv2d_backward,
    conv2d_forward,
    default_conv_net,
    fc_backward,
    fc_forward,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    softmax_xent,
)

# ---- direct-summation oracles (slow, followed exactly as documented) ----


def conv_forward_oracle(x, w, b, stride, pad):
    B, C, H, W = x.shape
    K, _, kh, kw = w.shape
    Y = (H + 2 * pad - kh) // stride + 1
    X = (W + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty((B, K, Y, X))
    for bi in range(B):
        for k in range(K):
            for y in range(Y):
                for xx in range(X):
                    acc = b[k]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc = acc + xp[bi, c, y * stride + u, xx * stride + v] * w[k, c, u, v]
                    out[bi, k, y, xx] = acc
    return out


def conv_backward_oracle(x, gy, w, stride, pad):
    B, C, H, W = x.shape
    K, _, kh, kw = w.shape
    _, _, Y, X = gy.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    gw = np.zeros((K, C, kh, kw))
    gb = np.zeros(K)
    for k in range(K):
        for c in range(C):
            for u in range(kh):
                for v in range(kw):
                    total = 0.0
                    for bi in range(B):
                        sub = 0.0
                        for y in range(Y):
                            for xx in range(X):
                                sub = sub + gy[bi, k, y, xx] * xp[bi, c, y * stride + u, xx * stride + v]
                        total = total + sub
                    gw[k, c, u, v] = total / B
    for k in range(K):
        total = 0.0
        for bi in range(B):
            sub = 0.0
            for y in range(Y):
                for xx in range(X):
                    sub = sub + gy[bi, k, y, xx]
            total = total + sub
        gb[k] = total / B
    gx = np.zeros_like(x)
    for bi in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    acc = 0.0
                    for k in range(K):
                        for u in range(kh):
                            for v in range(kw):
                                yi, xi = i + pad - u, j + pad - v
                                if yi % stride or xi % stride:
                                    continue
                                y, xx = yi // stride, xi // stride
                                if 0 <= y < Y and 0 <= xx < X:
                                    acc = acc + w[k, c, u, v] * gy[bi, k, y, xx]
                    gx[bi, c, i, j] = acc
    return gw, gb, gx


def _rand(rng, *shape):
    return rng.uniform(-1, 1, size=shape)


class TestConvForward:
    def test_scalar_case(self):
        x = np.array([[[[2.0]]]])
        w = np.array([[[[3.0]]]])
        b = np.array([0.5])
        assert conv2d_forward(x, w, b)[0, 0, 0, 0] == 3.0 * 2.0 + 0.5

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = _rand(rng, 2, 3, 5, 5)
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = conv2d_forward(x, w, np.zeros(3), stride=1, pad=1)
        assert np.array_equal(out, x)

    def test_matches_direct_summation_bitexact(self):
        rng = np.random.default_rng(1)
        x = _rand(rng, 1, 3, 4, 4)
        w = _rand(rng, 2, 3, 2, 2)
        b = _rand(rng, 2)
        got = conv2d_forward(x, w, b, stride=1, pad=0)
        want = conv_forward_oracle(x, w, b, stride=1, pad=0)
        assert np.array_equal(got, want)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_stride_pad_variants_bitexact(self, stride, pad):
        rng = np.random.default_rng(2 + stride + pad)
        x = _rand(rng, 2, 2, 6, 5)
        w = _rand(rng, 3, 2, 3, 3)
        b = _rand(rng, 3)
        got = conv2d_forward(x, w, b, stride=stride, pad=pad)
        want = conv_forward_oracle(x, w, b, stride=stride, pad=pad)
        assert np.array_equal(got, want)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 2, 2)), np.zeros(1))


class TestConvBackward:
    def test_zero_loss_grad(self):
        rng = np.random.default_rng(3)
        x = _rand(rng, 2, 2, 4, 4)
        w = _rand(rng, 2, 2, 2, 2)
        gw, gb, gx = conv2d_backward(x, np.zeros((2, 2, 3, 3)), w)
        assert not gw.any() and not gb.any() and not gx.any()

    def test_1x1_conv_weight_grad_is_batch_mean(self):
        rng = np.random.default_rng(4)
        B, C, K = 3, 2, 2
        x = _rand(rng, B, C, 4, 4)
        gy = _rand(rng, B, K, 4, 4)
        w = _rand(rng, K, C, 1, 1)
        gw, _, _ = conv2d_backward(x, gy, w)
        for k in range(K):
            for c in range(C):
                direct = np.mean(
                    [float((x[bi, c] * gy[bi, k]).sum()) for bi in range(B)]
                )
                assert gw[k, c, 0, 0] == pytest.approx(direct, rel=1e-12)

    def test_matches_direct_summation_bitexact(self):
        rng = np.random.default_rng(5)
        x = _rand(rng, 4, 4, 8, 8)
        w = _rand(rng, 3, 4, 3, 3)
        gy = _rand(rng, 4, 3, 6, 6)
        got = conv2d_backward(x, gy, w, stride=1, pad=0)
        want = conv_backward_oracle(x, gy, w, stride=1, pad=0)
        for g, o in zip(got, want):
            assert np.array_equal(g, o)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0), (2, 1)])
    def test_stride_pad_variants_bitexact(self, stride, pad):
        rng = np.random.default_rng(6 + stride * 3 + pad)
        x = _rand(rng, 2, 2, 6, 6)
        w = _rand(rng, 2, 2, 3, 3)
        Y = (6 + 2 * pad - 3) // stride + 1
        gy = _rand(rng, 2, 2, Y, Y)
        got = conv2d_backward(x, gy, w, stride=stride, pad=pad)
        want = conv_backward_oracle(x, gy, w, stride=stride, pad=pad)
        for g, o in zip(got, want):
            assert np.array_equal(g, o)

    def test_input_grad_invariant_to_activation(self):
        # error in stored activations must not leak across layers
        rng = np.random.default_rng(7)
        x = _rand(rng, 2, 3, 5, 5)
        w = _rand(rng, 2, 3, 3, 3)
        gy = _rand(rng, 2, 2, 3, 3)
        _, _, gx_clean = conv2d_backward(x, gy, w)
        perturbed = x + rng.uniform(-0.5, 0.5, size=x.shape)
        _, _, gx_pert = conv2d_backward(perturbed, gy, w)
        assert np.array_equal(gx_clean, gx_pert)


def finite_difference_check(params, loss_fn, grad, h=1e-5, rel=1e-4):
    """Central differences on every element of ``params``."""
    flat = params.reshape(-1)
    num = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        num[i] = (lp - lm) / (2 * h)
    num = num.reshape(params.shape)
    scale = np.maximum(np.abs(num), np.abs(grad))
    mask = scale > 1e-8
    if mask.any():
        rel_err = np.abs(num - grad)[mask] / scale[mask]
        assert rel_err.max() < rel, f"max rel err {rel_err.max():.2e}"
    assert np.allclose(num[~mask], grad[~mask], atol=1e-7)


class TestFiniteDifferences:
    def test_conv_weights_bias_input(self):
        rng = np.random.default_rng(8)
        x = _rand(rng, 2, 2, 5, 5)
        w = _rand(rng, 3, 2, 3, 3)
        b = _rand(rng, 3)
        coeff = _rand(rng, 2, 3, 5, 5)  # fixed projection, pad-preserving conv

        def loss():
            return float((conv2d_forward(x, w, b, 1, 1) * coeff).sum())

        gy = coeff  # dL/dout
        gw, gb, gx = conv2d_backward(x, gy, w, 1, 1)
        # weight/bias grads are batch-averaged; dL/dw of this scalar loss is
        # the batch sum, so compare against B * grad
        B = x.shape[0]
        finite_difference_check(w, loss, gw * B)
        finite_difference_check(b, loss, gb * B)
        finite_difference_check(x, loss, gx)

    def test_fc(self):
        rng = np.random.default_rng(9)
        x = _rand(rng, 4, 6)
        w = _rand(rng, 6, 3)
        b = _rand(rng, 3)
        coeff = _rand(rng, 4, 3)

        def loss():
            return float((fc_forward(x, w, b) * coeff).sum())

        gw, gb, gx = fc_backward(x, coeff, w)
        finite_difference_check(w, loss, gw * 4)
        finite_difference_check(b, loss, gb * 4)
        finite_difference_check(x, loss, gx)

    def test_relu(self):
        rng = np.random.default_rng(10)
        x = rng.uniform(0.1, 1, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
        coeff = _rand(rng, 3, 4)

        def loss():
            return float((relu_forward(x) * coeff).sum())

        finite_difference_check(x, loss, relu_backward(coeff, x))

    def test_maxpool(self):
        rng = np.random.default_rng(11)
        x = _rand(rng, 2, 2, 6, 6)
        _, arg = maxpool_forward(x, 2, 2)
        coeff = _rand(rng, 2, 2, 3, 3)

        def loss():
            pooled, _ = maxpool_forward(x, 2, 2)
            return float((pooled * coeff).sum())

        gx = maxpool_backward(coeff, arg, x.shape, 2, 2)
        finite_difference_check(x, loss, gx)

    def test_softmax_xent(self):
        rng = np.random.default_rng(12)
        logits = _rand(rng, 5, 4)
        labels = rng.integers(0, 4, size=5)

        def loss():
            return softmax_xent(logits, labels)[0]

        _, grad = softmax_xent(logits, labels)
        finite_difference_check(logits, loss, grad)


class TestSimpleLayers:
    def test_relu_definition(self):
        assert np.array_equal(relu_forward(np.array([-1.0, 2.0])), [0.0, 2.0])

    def test_maxpool_definition_and_routing(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        pooled, arg = maxpool_forward(x, 2, 2)
        assert pooled[0, 0, 0, 0] == 4.0
        gx = maxpool_backward(np.ones((1, 1, 1, 1)), arg, x.shape, 2, 2)
        assert gx[0, 0, 1, 1] == 1.0
        assert gx.sum() == 1.0

    def test_maxpool_tie_goes_to_first_offset(self):
        x = np.full((1, 1, 2, 2), 7.0)
        _, arg = maxpool_forward(x, 2, 2)
        assert arg[0, 0, 0, 0] == 0

    def test_softmax_uniform_logits(self):
        loss, grad = softmax_xent(np.zeros((3, 10)), np.array([1, 5, 9]))
        assert loss == pytest.approx(math.log(10))
        assert np.allclose(grad.sum(axis=1), 0.0, atol=1e-15)

    def test_softmax_label_out_of_range(self):
        with pytest.raises(DataError):
            softmax_xent(np.zeros((1, 3)), np.array([3]))

    def test_softmax_per_sample_convention(self):
        logits = np.random.default_rng(0).normal(size=(4, 3))
        labels = np.array([0, 1, 2, 0])
        _, averaged = softmax_xent(logits, labels, batch_average=True)
        _, per_sample = softmax_xent(logits, labels, batch_average=False)
        assert np.allclose(per_sample / 4, averaged)


class TestOptimizer:
    def test_zero_momentum_is_plain_sgd(self):
        opt = OptimizerState(lr=0.1, momentum=0.0)
        p = {"w": np.array([1.0])}
        g = {"w": np.array([2.0])}
        out = opt.step(p, g)
        assert out["w"][0] == pytest.approx(1.0 - 0.1 * 2.0)

    def test_velocity_decays_geometrically(self):
        opt = OptimizerState(lr=1.0, momentum=0.5)
        p = {"w": np.array([0.0])}
        opt.step(p, {"w": np.array([1.0])})
        for _ in range(3):
            opt.step(p, {"w": np.array([0.0])})
        assert opt.velocities["w"][0] == pytest.approx(0.5**3)

    def test_two_step_hand_recurrence(self):
        opt = OptimizerState(lr=1.0, momentum=0.9)
        p = {"w": np.array([10.0])}
        p = opt.step(p, {"w": np.array([1.0])})
        assert opt.velocities["w"][0] == 1.0
        p = opt.step(p, {"w": np.array([1.0])})
        assert opt.velocities["w"][0] == pytest.approx(1.9)
        assert p["w"][0] == pytest.approx(10.0 - 2.9)

    def test_mean_abs_velocity(self):
        opt = OptimizerState(lr=1.0, momentum=0.0)
        opt.step({"w": np.zeros(2)}, {"w": np.array([-1.0, 3.0])})
        assert opt.mean_abs_velocity("w") == 2.0
        assert opt.mean_abs_velocity("missing") == 0.0


class TestNetwork:
    def test_shapes_chain_and_forward(self):
        net = Network(default_conv_net(10, 28), (1, 28, 28), seed=0)
        logits = net.forward(np.zeros((2, 1, 28, 28)))
        assert logits.shape == (2, 10)

    def test_init_deterministic_under_seed(self):
        a = Network(default_conv_net(10, 28), (1, 28, 28), seed=3)
        b = Network(default_conv_net(10, 28), (1, 28, 28), seed=3)
        for (na, pa), (nb, pb) in zip(a.param_items(), b.param_items()):
            assert na == nb
            assert np.array_equal(pa, pb)

    def test_inconsistent_chain_rejected(self):
        specs = [LayerSpec.conv2d(1, 4, 3), LayerSpec.fc(999, 10)]
        with pytest.raises(DimensionError):
            Network(specs, (1, 28, 28), seed=0)
