import numpy as np
import pytest

from spoofbench import nn

RNG = np.random.default_rng(0)


def fd_input_check(layer, x, train, h=1e-6, tol=1e-6):
    """Directional FD check of a layer's input gradient in float64."""
    rng = np.random.default_rng(99)
    y = layer.forward(x, train=train)
    upstream = rng.normal(0, 1, y.shape)
    dx = layer.backward(upstream.copy(), need_param_grads=train)
    v = rng.normal(0, 1, x.shape)
    lp = float((layer.forward(x + h * v, train=train) * upstream).sum())
    lm = float((layer.forward(x - h * v, train=train) * upstream).sum())
    # restore cache for callers that keep using the layer
    layer.forward(x, train=train)
    fd = (lp - lm) / (2 * h)
    analytic = float((dx * v).sum())
    assert abs(fd - analytic) <= tol * max(abs(fd), abs(analytic), 1.0)


class TestConv:
    def test_conv2d_shapes(self):
        conv = nn.Conv2d(3, 8, 3, (2, 2), 1, RNG)
        y = conv.forward(np.zeros((2, 3, 9, 7), dtype=np.float32))
        assert y.shape == (2, 8, 5, 4)

    def test_conv2d_gradients(self):
        conv = nn.Conv2d(2, 4, 3, (2, 1), 1, np.random.default_rng(1))
        x = np.random.default_rng(2).normal(0, 1, (3, 2, 8, 6))
        fd_input_check(conv, x, train=True)

    def test_conv1d_gradients(self):
        conv = nn.Conv1d(2, 4, 5, 3, 2, np.random.default_rng(3))
        x = np.random.default_rng(4).normal(0, 1, (2, 2, 31))
        fd_input_check(conv, x, train=True)

    def test_conv2d_weight_gradient(self):
        conv = nn.Conv2d(1, 2, 3, 1, 1, np.random.default_rng(5))
        x = np.random.default_rng(6).normal(0, 1, (2, 1, 6, 6))
        y = conv.forward(x, train=True)
        upstream = np.random.default_rng(7).normal(0, 1, y.shape)
        conv.backward(upstream, need_param_grads=True)
        g = conv.grads["weight"]
        h = 1e-4
        idx = (1, 0, 2, 1)
        orig = conv.params["weight"].copy().astype(np.float64)
        conv.params["weight"] = orig.copy()
        conv.params["weight"][idx] += h
        lp = float((conv.forward(x, train=True) * upstream).sum())
        conv.params["weight"] = orig.copy()
        conv.params["weight"][idx] -= h
        lm = float((conv.forward(x, train=True) * upstream).sum())
        fd = (lp - lm) / (2 * h)
        assert abs(fd - g[idx]) <= 1e-5 * max(abs(fd), 1.0)

    def test_eval_backward_refuses_param_grads(self):
        conv = nn.Conv2d(1, 2, 3, 1, 1, RNG)
        y = conv.forward(np.zeros((1, 1, 5, 5), dtype=np.float32), train=False)
        with pytest.raises(RuntimeError):
            conv.backward(np.zeros_like(y), need_param_grads=True)


class TestBatchNorm:
    def test_train_normalizes(self):
        bn = nn.BatchNorm(4)
        x = np.random.default_rng(8).normal(3, 2, (16, 4, 10)).astype(np.float32)
        y = bn.forward(x, train=True)
        assert np.abs(y.mean(axis=(0, 2))).max() < 1e-5
        assert np.abs(y.std(axis=(0, 2)) - 1).max() < 1e-3

    def test_train_gradients(self):
        bn = nn.BatchNorm(3)
        bn.params["gamma"] = np.array([1.5, 0.5, -0.7], dtype=np.float32)
        x = np.random.default_rng(9).normal(0, 2, (4, 3, 5, 5))
        fd_input_check(bn, x, train=True, tol=1e-5)

    def test_eval_gradients(self):
        bn = nn.BatchNorm(3)
        bn.params["running_mean"] = np.array([0.5, -1.0, 2.0], dtype=np.float32)
        bn.params["running_var"] = np.array([1.5, 0.2, 3.0], dtype=np.float32)
        x = np.random.default_rng(10).normal(0, 2, (4, 3, 7))
        fd_input_check(bn, x, train=False)

    def test_running_stats_update(self):
        bn = nn.BatchNorm(2, momentum=0.5)
        x = np.concatenate([np.zeros((8, 1, 4)), np.ones((8, 1, 4))], axis=1)
        bn.forward(x.astype(np.float32), train=True)
        np.testing.assert_allclose(bn.params["running_mean"], [0.0, 0.5])


class TestPools:
    @pytest.mark.parametrize("layer,shape", [
        (nn.MaxPool2d(2), (2, 3, 8, 6)),
        (nn.MaxPool2d((4, 2)), (2, 3, 8, 6)),
        (nn.AvgPool2d(2), (2, 3, 8, 6)),
        (nn.AvgPool2d((4, 2)), (2, 3, 9, 7)),
        (nn.MaxPool1d(4), (2, 3, 21)),
        (nn.AvgPool1d(4), (2, 3, 21)),
        (nn.GlobalAvgPool2d(), (2, 3, 5, 4)),
        (nn.GlobalMaxAvgPool1d(), (2, 3, 17)),
    ])
    def test_gradients(self, layer, shape):
        x = np.random.default_rng(11).normal(0, 1, shape)
        fd_input_check(layer, x, train=False)

    def test_maxpool_values(self):
        pool = nn.MaxPool1d(2)
        x = np.array([[[1.0, 3.0, -2.0, 0.0]]])
        np.testing.assert_array_equal(pool.forward(x), [[[3.0, 0.0]]])

    def test_global_maxavg_concat(self):
        pool = nn.GlobalMaxAvgPool1d()
        x = np.array([[[1.0, 3.0], [-1.0, -5.0]]])
        np.testing.assert_allclose(pool.forward(x), [[3.0, -1.0, 2.0, -3.0]])


class TestSimpleLayers:
    def test_relu(self):
        relu = nn.ReLU()
        x = np.array([[-1.0, 2.0]])
        np.testing.assert_array_equal(relu.forward(x), [[0.0, 2.0]])
        np.testing.assert_array_equal(relu.backward(np.ones((1, 2))), [[0.0, 1.0]])

    def test_square_and_log_gradients(self):
        x = np.abs(np.random.default_rng(12).normal(1, 0.3, (2, 3, 8))) + 0.1
        fd_input_check(nn.Square(), x, train=False)
        fd_input_check(nn.LogEps(1e-6), x, train=False)

    def test_scale_eval_only(self):
        scale = nn.Scale(10.0)
        x = np.ones((1, 2), dtype=np.float32)
        np.testing.assert_array_equal(scale.forward(x, train=True), x)
        np.testing.assert_array_equal(scale.forward(x, train=False), 10 * x)

    def test_linear_gradients(self):
        lin = nn.Linear(6, 3, np.random.default_rng(13))
        x = np.random.default_rng(14).normal(0, 1, (4, 6))
        fd_input_check(lin, x, train=True)

    def test_spectral_split_adjoint(self):
        split = nn.SpectralSplit(2900.0, 3100.0, 16000, high_gain=256.0)
        rng = np.random.default_rng(15)
        x = rng.normal(0, 0.3, (2, 1, 512))
        y = split.forward(x)
        assert y.shape == (2, 2, 512)
        upstream = rng.normal(0, 1, y.shape)
        dx = split.backward(upstream)
        v = rng.normal(0, 1, x.shape)
        h = 1e-6
        lp = float((split.forward(x + h * v) * upstream).sum())
        lm = float((split.forward(x - h * v) * upstream).sum())
        fd = (lp - lm) / (2 * h)
        assert abs(fd - float((dx * v).sum())) <= 1e-6 * abs(fd)

    def test_feature_norm_shapes(self):
        fnorm = nn.FeatureNorm(3, 20)
        x = np.random.default_rng(16).normal(0, 1, (4, 3, 20, 7)).astype(np.float32)
        y = fnorm.forward(x, train=True)
        assert y.shape == x.shape
        fd_input_check(fnorm, x.astype(np.float64), train=False)


class TestSoftmaxCrossEntropy:
    def test_loss_is_neg_log_prob(self):
        logits = np.array([[2.0, -1.0]])
        targets = np.array([0])
        loss, _ = nn.softmax_cross_entropy(logits, targets)
        p = np.exp(2.0) / (np.exp(2.0) + np.exp(-1.0))
        assert loss[0] == pytest.approx(-np.log(p))

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(17)
        logits = rng.normal(0, 5, (32, 2))
        targets = rng.integers(0, 2, 32)
        loss, _ = nn.softmax_cross_entropy(logits, targets)
        assert (loss >= 0).all()

    def test_gradient(self):
        logits = np.array([[0.3, -0.2], [1.0, 4.0]])
        targets = np.array([1, 0])
        _, grad = nn.softmax_cross_entropy(logits, targets)
        h = 1e-6
        for i in range(2):
            for j in range(2):
                lp = logits.copy()
                lp[i, j] += h
                lm = logits.copy()
                lm[i, j] -= h
                fd = (nn.softmax_cross_entropy(lp, targets)[0][i]
                      - nn.softmax_cross_entropy(lm, targets)[0][i]) / (2 * h)
                assert fd == pytest.approx(grad[i, j], rel=1e-5)

    def test_shift_invariance_of_argmax(self):
        rng = np.random.default_rng(18)
        logits = rng.normal(0, 3, (64, 2))
        shifted = logits + rng.normal(0, 10, (64, 1))
        assert (logits.argmax(1) == shifted.argmax(1)).all()

    def test_underflow_freezes_gradient(self):
        # beyond a ~104 logit gap the float32 softmax underflows to exact
        # zero gradient, which is what lets sign attacks reach a fixed point
        logits = np.array([[120.0, 0.0]], dtype=np.float32)
        loss, grad = nn.softmax_cross_entropy(logits, np.array([0]))
        assert loss[0] == 0.0
        assert (grad == 0).all()


def tiny_net(seed=0):
    rng = np.random.default_rng(seed)
    return nn.Sequential([
        ("conv", nn.Conv1d(1, 4, 3, 1, 1, rng)),
        ("bn", nn.BatchNorm(4)),
        ("relu", nn.ReLU()),
        ("pool", nn.GlobalMaxAvgPool1d()),
        ("head", nn.Linear(8, 2, rng)),
    ])


class TestOptimizers:
    @pytest.mark.parametrize("make", [
        lambda net: nn.MomentumSGD(net, 1e-2),
        lambda net: nn.Adam(net, 1e-3),
    ])
    def test_reduces_loss(self, make):
        net = tiny_net(1)
        opt = make(net)
        rng = np.random.default_rng(2)
        x = rng.normal(0, 1, (32, 1, 16)).astype(np.float32)
        y = (x.mean(axis=(1, 2)) > 0).astype(int)
        losses = []
        for _ in range(30):
            logits = net.forward(x, train=True)
            loss, dl = nn.softmax_cross_entropy(logits, y)
            losses.append(loss.mean())
            net.backward(dl / np.float32(len(y)))
            opt.step()
        assert losses[-1] < losses[0]

    def test_never_touches_running_stats(self):
        net = tiny_net(3)
        opt = nn.Adam(net, 1e-3)
        x = np.random.default_rng(4).normal(0, 1, (8, 1, 16)).astype(np.float32)
        logits = net.forward(x, train=True)
        _, dl = nn.softmax_cross_entropy(logits, np.zeros(8, dtype=int))
        net.backward(dl / np.float32(8))
        bn = dict(net.walk())["bn"]
        rm_before = bn.params["running_mean"].copy()
        opt.step()
        np.testing.assert_array_equal(bn.params["running_mean"], rm_before)

    def test_deterministic(self):
        results = []
        for _ in range(2):
            net = tiny_net(5)
            opt = nn.Adam(net, 1e-3)
            x = np.random.default_rng(6).normal(0, 1, (8, 1, 16)).astype(np.float32)
            for _ in range(5):
                logits = net.forward(x, train=True)
                _, dl = nn.softmax_cross_entropy(logits, np.array([0, 1] * 4))
                net.backward(dl / np.float32(8))
                opt.step()
            results.append({k: v.copy() for k, v in net.named_params()})
        for key in results[0]:
            np.testing.assert_array_equal(results[0][key], results[1][key])


class TestResidual:
    def test_gradients_through_skip(self):
        rng = np.random.default_rng(7)
        block = nn.Residual(nn.Sequential([
            ("conv1", nn.Conv1d(3, 3, 3, 1, 1, rng)),
            ("bn1", nn.BatchNorm(3)),
            ("relu", nn.ReLU()),
            ("conv2", nn.Conv1d(3, 3, 3, 1, 1, rng)),
            ("bn2", nn.BatchNorm(3)),
        ]))
        x = np.random.default_rng(8).normal(0, 1, (2, 3, 12))
        fd_input_check(block, x, train=True, tol=1e-5)

    def test_walk_reaches_nested_layers(self):
        net = tiny_net(9)
        names = [name for name, _ in net.walk()]
        assert names == ["conv", "bn", "relu", "pool", "head"]
