import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdtrack.convnet import (ConvLayer, HeadNet, SelectorNet, TrainSpec, backward_and_step,
                             conv_forward, load_net, loss_and_grads, predict, save_net, train)
from sdtrack.oracles import naive_conv, numeric_gradients


def _max_rel_err(net, x, t, weight=None):
    _, grads = loss_and_grads(net, x, t, weight)
    num = numeric_gradients(lambda: loss_and_grads(net, x, t, weight)[0], net.parameters())
    worst = 0.0
    for g, n in zip(grads, num):
        rel = np.abs(g - n) / np.maximum(np.abs(g) + np.abs(n), 1e-8)
        worst = max(worst, float(rel.max()))
    return worst


class TestForward:
    def test_identity_kernel(self):
        sel = SelectorNet.create(1, dropout_ratio=0.0, k=1)
        sel.conv.weight[...] = 1.0
        x = np.random.default_rng(0).random((1, 7, 9))
        assert np.array_equal(predict(sel, x), x[0])

    @pytest.mark.parametrize("b", [-0.3, 0.0, 0.4])
    def test_zero_kernels_give_bias(self, b):
        l1 = ConvLayer(np.zeros((1, 3, 9, 9)), np.array([b]), "relu")
        l2 = ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1), "identity")
        out = HeadNet(l1, l2).forward(np.random.default_rng(1).random((3, 8, 8)))
        assert np.allclose(out, max(b, 0.0))

    @pytest.mark.parametrize("k", [1, 3, 5, 9])
    def test_naive_oracle(self, k):
        rng = np.random.default_rng(k)
        layer = ConvLayer(rng.normal(size=(2, 3, k, k)), rng.normal(size=2))
        x = rng.normal(size=(3, 8, 8))
        y, _ = conv_forward(layer, x)
        assert np.max(np.abs(y - naive_conv(layer.weight, layer.bias, x))) < 1e-10

    def test_head_vs_naive(self):
        rng = np.random.default_rng(3)
        net = HeadNet.create(3, hidden=4, seed=5, std=0.3)
        x = rng.normal(size=(3, 8, 8))
        l1, l2 = net.layers
        hid = np.maximum(naive_conv(l1.weight, l1.bias, x), 0)
        ref = naive_conv(l2.weight, l2.bias, hid)[0]
        assert np.max(np.abs(net.forward(x) - ref)) < 1e-10
        assert net.forward(x).shape == (8, 8)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="input channels"):
            HeadNet.create(4).forward(np.zeros((3, 10, 10)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            ConvLayer(np.zeros((1, 1, 4, 4)), np.zeros(1))

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-3, 3), st.integers(0, 10 ** 6))
    def test_linear_when_identity(self, alpha, seed):
        rng = np.random.default_rng(seed)
        l1 = ConvLayer(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2), "identity")
        l2 = ConvLayer(rng.normal(size=(1, 2, 3, 3)), rng.normal(size=1), "identity")
        net = HeadNet(l1, l2)
        x = rng.normal(size=(2, 6, 6))
        f0 = net.forward(np.zeros_like(x))
        assert np.allclose(net.forward(alpha * x) - f0, alpha * (net.forward(x) - f0), atol=1e-9)


class TestDropout:
    def test_eval_is_identity(self):
        sel = SelectorNet.create(2, dropout_ratio=0.3, seed=1, std=0.5)
        x = np.random.default_rng(2).random((2, 10, 10))
        assert np.array_equal(predict(sel, x), predict(sel, x))

    def test_train_mode_inverted_scaling(self):
        sel = SelectorNet.create(1, dropout_ratio=0.3, seed=3, k=1)
        sel.conv.weight[...] = 1.0
        sel.training = True
        x = np.ones((1, 60, 60))
        outs = np.stack([sel.forward(x) for _ in range(50)])
        assert outs.mean() == pytest.approx(1.0, abs=0.01)
        assert outs.var() > 0
        assert set(np.unique(np.round(outs, 9))) <= {0.0, round(1 / 0.7, 9)}


class TestGradients:
    def test_zero_input_zero_target(self):
        net = HeadNet.create(2, hidden=3, seed=0, std=0.3, k1=3, k2=3)
        net.layers[0].bias[:] = -0.5  # hidden units dead: only the output bias matters
        net.layers[1].bias[:] = 0.3
        x = np.zeros((2, 6, 6))
        loss, grads = loss_and_grads(net, x, np.zeros((6, 6)))
        assert loss == pytest.approx(36 * 0.09)
        dk1, db1, dk2, db2 = grads
        assert not dk1.any() and not db1.any() and not dk2.any()
        assert db2[0] == pytest.approx(2 * 0.3 * 36)

    def test_head_finite_differences(self):
        rng = np.random.default_rng(0)
        net = HeadNet.create(2, hidden=3, seed=1, std=0.3, k1=3, k2=3)
        net.layers[0].bias[:] = rng.normal(0, 0.1, 3)
        x, t = rng.normal(size=(2, 6, 6)), rng.normal(size=(6, 6))
        assert _max_rel_err(net, x, t) < 1e-4

    def test_full_size_kernels(self):
        # the 9x9 and 5x5 shapes the tracker uses, at reduced channel counts
        rng = np.random.default_rng(1)
        net = HeadNet.create(2, hidden=2, seed=2, std=0.2)
        x, t = rng.normal(size=(2, 10, 10)), rng.normal(size=(10, 10))
        assert _max_rel_err(net, x, t) < 1e-4

    def test_selector_finite_differences(self):
        rng = np.random.default_rng(2)
        sel = SelectorNet.create(3, seed=3, std=0.3)
        x, t = rng.normal(size=(3, 6, 6)), rng.normal(size=(6, 6))
        assert _max_rel_err(sel, x, t) < 1e-4

    def test_weighted_loss(self):
        rng = np.random.default_rng(3)
        net = HeadNet.create(2, hidden=2, seed=4, std=0.3, k1=3, k2=3)
        x, t = rng.normal(size=(2, 6, 6)), rng.normal(size=(6, 6))
        w = (rng.random((6, 6)) > 0.5).astype(float)
        assert _max_rel_err(net, x, t, w) < 1e-4


class TestTraining:
    def test_monotone_small_lr(self):
        rng = np.random.default_rng(0)
        net = HeadNet.create(3, hidden=4, seed=0, std=0.1, k1=5, k2=3)
        x, t = rng.normal(size=(3, 12, 12)), rng.random((12, 12))
        _, losses = train(net, x, t, TrainSpec(50, 1e-4))
        assert all(b <= a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]

    def test_reachable_target(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 10, 10))
        teacher = ConvLayer(rng.normal(size=(1, 2, 3, 3)), np.array([0.2]))
        t = conv_forward(teacher, x)[0][0]
        sel = SelectorNet.create(2, dropout_ratio=0.0, seed=2)
        first = loss_and_grads(sel, x, t)[0]
        _, losses = train(sel, x, t, TrainSpec(400, 2e-3))
        final = loss_and_grads(sel, x, t)[0]
        assert final < 1e-3 * first
        assert sel.trained

    def test_zero_iterations(self):
        net = HeadNet.create(2, seed=3)
        before = [p.copy() for p in net.parameters()]
        train(net, np.ones((2, 8, 8)), np.zeros((8, 8)), TrainSpec(0))
        assert all(np.array_equal(a, b) for a, b in zip(before, net.parameters()))

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        x, t = rng.normal(size=(2, 8, 8)), rng.random((8, 8))
        runs = []
        for _ in range(2):
            net = SelectorNet.create(2, seed=9, std=0.1)
            _, losses = train(net, x, t, TrainSpec(10, 1e-3))
            runs.append((losses, [p.copy() for p in net.parameters()]))
        assert runs[0][0] == runs[1][0]
        assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))

    def test_weight_decay_step(self):
        net = HeadNet.create(1, hidden=1, seed=0, std=0.5, k1=3, k2=3)
        x = np.zeros((1, 5, 5))
        net.layers[0].bias[:] = -1.0
        w_before = [l.weight.copy() for l in net.layers]
        backward_and_step(net, x, np.zeros((5, 5)), TrainSpec(1, 0.1, weight_decay=0.5))
        for l, w in zip(net.layers, w_before):
            assert np.allclose(l.weight, w * (1 - 2 * 0.1 * 0.5))

    def test_divergence_reported(self):
        net = HeadNet.create(2, seed=0, std=0.5, k1=3, k2=3)
        x = np.full((2, 8, 8), 1e200)
        with pytest.raises(FloatingPointError, match="learning rate"):
            with np.errstate(over="ignore", invalid="ignore"):
                backward_and_step(net, x, np.zeros((8, 8)), TrainSpec(1, 1.0))

    def test_trainspec_validation(self):
        with pytest.raises(ValueError):
            TrainSpec(lr=0)
        with pytest.raises(ValueError):
            TrainSpec(iterations=-1)


class TestSerialization:
    @pytest.mark.parametrize("make", [
        lambda: HeadNet.create(5, hidden=3, seed=11),
        lambda: SelectorNet.create(4, seed=12),
    ])
    def test_roundtrip_bitwise(self, make):
        net = make()
        buf = io.BytesIO()
        save_net(net, buf)
        back = load_net(io.BytesIO(buf.getvalue()))
        assert type(back) is type(net)
        for a, b in zip(net.parameters(), back.parameters()):
            assert a.tobytes() == b.tobytes()
        assert save_net(back, io.BytesIO()) == buf.getvalue()

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            load_net(b"XXXX\x00\x00\x00\x00")
