import math

import numpy as np
import pytest

from ssmspike.activations import ActivationKind
from ssmspike.bptt import forward_unroll
from ssmspike.errors import ConfigError, DataError, DegenerateBatchError
from ssmspike.network import (
    BatchNormState,
    LayerSpec,
    Network,
    NetworkSpec,
    batchnorm_apply,
    layer_forward,
    load_checkpoint,
    readout_and_loss,
    save_checkpoint,
    two_layer_spec,
    update_running_stats,
)
from ssmspike.neurons import DIAGONAL, NON_DIAGONAL_DFT

SIGNED = ActivationKind("signed_spike")


def small_net(seed=0, **kw):
    layer = LayerSpec(3, 4, 2, 2, kw.pop("transition", NON_DIAGONAL_DFT), kw.pop("activation", SIGNED))
    spec = NetworkSpec(layers=(layer, layer), input_dim=7, num_classes=4, **kw)
    return Network.init(spec, seed)


class TestBatchNorm:
    def test_train_normalizes_over_batch_and_time(self):
        rng = np.random.default_rng(0)
        bn = BatchNormState.fresh(5, np.float64)
        x = rng.normal(3, 2, (20, 8, 5))
        out, _ = batchnorm_apply(bn, x, "train")
        np.testing.assert_allclose(out.mean(axis=(0, 1)), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 1)), 1, atol=1e-4)

    def test_constant_channel_gives_beta(self):
        bn = BatchNormState.fresh(2, np.float64)
        bn.beta = np.array([0.3, -0.7])
        x = np.full((4, 3, 2), 5.0)
        out, _ = batchnorm_apply(bn, x, "train")
        np.testing.assert_allclose(out, np.broadcast_to(bn.beta, out.shape))

    def test_running_stats_converge(self):
        bn = BatchNormState.fresh(3, np.float64, momentum=0.1)
        rng = np.random.default_rng(1)
        x = rng.normal(2, 1, (6, 4, 3))
        mean = x.mean(axis=(0, 1))
        for k in range(1, 61):
            _, cache = batchnorm_apply(bn, x, "train")
            update_running_stats(bn, cache)
            np.testing.assert_allclose(bn.running_mean, mean * (1 - 0.9 ** k), rtol=1e-12)
        assert np.abs(bn.running_mean - mean).max() < 1e-2 * np.abs(mean).max()
        assert (bn.running_var >= 0).all()

    def test_eval_uses_running_stats(self):
        bn = BatchNormState.fresh(2, np.float64)
        bn.running_mean = np.array([1.0, -1.0])
        bn.running_var = np.array([4.0, 0.25])
        out, cache = batchnorm_apply(bn, np.array([[[3.0, 0.0]]]), "eval")
        assert cache is None
        np.testing.assert_allclose(out[0, 0], [2 / math.sqrt(4 + 1e-5), 1 / math.sqrt(0.25 + 1e-5)])

    def test_batch_of_one_rejected(self):
        with pytest.raises(DegenerateBatchError):
            batchnorm_apply(BatchNormState.fresh(2, np.float64), np.ones((5, 1, 2)), "train")


def softmax_ce_scalar(logits, labels):
    total = 0.0
    for row, lab in zip(logits, labels):
        m = max(row)
        z = sum(math.exp(v - m) for v in row)
        total += -(row[lab] - m - math.log(z))
    return total / len(labels)


class TestReadout:
    def test_zero_weights_give_log_classes(self):
        stream = np.random.default_rng(2).integers(0, 2, (10, 3, 6)).astype(float)
        loss, logits = readout_and_loss(np.zeros((20, 6)), stream, [0, 5, 19])
        assert loss == pytest.approx(math.log(20), abs=1e-12)
        assert (logits == 0).all()

    def test_confident_logits(self):
        stream = np.ones((1, 2, 2))
        loss, _ = readout_and_loss(np.array([[100.0, 0.0], [0.0, 100.0]]) * np.array([[1, 0], [0, 1]]),
                                   np.array([[[1.0, 0.0], [0.0, 1.0]]]), [0, 1])
        assert loss < 1e-40 or loss == pytest.approx(0.0, abs=1e-40)

    def test_against_scalar_implementation(self):
        rng = np.random.default_rng(3)
        W = rng.standard_normal((5, 4))
        stream = rng.standard_normal((6, 3, 4))
        labels = [1, 4, 0]
        loss, logits = readout_and_loss(W, stream, labels)
        ref_logits = [[sum(W[c] @ stream[t, b] for t in range(6)) for c in range(5)] for b in range(3)]
        np.testing.assert_allclose(logits, ref_logits, rtol=1e-12)
        assert loss == pytest.approx(softmax_ce_scalar(ref_logits, labels), abs=1e-10)

    def test_time_accumulation_is_linear(self):
        rng = np.random.default_rng(4)
        W = rng.standard_normal((3, 4))
        stream = rng.standard_normal((7, 2, 4))
        _, whole = readout_and_loss(W, stream, [0, 1])
        parts = sum(readout_and_loss(W, stream[t:t + 1], [0, 1])[1] for t in range(7))
        np.testing.assert_allclose(whole, parts, rtol=1e-12)

    def test_bad_label(self):
        with pytest.raises(DataError):
            readout_and_loss(np.zeros((3, 2)), np.zeros((1, 1, 2)), [3])


class TestLayerForward:
    def test_zero_weights_depend_only_on_bias(self):
        net = small_net(transition=DIAGONAL)
        layer = net.layers[0]
        layer.W[:] = 0
        layer.neurons.c_bias = np.array([[1.2, 0.0], [-3.0, 0.99], [0.5, -1.0]])
        x = np.random.default_rng(5).poisson(2.0, (6, 4, 7)).astype(float)
        out, _ = layer_forward(layer, x, "train")
        expected = np.array([1, 0, -1, 0, 0, -1], dtype=float)
        np.testing.assert_array_equal(out, np.broadcast_to(expected, out.shape))

    def test_hand_unrolled_single_neuron(self):
        spec = NetworkSpec(layers=(LayerSpec(1, 1, 1, 1, DIAGONAL, SIGNED),), input_dim=2, num_classes=2)
        net = Network.init(spec, 0)
        layer = net.layers[0]
        layer.W = np.array([[0.5, -1.0]])
        layer.bn.running_mean = np.array([0.25])
        layer.bn.running_var = np.array([4.0])
        layer.bn.gamma = np.array([2.0])
        layer.bn.beta = np.array([0.1])
        lam, c, cb = 0.9 + 0.2j, 1.5 - 0.5j, 0.3
        layer.neurons.lam = np.array([[lam]])
        layer.neurons.C = np.array([[[c]]])
        layer.neurons.c_bias = np.array([[cb]])
        xs = [(2.0, 0.0), (1.0, 1.0), (0.0, 3.0)]
        v, ys = 0j, []
        for a, b in xs:
            psi = c * v
            ys.append(psi.real + psi.imag + cb)
            i = 2.0 * ((0.5 * a - 1.0 * b) - 0.25) / math.sqrt(4.0 + 1e-5) + 0.1
            v = lam * v + i
        spikes = [1.0 if y >= 1 else (-1.0 if y <= -1 else 0.0) for y in ys]
        out, cache = layer_forward(layer, np.array(xs)[:, None, :], "eval")
        np.testing.assert_allclose(cache.y[:, 0, 0, 0], ys, rtol=1e-14)
        np.testing.assert_array_equal(out[:, 0, 0], spikes)
        assert spikes != [0.0, 0.0, 0.0]

    def test_siso_is_mimo_with_unit_channels(self):
        a = Network.init(two_layer_spec(3, 4, input_dim=5, num_classes=2), 1)
        b = Network.init(NetworkSpec(
            layers=(LayerSpec(3, 4, 1, 1), LayerSpec(3, 4, 1, 1)), input_dim=5, num_classes=2), 1)
        x = np.random.default_rng(6).poisson(1.0, (4, 9, 5))
        np.testing.assert_array_equal(a.logits(x), b.logits(x))

    def test_dropout_only_in_train(self):
        net = small_net(dropout_p=0.5)
        x = np.random.default_rng(7).poisson(1.0, (8, 3, 7)).astype(float)
        out_eval, c = layer_forward(net.layers[0], x, "eval")
        assert c.mask is None
        out_train, c = layer_forward(net.layers[0], x, "train", np.random.default_rng(0), 0.5)
        assert set(np.unique(c.mask)) <= {0.0, 2.0}


class TestNetwork:
    def test_weight_shapes(self):
        net = Network.init(NetworkSpec(
            layers=(LayerSpec(4, 8, 2, 3), LayerSpec(5, 2, 3, 1)), input_dim=11, num_classes=6), 0)
        assert net.layers[0].W.shape == (8, 11)
        assert net.layers[1].W.shape == (15, 12)
        assert net.W_out.shape == (6, 5)

    def test_permutation_equivariance(self):
        net = small_net(seed=3, transition=DIAGONAL)
        rng = np.random.default_rng(8)
        for layer in net.layers:
            layer.bn.running_mean = rng.standard_normal(layer.bn.running_mean.shape)
            layer.bn.running_var = rng.uniform(0.5, 2, layer.bn.running_var.shape)
            layer.bn.gamma = rng.uniform(0.5, 2, layer.bn.gamma.shape)
        x = rng.poisson(1.0, (5, 12, 7))
        before = net.logits(x)

        perm = np.array([2, 0, 1])
        l0, l1 = net.layers
        n_in, n_out = l0.spec.n_in, l0.spec.n_out
        rows = (perm[:, None] * n_in + np.arange(n_in)).ravel()
        cols = (perm[:, None] * n_out + np.arange(n_out)).ravel()
        l0.W = l0.W[rows]
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(l0.bn, name, getattr(l0.bn, name)[rows])
        for name in ("lam", "B", "C", "c_bias"):
            setattr(l0.neurons, name, getattr(l0.neurons, name)[perm])
        l1.W = l1.W[:, cols]
        after = net.logits(x)
        np.testing.assert_allclose(after, before, rtol=1e-10, atol=1e-10)

    def test_eval_is_deterministic(self):
        net = small_net(dropout_p=0.5)
        x = np.random.default_rng(9).poisson(1.0, (4, 10, 7))
        np.testing.assert_array_equal(net.logits(x), net.logits(x))

    def test_zero_input_uniform_loss(self):
        net = small_net()
        net.W_out[:] = 0
        loss, _, _ = forward_unroll(net, np.zeros((3, 5, 7)), [0, 1, 2])
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_groups_cover_parameters_once(self):
        net = small_net()
        names = [n for n, _, _ in net.named_parameters()]
        assert len(names) == len(set(names))
        groups = {n: g for n, g, _ in net.named_parameters()}
        assert groups["layers.0.lam"] == "ssm" and groups["layers.1.C"] == "ssm"
        assert groups["layers.0.W"] == "others" and groups["readout.W"] == "others"
        assert groups["layers.0.bn.gamma"] == "others"

    def test_spec_validation(self):
        with pytest.raises(ConfigError, match="h"):
            LayerSpec(0, 4)
        with pytest.raises(ConfigError, match="transition"):
            LayerSpec(2, 4, transition="dense")
        with pytest.raises(ConfigError, match="dropout_p"):
            two_layer_spec(2, 2, dropout_p=1.0)
        with pytest.raises(ConfigError, match=r"layers\[0\]\.bogus"):
            NetworkSpec.from_dict({"layers": [{"h": 1, "n": 1, "bogus": 3}]})

    def test_spec_round_trip(self):
        spec = small_net(dropout_p=0.25).spec
        assert NetworkSpec.from_dict(spec.to_dict()) == spec


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        net = small_net(seed=4, dtype="float32")
        net.layers[1].bn.running_var = np.random.default_rng(0).uniform(size=6).astype(np.float32)
        net.layers[0].neurons.trainable["B"] = True
        net.version = 17
        opt_state = {"step_count": 3, "arrays": {"m/layers.0.lam": np.ones(4) * 0.5},
                     "base_lr": {"ssm": 0.01}}
        save_checkpoint(tmp_path / "c.npz", net, opt_state, seeds={"trial": 5})
        back, opt, meta = load_checkpoint(tmp_path / "c.npz")
        assert back.spec == net.spec
        assert back.version == 17 and meta["seeds"] == {"trial": 5}
        for (name, _, a), (_, _, b) in zip(net.named_parameters(), back.named_parameters()):
            assert a.dtype == b.dtype, name
            np.testing.assert_array_equal(a, b)
        for la, lb in zip(net.layers, back.layers):
            np.testing.assert_array_equal(la.bn.running_mean, lb.bn.running_mean)
            np.testing.assert_array_equal(la.bn.running_var, lb.bn.running_var)
            assert la.neurons.trainable == lb.neurons.trainable
        assert opt["step_count"] == 3
        np.testing.assert_array_equal(opt["arrays"]["m/layers.0.lam"], opt_state["arrays"]["m/layers.0.lam"])
        x = np.random.default_rng(1).poisson(1.0, (2, 6, 7))
        np.testing.assert_array_equal(net.logits(x), back.logits(x))
