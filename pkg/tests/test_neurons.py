import cmath
import math

import numpy as np
import pytest

from ssmspike.activations import ActivationKind
from ssmspike.errors import ConfigError, DivergedStateError, InvalidDimensionError
from ssmspike.neurons import (
    DIAGONAL,
    NON_DIAGONAL_DFT,
    AdLifParams,
    GeneralNeuronParams,
    LayerState,
    LifParams,
    NeuronLayerParams,
    adlif_as_general,
    adlif_step,
    bilinear,
    general_neuron_step,
    init_layer_params,
    layer_dynamics,
    lif_as_general,
    lif_step,
    s4d_lin_init,
    ssm_neuron_step,
    stability_clip,
)

GELU = ActivationKind("gelu")
SIGNED = ActivationKind("signed_spike")


class TestLif:
    def test_rest(self):
        assert lif_step(LifParams(0.5, 1.0), 0.0, 0, 0.0) == (0.0, 0)

    def test_reset(self):
        assert lif_step(LifParams(0.5, 1.0), 2.0, 1, 0.0) == (0.5, 1)

    def test_integrate(self):
        u, s = lif_step(LifParams(0.9, 1.0), 0.5, 0, 1.0)
        assert u == pytest.approx(0.55, abs=1e-15)
        assert s == 0

    def test_invalid_alpha(self):
        with pytest.raises(ConfigError):
            LifParams(1.0)


class TestAdLif:
    P = AdLifParams(alpha=0.5, beta=0.5, a=0.1, b=0.2, theta=1.0)

    def test_zero_state(self):
        assert adlif_step(self.P, 0.0, 0.0, 0, 0.0) == (0.0, 0.0, 0)

    def test_no_previous_spike(self):
        u, w, s = adlif_step(self.P, 1.0, 0.0, 0, 0.0)
        assert (u, s) == (0.5, 1)
        assert w == pytest.approx(0.1, abs=1e-15)

    def test_previous_spike(self):
        u, w, s = adlif_step(self.P, 1.0, 0.0, 1, 0.0)
        assert u == pytest.approx(0.0, abs=1e-15)
        assert w == pytest.approx(0.3, abs=1e-15)


def _random_lif(rng):
    return LifParams(float(rng.uniform(0.05, 0.95)), float(rng.uniform(0.2, 2.0)))


def _random_adlif(rng):
    return AdLifParams(float(rng.uniform(0.05, 0.95)), float(rng.uniform(0.05, 0.95)),
                       float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)), float(rng.uniform(0.2, 2.0)))


def lif_trajectories_match(rng, steps=100):
    p = _random_lif(rng)
    g = lif_as_general(p)
    inputs = rng.uniform(-1, 3, steps)
    u, s = 0.0, 0
    v, sg = np.zeros(1), 0
    for i in inputs:
        u, s_new = lif_step(p, u, s, i)
        v, sg_new = general_neuron_step(g, v, sg, i)
        if u != v[0] or s_new != sg_new:
            return False
        s, sg = s_new, sg_new
    return True


def adlif_trajectories_match(rng, steps=100):
    p = _random_adlif(rng)
    g = adlif_as_general(p)
    inputs = rng.uniform(-1, 3, steps)
    u, w, s = 0.0, 0.0, 0
    v, sg = np.zeros(2), 0
    for i in inputs:
        u, w, s_new = adlif_step(p, u, w, s, i)
        v, sg_new = general_neuron_step(g, v, sg, i)
        if u != v[0] or w != v[1] or s_new != sg_new:
            return False
        s, sg = s_new, sg_new
    return True


class TestGeneralNeuron:
    def test_lif_embedding_exact(self):
        rng = np.random.default_rng(0)
        assert all(lif_trajectories_match(rng) for _ in range(1000))

    def test_adlif_embedding_exact(self):
        rng = np.random.default_rng(1)
        assert all(adlif_trajectories_match(rng) for _ in range(1000))

    def test_identity_holds_state(self):
        g = GeneralNeuronParams(np.eye(3), np.zeros(3), np.zeros(3), lambda v: False)
        v = np.array([1.0, -2.0, 0.5])
        for _ in range(10):
            v_next, _ = general_neuron_step(g, v, 1, 5.0)
            np.testing.assert_array_equal(v_next, v)

    def test_shape_mismatch(self):
        g = lif_as_general(LifParams(0.5))
        with pytest.raises(InvalidDimensionError):
            general_neuron_step(g, np.zeros(2), 0, 0.0)


class TestS4dLin:
    def test_bilinear_first_pole(self):
        lam = bilinear(-0.5 + 0j, 0.01)
        assert lam.real == pytest.approx((1 - 0.0025) / (1 + 0.0025), rel=1e-15)
        assert lam.real == pytest.approx(0.995012, abs=1e-6)
        assert lam.imag == 0.0

    def test_inside_unit_disk(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            lam = s4d_lin_init(64, 1e-4, 10.0, rng=rng)
            assert (np.abs(lam) < 1).all()

    def test_poles_and_timescales(self):
        lam = s4d_lin_init(16, 0.001, 0.1, rng_seed=3)
        # invert the bilinear map to recover dt * pole
        dta = 2 * (lam - 1) / (lam + 1)
        dt = -2 * dta.real  # real part of the pole is -1/2
        assert ((dt >= 0.001 - 1e-12) & (dt <= 0.1 + 1e-12)).all()
        np.testing.assert_allclose(dta.imag / dt, np.pi * np.arange(16), rtol=1e-9, atol=1e-9)

    def test_reproducible(self):
        np.testing.assert_array_equal(s4d_lin_init(16, rng_seed=7), s4d_lin_init(16, rng_seed=7))

    def test_invalid_range(self):
        with pytest.raises(ConfigError):
            s4d_lin_init(4, 0.1, 0.01)
        with pytest.raises(ConfigError):
            s4d_lin_init(0)


def random_params(rng, h, n, n_in, n_out, radius=0.95):
    lam = radius * rng.uniform(0, 1, (h, n)) * np.exp(2j * np.pi * rng.uniform(size=(h, n)))
    B = rng.standard_normal((h, n, n_in)) + 1j * rng.standard_normal((h, n, n_in))
    C = rng.standard_normal((h, n_out, n)) + 1j * rng.standard_normal((h, n_out, n))
    return NeuronLayerParams(lam, B, C, rng.standard_normal((h, n_out)))


def dense_reference(params, inputs):
    """Direct recurrence with A = Q^H diag(lam) Q built entry by entry."""
    h, n = params.lam.shape
    q = np.array([[cmath.exp(-2j * math.pi * j * k / n) / math.sqrt(n) for k in range(n)] for j in range(n)])
    A = [q.conj().T @ np.diag(params.lam[j]) @ q for j in range(h)]
    T = inputs.shape[0]
    v = np.zeros((h, n), dtype=complex)
    ys = []
    for t in range(T):
        psi = np.stack([params.C[j] @ v[j] for j in range(h)])
        ys.append(psi.real + psi.imag + params.c_bias)
        v = np.stack([A[j] @ v[j] + params.B[j] @ inputs[t, j] for j in range(h)])
    return np.array(ys)


def max_rel_err(got, ref):
    return np.abs(got - ref).max() / np.abs(ref).max()


class TestSsmNeuron:
    def test_zero_dynamics_give_bias(self):
        h, n = 3, 4
        c_bias = np.array([[0.5], [1.5], [-1.2]])
        p = NeuronLayerParams(np.zeros((h, n), complex), np.zeros((h, n, 1), complex),
                              np.ones((h, 1, n), complex), c_bias)
        state = LayerState.zeros(p)
        for _ in range(5):
            state, y, s = ssm_neuron_step(p, DIAGONAL, SIGNED, state, np.ones((h, 1)))
            np.testing.assert_array_equal(y, c_bias)
            np.testing.assert_array_equal(s, [[0.0], [1.0], [-1.0]])

    def test_single_state_transitions_agree(self):
        rng = np.random.default_rng(4)
        p = random_params(rng, 2, 1, 1, 1)
        inputs = rng.standard_normal((20, 3, 2, 1))
        _, y_d, s_d = layer_dynamics(p, DIAGONAL, SIGNED, inputs)
        _, y_n, s_n = layer_dynamics(p, NON_DIAGONAL_DFT, SIGNED, inputs)
        np.testing.assert_allclose(y_n, y_d, rtol=1e-14, atol=1e-14)
        np.testing.assert_array_equal(s_n, s_d)

    @pytest.mark.parametrize("n", [4, 8, 16])
    def test_eigenbasis_matches_dense(self, n):
        rng = np.random.default_rng(n)
        p = random_params(rng, 2, n, 2, 3)
        inputs = rng.standard_normal((50, 2, 2))
        _, y, _ = layer_dynamics(p, NON_DIAGONAL_DFT, GELU, inputs[:, None])
        assert max_rel_err(y[:, 0], dense_reference(p, inputs)) < 1e-8

    def test_diagonal_matches_scalar_loop(self):
        rng = np.random.default_rng(5)
        p = random_params(rng, 2, 3, 2, 2)
        inputs = rng.standard_normal((10, 2, 2))
        _, y, _ = layer_dynamics(p, DIAGONAL, GELU, inputs[:, None])
        v = np.zeros((2, 3), complex)
        for t in range(10):
            for j in range(2):
                for o in range(2):
                    psi = sum(p.C[j, o, k] * v[j, k] for k in range(3))
                    assert y[t, 0, j, o] == pytest.approx(psi.real + psi.imag + p.c_bias[j, o], abs=1e-12)
            v = p.lam * v + np.einsum("hkj,hj->hk", p.B, inputs[t])

    def test_step_and_scan_agree(self):
        rng = np.random.default_rng(6)
        p = random_params(rng, 3, 8, 2, 4)
        inputs = rng.standard_normal((12, 5, 3, 2))
        for kind in (DIAGONAL, NON_DIAGONAL_DFT):
            states, y, s = layer_dynamics(p, kind, SIGNED, inputs)
            state = LayerState.zeros(p, 5)
            for t in range(12):
                np.testing.assert_allclose(state.v, states[t], rtol=1e-12, atol=1e-12)
                state, y_t, s_t = ssm_neuron_step(p, kind, SIGNED, state, inputs[t], step=t)
                np.testing.assert_allclose(y_t, y[t], rtol=1e-12, atol=1e-12)

    def test_simo_with_one_output_is_siso(self):
        rng = np.random.default_rng(7)
        p = random_params(rng, 4, 8, 1, 1)
        inputs = rng.standard_normal((15, 2, 4, 1))
        a = layer_dynamics(p, DIAGONAL, SIGNED, inputs)[2]
        b = layer_dynamics(p.copy(), DIAGONAL, SIGNED, inputs)[2]
        np.testing.assert_array_equal(a, b)
        # the first output channel of a wider bank follows the same dynamics
        wide = NeuronLayerParams(p.lam, p.B, np.concatenate([p.C, p.C[:, :, ::-1]], axis=1),
                                 np.concatenate([p.c_bias, p.c_bias], axis=1))
        c = layer_dynamics(wide, DIAGONAL, SIGNED, inputs)[2]
        np.testing.assert_array_equal(c[..., :1], a)

    def test_bounded_state(self):
        rng = np.random.default_rng(8)
        h, n, M = 2, 8, 3.0
        p = init_layer_params(h, n, 1, 1, rng)
        p.lam = np.minimum(np.abs(p.lam), 1 - 1e-3) * np.exp(1j * np.angle(p.lam))
        inputs = rng.uniform(-M, M, (10000, 1, h, 1))
        for kind in (DIAGONAL, NON_DIAGONAL_DFT):
            states, _, _ = layer_dynamics(p, kind, GELU, inputs)
            v = states if kind == DIAGONAL else np.fft.ifft(states, axis=-1, norm="ortho")
            bound = M * n / (1 - np.abs(p.lam).max())
            assert np.abs(v).max() <= bound

    def test_divergence_reported(self):
        p = NeuronLayerParams(np.full((1, 2), 1e200 + 0j), np.ones((1, 2, 1), complex),
                              np.ones((1, 1, 2), complex), np.zeros((1, 1)))
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergedStateError) as err:
                layer_dynamics(p, DIAGONAL, GELU, np.ones((5, 1, 1, 1)), layer=1)
        assert err.value.layer == 1 and err.value.step == 3


class TestStabilityClip:
    def _clip(self, values):
        p = NeuronLayerParams(np.array([values], complex), np.ones((1, len(values), 1), complex),
                              np.ones((1, 1, len(values)), complex), np.zeros((1, 1)))
        return stability_clip(p).lam[0]

    def test_examples(self):
        out = self._clip([2 + 0j, 0.5j, 1 + 1j])
        assert out[0] == pytest.approx(1 + 0j, abs=1e-15)
        assert out[1] == 0.5j
        assert out[2] == pytest.approx((1 + 1j) / math.sqrt(2), abs=1e-15)

    def test_never_above_one(self):
        rng = np.random.default_rng(9)
        z = rng.standard_normal(100000) * 5 + 1j * rng.standard_normal(100000) * 5
        out = self._clip(z)
        assert (np.abs(out) <= 1.0).all()
        big = np.abs(z) > 1
        np.testing.assert_allclose(np.angle(out[big]), np.angle(z[big]), atol=1e-12)
        np.testing.assert_array_equal(out[~big], z[~big])
