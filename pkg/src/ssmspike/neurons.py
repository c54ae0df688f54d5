"""Neuron dynamics: the general spiking neuron, LIF, adLIF and the SSM neuron.

The SSM neuron keeps a bank of ``h`` independent neurons, each with an
``n``-dimensional complex state, ``n_in`` input channels and ``n_out`` output
channels::

    y[t]   = Re(C v[t] + c_bias) + Im(C v[t] + c_bias)
    s[t]   = f(y[t])
    v[t+1] = A v[t] + B i[t]

with ``A = diag(lam)`` or ``A = Q^H diag(lam) Q`` (``Q`` the unitary DFT).
The output at step ``t`` is read from ``v[t]`` before the state advances.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit
from .activations import activate
from .errors import ConfigError, DivergedStateError, InvalidDimensionError

DIAGONAL = "diagonal"
NON_DIAGONAL_DFT = "non_diagonal_dft"
TRANSITIONS = (DIAGONAL, NON_DIAGONAL_DFT)


# -- classic neurons -------------------------------------------------------


@dataclass(frozen=True)
class LifParams:
    alpha: float
    theta: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("leak must lie in (0, 1)", "alpha")


@dataclass(frozen=True)
class AdLifParams:
    alpha: float
    beta: float
    a: float
    b: float
    theta: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("leak must lie in (0, 1)", "alpha")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError("leak must lie in (0, 1)", "beta")


@dataclass(frozen=True)
class GeneralNeuronParams:
    """``v[t+1] = A v[t] - R s[t] + B i[t]``; ``spikes(v)`` is the region test."""

    A: np.ndarray
    B: np.ndarray
    R: np.ndarray
    spikes: object

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape != (n,) or self.R.shape != (n,):
            raise InvalidDimensionError(
                f"inconsistent shapes A{self.A.shape} B{self.B.shape} R{self.R.shape}"
            )


def lif_step(p, u, s_prev, i):
    """One LIF update. Returns ``(u_next, s)`` with ``s`` read from ``u``."""
    u_next = p.alpha * u - p.alpha * p.theta * s_prev + (1.0 - p.alpha) * i
    s = 1 if u >= p.theta else 0
    return u_next, s


def adlif_step(p, u, w, s_prev, i):
    # term order mirrors A v - R s + B i so the two-state embedding is bit-exact
    u_next = p.alpha * u - (1.0 - p.alpha) * w - p.alpha * p.theta * s_prev + (1.0 - p.alpha) * i
    w_next = p.a * u + p.beta * w + p.b * s_prev
    s = 1 if u >= p.theta else 0
    return u_next, w_next, s


def general_neuron_step(p, v, s_prev, i):
    v = np.asarray(v, dtype=float)
    if v.shape != p.B.shape:
        raise InvalidDimensionError(f"state shape {v.shape} does not match n={p.B.shape[0]}")
    # explicit row sums keep the rounding order fixed (no BLAS kernels)
    v_next = (p.A * v).sum(axis=1) - p.R * s_prev + p.B * i
    s = 1 if p.spikes(v) else 0
    return v_next, s


def lif_as_general(p):
    theta = p.theta
    return GeneralNeuronParams(
        A=np.array([[p.alpha]]),
        B=np.array([1.0 - p.alpha]),
        R=np.array([p.alpha * theta]),
        spikes=lambda v: v[0] >= theta,
    )


def adlif_as_general(p):
    """Two-state embedding of adLIF with state ``(u, w)``.

    The reset column carries ``+alpha*theta`` on the membrane row because the
    general form subtracts ``R s``.
    """
    theta = p.theta
    return GeneralNeuronParams(
        A=np.array([[p.alpha, -(1.0 - p.alpha)], [p.a, p.beta]]),
        B=np.array([1.0 - p.alpha, 0.0]),
        R=np.array([p.alpha * theta, -p.b]),
        spikes=lambda v: v[0] >= theta,
    )


# -- SSM neuron ------------------------------------------------------------


def s4d_lin_init(n, dt_min=0.001, dt_max=0.1, rng_seed=None, rng=None):
    """Discrete eigenvalues from S4D-Lin poles via the bilinear transform.

    Pole ``k`` is ``-1/2 + i pi k``; its timescale is log-uniform in
    ``[dt_min, dt_max]``. All ``n`` eigenvalues are distinct (no conjugate
    pairs).
    """
    if n < 1:
        raise ConfigError(f"state dimension must be >= 1, got {n}", "n")
    if not 0.0 < dt_min <= dt_max:
        raise ConfigError(f"need 0 < dt_min <= dt_max, got ({dt_min}, {dt_max})", "dt_min")
    if rng is None:
        rng = np.random.default_rng(rng_seed)
    log_dt = rng.uniform(np.log(dt_min), np.log(dt_max), size=n)
    return bilinear(-0.5 + 1j * np.pi * np.arange(n), np.exp(log_dt))


def bilinear(pole, dt):
    half = dt * pole / 2.0
    return (1.0 + half) / (1.0 - half)


@dataclass
class NeuronLayerParams:
    """Parameters of ``h`` SSM neurons.

    Shapes: ``lam`` (h, n) complex, ``B`` (h, n, n_in) complex,
    ``C`` (h, n_out, n) complex, ``c_bias`` (h, n_out) real.
    """

    lam: np.ndarray
    B: np.ndarray
    C: np.ndarray
    c_bias: np.ndarray
    trainable: dict = field(default_factory=lambda: {"lam": True, "B": False, "C": True, "c_bias": True})

    def __post_init__(self):
        h, n = self.lam.shape
        if self.B.shape[:2] != (h, n) or self.C.shape[0] != h or self.C.shape[2] != n:
            raise InvalidDimensionError(
                f"inconsistent neuron shapes lam{self.lam.shape} B{self.B.shape} C{self.C.shape}"
            )
        if self.c_bias.shape != self.C.shape[:2]:
            raise InvalidDimensionError(f"c_bias shape {self.c_bias.shape} != {self.C.shape[:2]}")

    @property
    def h(self):
        return self.lam.shape[0]

    @property
    def n(self):
        return self.lam.shape[1]

    @property
    def n_in(self):
        return self.B.shape[2]

    @property
    def n_out(self):
        return self.C.shape[1]

    def copy(self):
        return NeuronLayerParams(
            self.lam.copy(), self.B.copy(), self.C.copy(), self.c_bias.copy(), dict(self.trainable)
        )


def init_layer_params(h, n, n_in, n_out, rng, dt_min=0.001, dt_max=0.1,
                      train_B=False, train_c_bias=True, dtype=np.complex128):
    lam = np.stack([s4d_lin_init(n, dt_min, dt_max, rng=rng) for _ in range(h)]).astype(dtype)
    B = np.ones((h, n, n_in), dtype=dtype)
    C = (rng.standard_normal((h, n_out, n)) + 1j * rng.standard_normal((h, n_out, n))).astype(dtype)
    c_bias = np.zeros((h, n_out), dtype=np.zeros((), dtype).real.dtype)
    trainable = {"lam": True, "B": bool(train_B), "C": True, "c_bias": bool(train_c_bias)}
    return NeuronLayerParams(lam, B, C, c_bias, trainable)


def stability_clip(params):
    """Rescale every eigenvalue with modulus above one back onto the unit circle."""
    mod = np.abs(params.lam)
    over = mod > 1.0
    if not over.any():
        return params
    lam = np.where(over, params.lam / np.where(over, mod, 1.0), params.lam)
    # the division can land an ulp above one
    shrink = np.abs(lam) > 1.0
    while shrink.any():
        lam = np.where(shrink, lam * (1.0 - 4 * np.finfo(mod.dtype).eps), lam)
        shrink = np.abs(lam) > 1.0
    return replace(params, lam=lam.astype(params.lam.dtype, copy=False))


def check_transition(kind):
    if kind not in TRANSITIONS:
        raise ConfigError(f"unknown transition {kind!r}, expected one of {TRANSITIONS}", "transition")


def effective_io(params, kind):
    """Input and output maps acting on the stored state.

    For the DFT transition the state is kept in the eigenbasis ``w = Q v``,
    so ``B`` becomes ``Q B`` and ``C`` becomes ``C Q^H``.
    """
    check_transition(kind)
    if kind == DIAGONAL:
        return params.B, params.C
    B_eff = np.swapaxes(numkit.unitary_fft(np.swapaxes(params.B, 1, 2)), 1, 2)
    C_eff = numkit.unitary_ifft(params.C)
    return B_eff, C_eff


def to_eigenbasis(v, kind):
    return v if kind == DIAGONAL else numkit.unitary_fft(v)


def from_eigenbasis(w, kind):
    return w if kind == DIAGONAL else numkit.unitary_ifft(w)


@dataclass
class LayerState:
    """Stored state of a neuron bank, shape (..., h, n).

    For the DFT transition this holds the eigenbasis coordinates.
    """

    v: np.ndarray

    @classmethod
    def zeros(cls, params, batch=()):
        batch = (batch,) if isinstance(batch, int) else tuple(batch)
        return cls(np.zeros(batch + (params.h, params.n), dtype=params.lam.dtype))


def readout(C_eff, c_bias, v):
    """Real-valued pre-activation ``Re(Cv + c) + Im(Cv + c)``; v is (..., h, n)."""
    psi = numkit.bank_matvec(C_eff, v)
    return psi.real + psi.imag + c_bias


def ssm_neuron_step(params, kind, act, state, i, layer=0, step=0):
    """Advance one step. ``i`` has shape (..., h, n_in).

    Returns ``(state_next, y, s)`` where ``y`` and ``s`` are read from the
    incoming state.
    """
    B_eff, C_eff = effective_io(params, kind)
    v = state.v
    y = readout(C_eff, params.c_bias, v)
    s = activate(act, y)
    v_next = params.lam * v + numkit.bank_matvec(B_eff, np.asarray(i))
    if not np.isfinite(v_next).all():
        raise DivergedStateError(layer, step)
    return LayerState(v_next), y, s


def scan_states(lam, drive, v0=None, layer=0):
    """Run ``v[t+1] = lam * v[t] + drive[t]`` and return ``v[0..T-1]``.

    ``drive`` has shape (T, ..., h, n); ``v[0]`` defaults to zero.
    """
    T = drive.shape[0]
    out = np.empty(drive.shape, dtype=np.result_type(lam, drive))
    v = np.zeros(drive.shape[1:], dtype=out.dtype) if v0 is None else v0
    for t in range(T):
        out[t] = v
        v = lam * v + drive[t]
    if not np.isfinite(out).all():
        bad = np.flatnonzero(~np.isfinite(out).reshape(T, -1).all(axis=1))[0]
        raise DivergedStateError(layer, int(bad))
    return out


def layer_dynamics(params, kind, act, i_seq, layer=0):
    """Unrolled neuron bank over a whole sequence.

    ``i_seq`` is (T, batch, h, n_in). Returns stored states ``(T, batch, h, n)``,
    pre-activations and activations, both ``(T, batch, h, n_out)``.
    """
    B_eff, C_eff = effective_io(params, kind)
    drive = numkit.bank_matvec(B_eff, i_seq)
    states = scan_states(params.lam, drive, layer=layer)
    y = readout(C_eff, params.c_bias, states)
    return states, y, activate(act, y)
