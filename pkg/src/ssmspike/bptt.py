"""Backpropagation through time with surrogate spike derivatives.

Complex parameters are differentiated as independent (re, im) pairs. A
gradient for a complex array ``p`` is stored as ``dL/dRe(p) + 1j*dL/dIm(p)``,
so viewing it as real pairs lines it up with ``p.view(real)``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .activations import surrogate_derivative
from .errors import DataError, StaleTapeError
from .network import batchnorm_backward, layer_forward, softmax_cross_entropy
from .neurons import DIAGONAL, effective_io


@dataclass
class Tape:
    layers: list
    out_sum: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    labels: np.ndarray
    loss: float
    version: int
    net_id: int
    T: int = 0
    spike_rates: list = field(default_factory=list)


def _time_major(net, counts):
    counts = np.asarray(counts, dtype=net.spec.real_dtype)
    if counts.ndim != 3 or counts.shape[2] != net.spec.input_dim:
        raise ValueError(
            f"batch shape {counts.shape} does not match (batch, T, {net.spec.input_dim})"
        )
    return np.swapaxes(counts, 0, 1)


def forward_unroll(net, counts, labels, mode="train", rng=None):
    """Run the network over a batch of shape (batch, T, input_dim).

    Returns ``(loss, logits, tape)``. In eval mode the tape is None, batch
    norm uses running statistics and dropout is off.
    """
    x = _time_major(net, counts)
    labels = np.asarray(labels)
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    caches = []
    rates = []
    for k, layer in enumerate(net.layers):
        x, cache = layer_forward(layer, x, mode, rng, net.spec.dropout_p, index=k)
        caches.append(cache)
        rates.append(float(np.mean(cache.spikes != 0)) if layer.spec.activation.is_spiking else float("nan"))
    out_sum = x.sum(axis=0)
    logits = out_sum @ net.W_out.T
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= net.spec.num_classes:
        raise DataError(f"labels must lie in [0, {net.spec.num_classes})")
    loss, probs = softmax_cross_entropy(logits, labels)
    if mode != "train":
        return loss, logits, None
    tape = Tape(caches, out_sum, logits, probs, labels, loss, net.version, id(net), x.shape[0], rates)
    return loss, logits, tape


def _neuron_backward(layer, cache, d_out):
    """Adjoint of one neuron bank. ``d_out`` is dL/d(layer output), (T, batch, h*n_out).

    Returns dL/di (T, batch, h, n_in) and the neuron parameter gradients.
    """
    spec = layer.spec
    params = layer.neurons
    T, batch = d_out.shape[:2]
    ds = d_out if cache.mask is None else d_out * cache.mask
    ds = ds.reshape(T, batch, spec.h, spec.n_out)
    dy = ds * surrogate_derivative(spec.activation, cache.y)

    grads = {}
    grads["c_bias"] = dy.sum(axis=(0, 1))
    # y = Re(psi) + Im(psi), so dL/dRe(psi) = dL/dIm(psi) = dy
    B_eff, C_eff = effective_io(params, spec.transition)
    states = cache.states
    g_C_eff = numkit.bank_outer_sum(dy, states.conj()) * (1.0 + 1.0j)
    g_v = numkit.bank_matvec(np.swapaxes(C_eff.conj(), 1, 2) * (1.0 + 1.0j), dy)

    lam_c = params.lam.conj()
    adj = np.empty_like(g_v)
    a = g_v[T - 1]
    adj[T - 1] = a
    for t in range(T - 2, -1, -1):
        a = g_v[t] + lam_c * a
        adj[t] = a
    # drive[t] enters v[t+1]; the last drive never reaches the loss
    g_drive = np.zeros_like(adj)
    g_drive[:-1] = adj[1:]
    grads["lam"] = (adj[1:] * states[:-1].conj()).sum(axis=(0, 1))
    g_B_eff = numkit.bank_outer_sum(g_drive, cache.i_seq)
    d_i = numkit.bank_matvec(np.swapaxes(B_eff.conj(), 1, 2), g_drive).real

    if spec.transition == DIAGONAL:
        grads["C"], grads["B"] = g_C_eff, g_B_eff
    else:
        # C_eff = C Q^H  =>  gC = gC_eff Q ; B_eff = Q B  =>  gB = Q^H gB_eff
        grads["C"] = numkit.unitary_fft(g_C_eff)
        grads["B"] = np.swapaxes(numkit.unitary_ifft(np.swapaxes(g_B_eff, 1, 2)), 1, 2)
    return d_i, grads


def backward_unroll(tape, net):
    """Gradients of the tape's loss for every trainable parameter.

    Spike derivatives are replaced by the activation's surrogate. Returns a
    dict keyed like :meth:`Network.named_parameters`.
    """
    if tape.version != net.version or tape.net_id != id(net):
        raise StaleTapeError(
            f"tape recorded at parameter version {tape.version}, network is at {net.version}"
        )
    batch = len(tape.labels)
    g_logits = tape.probs.copy()
    g_logits[np.arange(batch), tape.labels] -= 1.0
    g_logits /= batch

    grads = {"readout.W": g_logits.T @ tape.out_sum}
    d_out = np.broadcast_to(g_logits @ net.W_out, (tape.T,) + tape.out_sum.shape)
    for k in range(len(net.layers) - 1, -1, -1):
        layer, cache = net.layers[k], tape.layers[k]
        d_i, ngrads = _neuron_backward(layer, cache, d_out)
        p = f"layers.{k}."
        for name, g in ngrads.items():
            grads[p + name] = g
        T, b = d_i.shape[:2]
        d_u = d_i.reshape(T, b, layer.spec.in_channels)
        d_z, grads[p + "bn.gamma"], grads[p + "bn.beta"] = batchnorm_backward(layer.bn, cache.bn, d_u)
        grads[p + "W"] = d_z.reshape(-1, d_z.shape[-1]).T @ cache.x.reshape(-1, cache.x.shape[-1])
        if k > 0:
            d_out = d_z @ layer.W
    return {name: grads[name] for name, _, _ in net.trainable_parameters()}


def loss_and_grads(net, counts, labels, rng=None):
    loss, logits, tape = forward_unroll(net, counts, labels, "train", rng)
    return loss, backward_unroll(tape, net), tape


# -- finite-difference checking ------------------------------------------------


@dataclass
class GroupReport:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    passed: bool


@dataclass
class GradCheckReport:
    groups: dict
    tolerance: float
    absent: list

    @property
    def passed(self):
        return all(g.passed for g in self.groups.values())

    def lines(self):
        out = []
        for g in self.groups.values():
            flag = "PASS" if g.passed else "FAIL"
            out.append(
                f"{flag} {g.name}: max rel err {g.max_rel_error:.3e} at {g.worst_index} "
                f"(analytic {g.analytic:+.6e}, numeric {g.numeric:+.6e})"
            )
        for name in self.absent:
            out.append(f"---- {name}: frozen, not checked")
        return out


def _real_view(arr):
    return arr.view(arr.real.dtype) if np.iscomplexobj(arr) else arr


def grad_check(net, counts, labels, tolerance=1e-4, step=1e-5, seed=0, backward=None, max_entries=None):
    """Compare analytic gradients with central finite differences.

    The error for entry ``i`` of a group is
    ``|a_i - f_i| / max(|a_i|, |f_i|, 1e-3 * max_j |f_j|)``; the floor keeps
    entries that are tiny relative to the group from dominating. Dropout
    masks are re-drawn from the same seed for every evaluation.
    """
    backward = backward or backward_unroll
    _, _, tape = forward_unroll(net, counts, labels, "train", np.random.default_rng(seed))
    analytic = backward(tape, net)
    groups = {}
    for name, _, arr in net.trainable_parameters():
        flat = _real_view(arr).reshape(-1)
        a = _real_view(np.ascontiguousarray(analytic[name])).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.random.default_rng(seed).choice(flat.size, max_entries, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            lp, _, _ = forward_unroll(net, counts, labels, "train", np.random.default_rng(seed))
            flat[i] = orig - step
            lm, _, _ = forward_unroll(net, counts, labels, "train", np.random.default_rng(seed))
            flat[i] = orig
            numeric[j] = (lp - lm) / (2.0 * step)
        a_sel = a[idx]
        floor = max(1e-3 * float(np.abs(numeric).max(initial=0.0)), 1e-12)
        denom = np.maximum(np.maximum(np.abs(a_sel), np.abs(numeric)), floor)
        rel = np.abs(a_sel - numeric) / denom
        w = int(np.argmax(rel)) if rel.size else 0
        worst = np.unravel_index(int(idx[w]), _real_view(arr).shape) if rel.size else ()
        groups[name] = GroupReport(
            name, float(rel.max(initial=0.0)), tuple(int(v) for v in worst),
            float(a_sel[w]) if rel.size else 0.0, float(numeric[w]) if rel.size else 0.0,
            bool(rel.max(initial=0.0) <= tolerance),
        )
    absent = [name for name, _, _ in net.named_parameters() if not net.is_trainable(name)]
    return GradCheckReport(groups, tolerance, absent)
