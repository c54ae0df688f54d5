"""Two-hidden-layer SSM spiking network: dense weights, batch norm, readout.

Sequences are time-major inside the network: ``(T, batch, channels)``.
"""

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .activations import ActivationKind
from .errors import ConfigError, DataError, DegenerateBatchError
from .neurons import (
    NON_DIAGONAL_DFT,
    NeuronLayerParams,
    check_transition,
    init_layer_params,
    layer_dynamics,
)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    h: int
    n: int
    n_in: int = 1
    n_out: int = 1
    transition: str = NON_DIAGONAL_DFT
    activation: ActivationKind = field(default_factory=ActivationKind)

    def __post_init__(self):
        for name in ("h", "n", "n_in", "n_out"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"must be a positive integer, got {value!r}", name)
        check_transition(self.transition)

    @property
    def in_channels(self):
        return self.h * self.n_in

    @property
    def out_channels(self):
        return self.h * self.n_out

    @property
    def is_siso(self):
        return self.n_in == 1 and self.n_out == 1


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_dim: int = 700
    num_classes: int = 20
    dropout_p: float = 0.0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    dt_min: float = 0.001
    dt_max: float = 0.1
    train_B: bool = False
    train_c_bias: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) < 1:
            raise ConfigError("need at least one hidden layer", "layers")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"must lie in [0, 1), got {self.dropout_p}", "dropout_p")
        if self.input_dim < 1:
            raise ConfigError("must be positive", "input_dim")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes", "num_classes")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"expected float32 or float64, got {self.dtype!r}", "dtype")
        if not 0.0 < self.dt_min <= self.dt_max:
            raise ConfigError("need 0 < dt_min <= dt_max", "dt_min")

    @property
    def real_dtype(self):
        return np.dtype(self.dtype)

    @property
    def complex_dtype(self):
        return np.dtype(np.complex64 if self.dtype == "float32" else np.complex128)

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [asdict(layer) for layer in self.layers]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError("unknown field", key)
        layers = []
        layer_fields = {f.name for f in fields(LayerSpec)}
        act_fields = {f.name for f in fields(ActivationKind)}
        for k, layer in enumerate(d.pop("layers", [])):
            if not isinstance(layer, dict):
                raise ConfigError("must be an object", f"layers[{k}]")
            layer = dict(layer)
            for key in layer:
                if key not in layer_fields:
                    raise ConfigError("unknown field", f"layers[{k}].{key}")
            act = layer.pop("activation", {})
            for key in act if isinstance(act, dict) else ():
                if key not in act_fields:
                    raise ConfigError("unknown field", f"layers[{k}].activation.{key}")
            try:
                act = ActivationKind(**act) if isinstance(act, dict) else act
            except ConfigError as exc:
                raise ConfigError(str(exc).split(": ", 1)[-1], f"layers[{k}].activation.{exc.field}") from None
            try:
                layers.append(LayerSpec(activation=act, **layer))
            except ConfigError as exc:
                inner = f"layers[{k}].{exc.field}" if exc.field else f"layers[{k}]"
                raise ConfigError(str(exc).split(": ", 1)[-1], inner) from None
            except TypeError as exc:
                raise ConfigError(str(exc), f"layers[{k}]") from None
        try:
            return cls(layers=tuple(layers), **d)
        except TypeError as exc:
            raise ConfigError(str(exc), "network") from None


def two_layer_spec(h, n, n_in=1, n_out=1, transition=NON_DIAGONAL_DFT, activation=None, **kw):
    act = activation if activation is not None else ActivationKind()
    layer = LayerSpec(h, n, n_in, n_out, transition, act)
    return NetworkSpec(layers=(layer, layer), **kw)


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels, dtype, momentum=0.1, eps=1e-5):
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype),
            np.zeros(channels, dtype), np.ones(channels, dtype), momentum, eps,
        )


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    count: int


def batchnorm_apply(bn, x, mode="train"):
    """Normalize per channel over every leading axis (batch and time jointly).

    Returns ``(out, cache)``; ``cache`` is None in eval mode. Running
    statistics are not touched here, see :func:`update_running_stats`.
    """
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.ndim >= 2 and x.shape[-2] < 2:
            raise DegenerateBatchError("batch norm in train mode needs batch >= 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        xhat = (x - mean) * inv_std
        count = int(np.prod([x.shape[a] for a in axes]))
        return bn.gamma * xhat + bn.beta, BatchNormCache(xhat, inv_std, mean, var, count)
    xhat = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
    return bn.gamma * xhat + bn.beta, None


def update_running_stats(bn, cache):
    m = bn.momentum
    unbiased = cache.var * cache.count / max(cache.count - 1, 1)
    bn.running_mean = (1.0 - m) * bn.running_mean + m * cache.mean
    bn.running_var = (1.0 - m) * bn.running_var + m * unbiased


def batchnorm_backward(bn, cache, d_out):
    axes = tuple(range(d_out.ndim - 1))
    d_gamma = (d_out * cache.xhat).sum(axis=axes)
    d_beta = d_out.sum(axis=axes)
    dxhat = d_out * bn.gamma
    n = cache.count
    dx = (cache.inv_std / n) * (
        n * dxhat - dxhat.sum(axis=axes) - cache.xhat * (dxhat * cache.xhat).sum(axis=axes)
    )
    return dx, d_gamma, d_beta


@dataclass
class HiddenLayer:
    spec: LayerSpec
    W: np.ndarray
    bn: BatchNormState
    neurons: NeuronLayerParams


@dataclass
class LayerCache:
    x: np.ndarray
    bn: object
    i_seq: np.ndarray
    states: np.ndarray
    y: np.ndarray
    mask: object
    out: np.ndarray
    spikes: np.ndarray = None


def layer_forward(layer, x, mode="train", rng=None, dropout_p=0.0, index=0):
    """Run one hidden layer over a time-major stream ``x`` of shape (T, batch, prev).

    Returns the (possibly dropped-out) activation stream (T, batch, h*n_out)
    and a cache for the backward pass.
    """
    spec = layer.spec
    z = x @ layer.W.T
    u, bn_cache = batchnorm_apply(layer.bn, z, mode)
    T, batch = x.shape[:2]
    i_seq = u.reshape(T, batch, spec.h, spec.n_in)
    states, y, s = layer_dynamics(layer.neurons, spec.transition, spec.activation, i_seq, layer=index)
    out = s.reshape(T, batch, spec.out_channels)
    spikes = out
    mask = None
    if mode == "train" and dropout_p > 0.0:
        keep = rng.random(out.shape) >= dropout_p
        mask = keep.astype(out.dtype) / (1.0 - dropout_p)
        out = out * mask
    return out, LayerCache(x, bn_cache, i_seq, states, y, mask, out, spikes)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and the softmax probabilities."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(len(labels)), labels].mean()
    return float(loss), np.exp(logp)


def readout_and_loss(W_out, stream, labels):
    """Accumulative readout: ``logits = sum_t W_out s[t]``; stream is (T, batch, F)."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= W_out.shape[0]:
        raise DataError(f"labels must lie in [0, {W_out.shape[0]})")
    logits = stream.sum(axis=0) @ W_out.T
    loss, _ = softmax_cross_entropy(logits, labels)
    return loss, logits


class Network:
    """Parameters and running statistics of a whole network."""

    def __init__(self, spec, layers, W_out):
        self.spec = spec
        self.layers = layers
        self.W_out = W_out
        self.version = 0

    @classmethod
    def init(cls, spec, seed=0):
        rng = np.random.default_rng(seed)
        rdt, cdt = spec.real_dtype, spec.complex_dtype
        layers = []
        prev = spec.input_dim
        for ls in spec.layers:
            bound = 1.0 / np.sqrt(prev)
            W = rng.uniform(-bound, bound, size=(ls.in_channels, prev)).astype(rdt)
            bn = BatchNormState.fresh(ls.in_channels, rdt, spec.bn_momentum, spec.bn_eps)
            neurons = init_layer_params(
                ls.h, ls.n, ls.n_in, ls.n_out, rng, spec.dt_min, spec.dt_max,
                train_B=spec.train_B, train_c_bias=spec.train_c_bias, dtype=cdt,
            )
            layers.append(HiddenLayer(ls, W, bn, neurons))
            prev = ls.out_channels
        bound = 1.0 / np.sqrt(prev)
        W_out = rng.uniform(-bound, bound, size=(spec.num_classes, prev)).astype(rdt)
        return cls(spec, layers, W_out)

    # -- parameter registry --------------------------------------------

    def named_parameters(self):
        """Every parameter as ``(name, group, array)``; arrays are live references."""
        out = []
        for k, layer in enumerate(self.layers):
            p = f"layers.{k}."
            out.append((p + "W", "others", layer.W))
            out.append((p + "bn.gamma", "others", layer.bn.gamma))
            out.append((p + "bn.beta", "others", layer.bn.beta))
            for name in ("lam", "B", "C", "c_bias"):
                out.append((p + name, "ssm", getattr(layer.neurons, name)))
        out.append(("readout.W", "others", self.W_out))
        return out

    def is_trainable(self, name):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("lam", "B", "C", "c_bias"):
            k = int(name.split(".")[1])
            return bool(self.layers[k].neurons.trainable[leaf])
        return True

    def trainable_parameters(self):
        return [(name, group, arr) for name, group, arr in self.named_parameters() if self.is_trainable(name)]

    def get(self, name):
        for key, _, arr in self.named_parameters():
            if key == name:
                return arr
        raise KeyError(name)

    def set(self, name, value):
        parts = name.split(".")
        if parts[0] == "readout":
            self.W_out = value
            return
        layer = self.layers[int(parts[1])]
        if parts[2] == "W":
            layer.W = value
        elif parts[2] == "bn":
            setattr(layer.bn, parts[3], value)
        else:
            setattr(layer.neurons, parts[2], value)

    def bump(self):
        self.version += 1

    def copy(self):
        layers = [
            HiddenLayer(
                l.spec, l.W.copy(),
                BatchNormState(l.bn.gamma.copy(), l.bn.beta.copy(), l.bn.running_mean.copy(),
                               l.bn.running_var.copy(), l.bn.momentum, l.bn.eps),
                l.neurons.copy(),
            )
            for l in self.layers
        ]
        return Network(self.spec, layers, self.W_out.copy())

    def parameter_count(self):
        total = 0
        for name, _, arr in self.trainable_parameters():
            total += arr.size * (2 if np.iscomplexobj(arr) else 1)
        return total

    # -- evaluation ------------------------------------------------------

    def logits(self, counts):
        """Eval-mode logits for a batch of shape (batch, T, input_dim)."""
        x = np.swapaxes(np.asarray(counts, dtype=self.spec.real_dtype), 0, 1)
        for k, layer in enumerate(self.layers):
            x, _ = layer_forward(layer, x, mode="eval", index=k)
        return x.sum(axis=0) @ self.W_out.T

    def predict(self, counts, batch_size=256):
        preds = []
        for start in range(0, len(counts), batch_size):
            preds.append(self.logits(counts[start:start + batch_size]).argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


# -- checkpoints -------------------------------------------------------------


def _pack(arr):
    return np.ascontiguousarray(arr).view(arr.real.dtype) if np.iscomplexobj(arr) else arr


def save_checkpoint(path, net, optimizer_state=None, seeds=None, extra=None):
    """Write an ``.npz`` container; complex arrays are stored as re/im pairs."""
    arrays = {}
    complex_names = []
    for name, _, arr in net.named_parameters():
        if np.iscomplexobj(arr):
            complex_names.append(name)
        arrays["param/" + name] = _pack(arr)
    for k, layer in enumerate(net.layers):
        arrays[f"bn/{k}/running_mean"] = layer.bn.running_mean
        arrays[f"bn/{k}/running_var"] = layer.bn.running_var
    opt_complex = []
    if optimizer_state is not None:
        for key, arr in optimizer_state.get("arrays", {}).items():
            if np.iscomplexobj(arr):
                opt_complex.append(key)
            arrays["opt/" + key] = _pack(arr)
    meta = {
        "format": "ssmspike-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": net.spec.to_dict(),
        "complex": complex_names,
        "opt_complex": opt_complex,
        "trainable": [dict(l.neurons.trainable) for l in net.layers],
        "net_version": net.version,
        "optimizer": {k: v for k, v in (optimizer_state or {}).items() if k != "arrays"},
        "seeds": seeds or {},
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(net, optimizer_state, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != "ssmspike-checkpoint":
            raise DataError(f"{path}: not a checkpoint")
        if meta["version"] != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {meta['version']}")
        spec = NetworkSpec.from_dict(meta["spec"])
        net = Network.init(spec, seed=0)
        complex_names = set(meta["complex"])
        for name, _, _ in net.named_parameters():
            arr = data["param/" + name]
            if name in complex_names:
                arr = arr.view(spec.complex_dtype)
            net.set(name, arr.copy())
        for k, layer in enumerate(net.layers):
            layer.bn.running_mean = data[f"bn/{k}/running_mean"].copy()
            layer.bn.running_var = data[f"bn/{k}/running_var"].copy()
            layer.neurons.trainable = dict(meta["trainable"][k])
        net.version = meta["net_version"]
        opt = None
        if meta["optimizer"] or any(key.startswith("opt/") for key in data.files):
            opt = dict(meta["optimizer"])
            opt_complex = set(meta["opt_complex"])
            opt["arrays"] = {}
            for key in data.files:
                if key.startswith("opt/"):
                    k = key[4:]
                    arr = data[key]
                    opt["arrays"][k] = (arr.view(spec.complex_dtype) if k in opt_complex else arr).copy()
    return net, opt, meta
