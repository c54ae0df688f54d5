"""Experiment configuration: JSON-serializable dataclasses with field-level errors."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError
from .network import NetworkSpec
from .neurons import DIAGONAL

BUDGET_UNITS = ("epochs", "steps")


def shd_defaults(spec):
    """Dropout, weight decay and learning rates tuned for SHD.

    SISO networks get dropout 0.3 and heavier weight decay; anything with a
    multi-channel neuron gets dropout 0.6. The SSM learning rate is lower
    for diagonal transitions.
    """
    siso = all(layer.is_siso for layer in spec.layers)
    diagonal = all(layer.transition == DIAGONAL for layer in spec.layers)
    return {
        "dropout_p": 0.3 if siso else 0.6,
        "wd_others": 1e-3 if siso else 1e-5,
        "wd_ssm": 1e-2 if siso else 1e-4,
        "lr_others": 1e-2,
        "lr_ssm": 1e-3 if diagonal else 1e-2,
    }


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    path: str = None
    train_manifest: str = None
    test_manifest: str = None
    num_bins: int = 100
    synthetic: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("synthetic", "shd"):
            raise ConfigError(f"expected 'synthetic' or 'shd', got {self.kind!r}", "dataset.kind")
        if self.kind == "shd" and not self.path:
            raise ConfigError("an SHD dataset needs a container directory", "dataset.path")
        if self.num_bins < 1:
            raise ConfigError("must be positive", "dataset.num_bins")


@dataclass(frozen=True)
class OptimConfig:
    lr_ssm: float = 1e-2
    lr_others: float = 1e-2
    wd_ssm: float = 0.0
    wd_others: float = 0.0
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("lr_ssm", "lr_others", "wd_ssm", "wd_others", "eps"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool) or value < 0:
                raise ConfigError(f"must be a non-negative number, got {value!r}", f"optim.{name}")
        if not isinstance(self.batch_size, int) or self.batch_size < 2:
            raise ConfigError("must be an integer >= 2 (batch norm)", "optim.batch_size")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError("must lie in [0, 1)", f"optim.{name}")


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkSpec
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 50
    budget_unit: str = "epochs"
    trials: int = 10
    seed: int = 0
    hpo: bool = False
    val_fraction: float = 0.1
    name: str = "run"
    output_dir: str = None
    workers: int = 1

    def __post_init__(self):
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError("must be a non-negative integer", "epochs")
        if self.budget_unit not in BUDGET_UNITS:
            raise ConfigError(f"expected one of {BUDGET_UNITS}", "budget_unit")
        if not isinstance(self.trials, int) or self.trials < 1:
            raise ConfigError("must be a positive integer", "trials")
        if not isinstance(self.seed, int):
            raise ConfigError("must be an integer", "seed")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("must lie in (0, 1)", "val_fraction")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError("must be a positive integer", "workers")

    def to_dict(self):
        d = asdict(self)
        d["network"] = self.network.to_dict()
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def cell_hash(self):
        """Hash of everything that affects results (not paths or worker counts)."""
        d = self.to_dict()
        for key in ("output_dir", "workers", "name"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, **kw):
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        _reject_unknown(d, cls, "")
        if "network" not in d:
            raise ConfigError("missing required section", "network")
        net = d.pop("network")
        if not isinstance(net, dict):
            raise ConfigError("must be an object", "network")
        net = dict(net)
        dropout = net.pop("dropout_p", None)
        try:
            spec = NetworkSpec.from_dict(net)
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], _prefix("network", exc.field)) from None
        defaults = shd_defaults(spec)
        try:
            spec = replace(spec, dropout_p=defaults["dropout_p"] if dropout is None else dropout)
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], "network.dropout_p") from None
        optim = dict(d.pop("optim", {}) or {})
        _reject_unknown(optim, OptimConfig, "optim.")
        for key in ("lr_ssm", "lr_others", "wd_ssm", "wd_others"):
            if optim.get(key) is None:
                optim[key] = defaults[key]
        dataset = dict(d.pop("dataset", {}) or {})
        _reject_unknown(dataset, DatasetConfig, "dataset.")
        try:
            return cls(network=spec, dataset=DatasetConfig(**dataset), optim=OptimConfig(**optim), **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def _prefix(section, name):
    return f"{section}.{name}" if name else section


def _reject_unknown(d, cls, prefix):
    known = {f.name for f in fields(cls)}
    for key in d:
        if key not in known:
            raise ConfigError("unknown field", prefix + key)
