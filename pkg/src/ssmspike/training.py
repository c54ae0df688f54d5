"""Adam with per-group decoupled weight decay, cosine annealing and trial runs."""

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as datamod
from .bptt import backward_unroll, forward_unroll
from .errors import SsmSpikeError, TrainingDivergedError
from .network import Network, save_checkpoint, update_running_stats
from .neurons import stability_clip

log = logging.getLogger(__name__)

GROUPS = ("ssm", "others")


def cosine_lr(base_lr, step, total_steps):
    if total_steps <= 0:
        return base_lr
    step = min(max(step, 0), total_steps)
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def _real(arr):
    return arr.view(arr.real.dtype) if np.iscomplexobj(arr) else arr


class Adam:
    """Adam with decoupled weight decay; complex arrays update as real pairs."""

    def __init__(self, base_lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8, total_steps=0):
        self.base_lr = dict(base_lr)
        self.weight_decay = dict(weight_decay)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.total_steps = total_steps
        self.step_count = 0
        self.m = {}
        self.v = {}

    @classmethod
    def from_config(cls, optim, total_steps):
        return cls(
            {"ssm": optim.lr_ssm, "others": optim.lr_others},
            {"ssm": optim.wd_ssm, "others": optim.wd_others},
            optim.beta1, optim.beta2, optim.eps, total_steps,
        )

    def lr(self, group, step=None):
        step = self.step_count if step is None else step
        return cosine_lr(self.base_lr[group], step, self.total_steps)

    def step(self, net, grads):
        """Apply one update, then clip every eigenvalue back into the unit disk."""
        k = self.step_count
        lrs = {g: self.lr(g, k) for g in GROUPS}
        for name, group, _ in net.trainable_parameters():
            g = grads[name]
            if not np.isfinite(g).all():
                layer = int(name.split(".")[1]) if name.startswith("layers.") else None
                raise TrainingDivergedError(k, name, layer)
        t = k + 1
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, group, arr in net.trainable_parameters():
            p = _real(arr)
            g = _real(np.ascontiguousarray(grads[name], dtype=arr.dtype))
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            lr = lrs[group]
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay[group]:
                update = update + lr * self.weight_decay[group] * p
            p -= update
        for layer in net.layers:
            layer.neurons = stability_clip(layer.neurons)
            assert (np.abs(layer.neurons.lam) <= 1.0).all()
        self.step_count += 1
        net.bump()
        return lrs

    def state_dict(self):
        arrays = {}
        for name in self.m:
            arrays[f"m/{name}"] = self.m[name].copy()
            arrays[f"v/{name}"] = self.v[name].copy()
        return {
            "step_count": self.step_count, "total_steps": self.total_steps,
            "base_lr": self.base_lr, "weight_decay": self.weight_decay,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "arrays": arrays,
        }

    @classmethod
    def from_state_dict(cls, state):
        opt = cls(state["base_lr"], state["weight_decay"], state["beta1"], state["beta2"],
                  state["eps"], state["total_steps"])
        opt.step_count = state["step_count"]
        for key, arr in state.get("arrays", {}).items():
            kind, name = key.split("/", 1)
            (opt.m if kind == "m" else opt.v)[name] = np.array(arr, copy=True)
        return opt


def adam_step(net, opt, grads):
    return opt.step(net, grads)


# -- training loop -------------------------------------------------------------


@dataclass
class TrialResult:
    trial: int
    seed: int
    test_accuracy: float
    curves: list = field(default_factory=list)
    wall_clock: float = 0.0
    failed: bool = False
    error: str = ""


def accuracy(net, batch, batch_size=256):
    if len(batch) == 0:
        return float("nan")
    preds = net.predict(batch.counts, batch_size)
    return float((preds == batch.labels).mean())


def trial_seed(seed, trial):
    return int(np.random.SeedSequence([seed, trial]).generate_state(1)[0])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def steps_per_epoch(n, batch_size):
    full, rest = divmod(n, batch_size)
    return full + (1 if rest >= 2 else 0)


def _mean_rates(rates):
    """Per-layer mean spike rate over an epoch; None for non-spiking layers."""
    if not rates:
        return []
    arr = np.array(rates)
    return [None if np.isnan(col).all() else float(col.mean()) for col in arr.T]


def train(net, train_set, config, seed, val_set=None, metrics_path=None, on_step=None):
    """Train ``net`` in place. Returns per-epoch metric records."""
    rng = np.random.default_rng(seed)
    per_epoch = steps_per_epoch(len(train_set), config.optim.batch_size)
    if per_epoch == 0 and config.epochs > 0:
        raise ValueError("training set needs at least two samples")
    if config.budget_unit == "epochs":
        total = config.epochs * per_epoch
    else:
        total = config.epochs
    opt = Adam.from_config(config.optim, total)
    curves = []
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        epoch = 0
        while opt.step_count < total:
            loss_sum = correct = seen = 0
            rates = []
            for idx in _batches(len(train_set), config.optim.batch_size, rng):
                if opt.step_count >= total:
                    break
                batch = train_set.subset(idx)
                loss, logits, tape = forward_unroll(net, batch.counts, batch.labels, "train", rng)
                grads = backward_unroll(tape, net)
                lrs = opt.step(net, grads)
                for layer, cache in zip(net.layers, tape.layers):
                    update_running_stats(layer.bn, cache.bn)
                loss_sum += loss * len(idx)
                correct += int((logits.argmax(axis=1) == batch.labels).sum())
                seen += len(idx)
                rates.append(tape.spike_rates)
                if on_step is not None:
                    on_step(net, opt, loss)
            record = {
                "epoch": epoch,
                "train_loss": loss_sum / max(seen, 1),
                "train_acc": correct / max(seen, 1),
                "val_acc": accuracy(net, val_set) if val_set is not None else None,
                "lr_ssm": lrs["ssm"],
                "lr_others": lrs["others"],
                "spike_rate_per_layer": _mean_rates(rates),
            }
            curves.append(record)
            if fh:
                fh.write(json.dumps(record) + "\n")
                fh.flush()
            log.info("epoch %d loss %.4f acc %.3f", epoch, record["train_loss"], record["train_acc"])
            epoch += 1
    finally:
        if fh:
            fh.close()
    return curves, opt


def load_data(config):
    """Train and test batches for a config; HPO mode holds out a validation split."""
    ds = config.dataset
    if ds.kind == "synthetic":
        params = dict(ds.synthetic)
        params.setdefault("channels", config.network.input_dim)
        params.setdefault("classes", config.network.num_classes)
        params.setdefault("T", ds.num_bins)
        train_set, test_set = datamod.synthetic_dataset(**params)
    else:
        train = datamod.load_dataset(ds.path, "train", ds.train_manifest)
        test = datamod.load_dataset(ds.path, "test", ds.test_manifest)
        train_set = datamod.bin_records(train, ds.num_bins, config.network.input_dim)
        test_set = datamod.bin_records(test, ds.num_bins, config.network.input_dim)
    return train_set, test_set


def split_validation(train_set, fraction, seed):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train_set))
    k = max(1, int(round(fraction * len(train_set))))
    return train_set.subset(np.sort(order[k:])), train_set.subset(np.sort(order[:k]))


def run_trial(config, trial, data=None):
    seed = trial_seed(config.seed, trial)
    out = Path(config.output_dir) / f"trial_{trial:02d}" if config.output_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    train_set, test_set = data if data is not None else load_data(config)
    val_set = None
    if config.hpo:
        train_set, val_set = split_validation(train_set, config.val_fraction, seed)
    net = Network.init(config.network, seed=seed)
    try:
        curves, opt = train(net, train_set, config, seed, val_set,
                            out / "metrics.jsonl" if out else None)
    except (SsmSpikeError, FloatingPointError) as exc:
        result = TrialResult(trial, seed, float("nan"), [], time.perf_counter() - start, True, str(exc))
        if out:
            (out / "result.json").write_text(json.dumps(asdict(result), indent=2))
        return result
    # in HPO mode the held-out validation split stands in for the test split
    eval_set = val_set if config.hpo else test_set
    acc = accuracy(net, eval_set)
    result = TrialResult(trial, seed, acc, curves, time.perf_counter() - start)
    if out:
        save_checkpoint(out / "checkpoint.npz", net, opt.state_dict(),
                        seeds={"trial_seed": seed, "config_seed": config.seed})
        (out / "result.json").write_text(json.dumps(asdict(result), indent=2))
    return result


def _run_trial_job(args):
    config, trial = args
    return run_trial(config, trial)


def summarize(results):
    accs = np.array([r.test_accuracy for r in results if not r.failed])
    std = float(accs.std(ddof=1)) if len(accs) > 1 else 0.0
    return {
        "mean_acc": float(accs.mean()) if len(accs) else float("nan"),
        "std_acc": std,
        "accuracies": accs.tolist(),
        "n_ok": int(len(accs)),
        "n_failed": sum(r.failed for r in results),
        "failed_trials": [r.trial for r in results if r.failed],
    }


def run_trials(config, data=None):
    """Train ``config.trials`` independently seeded models and aggregate test accuracy."""
    if config.output_dir:
        Path(config.output_dir).mkdir(parents=True, exist_ok=True)
        (Path(config.output_dir) / "config.json").write_text(config.to_json())
    if config.workers > 1 and config.trials > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            results = list(pool.map(_run_trial_job, [(config, k) for k in range(config.trials)]))
    else:
        data = data if data is not None else load_data(config)
        results = [run_trial(config, k, data) for k in range(config.trials)]
    summary = summarize(results)
    summary["trials"] = [asdict(r) for r in results]
    summary["config_hash"] = config.cell_hash()
    if config.output_dir:
        (Path(config.output_dir) / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary
