"""Command-line front end.

Exit codes: 0 success, 1 config error, 2 runtime failure, 3 check failure.
"""

import argparse
import copy
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from itertools import product
from pathlib import Path

import numpy as np

from . import data as datamod
from .activations import ActivationKind
from .bptt import grad_check
from .config import ExperimentConfig
from .errors import ConfigError, SsmSpikeError
from .network import LayerSpec, Network, NetworkSpec
from .training import run_trials

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("ssmspike")

AXES = ("h", "n", "n_in", "n_out", "transition", "activation")


# -- run -----------------------------------------------------------------------


def _load_config(path, args):
    cfg = ExperimentConfig.load(path)
    overrides = {}
    if getattr(args, "output_dir", None):
        overrides["output_dir"] = args.output_dir
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "workers", None):
        overrides["workers"] = args.workers
    return replace(cfg, **overrides) if overrides else cfg


def cmd_run(args):
    cfg = _load_config(args.config, args)
    summary = run_trials(cfg)
    record = {"mean_acc": summary["mean_acc"], "std_acc": summary["std_acc"],
              "n_ok": summary["n_ok"], "n_failed": summary["n_failed"],
              "config_hash": summary["config_hash"]}
    print(json.dumps(record))
    return EXIT_RUNTIME if summary["n_failed"] else EXIT_OK


# -- sweep ---------------------------------------------------------------------


def apply_cell(base, cell):
    """Config dict for one sweep cell; axis values apply to every hidden layer."""
    d = copy.deepcopy(base)
    net = d.setdefault("network", {})
    layers = net.get("layers") or []
    for key, value in cell.items():
        if key not in AXES:
            raise ConfigError(f"unknown sweep axis, expected one of {AXES}", f"cells.{key}")
        for layer in layers:
            if key == "activation":
                act = dict(layer.get("activation") or {})
                if isinstance(value, dict):
                    act.update(value)
                else:
                    act["variant"] = value
                layer["activation"] = act
            else:
                layer[key] = value
    return d


def expand_cells(sweep):
    if "cells" in sweep:
        return [dict(c) for c in sweep["cells"]]
    axes = sweep.get("axes")
    if not axes:
        raise ConfigError("sweep needs 'cells' or 'axes'", "axes")
    names = list(axes)
    if sweep.get("zip"):
        lengths = {len(axes[k]) for k in names}
        if len(lengths) != 1:
            raise ConfigError("zipped axes must have equal lengths", "axes")
        return [dict(zip(names, vals)) for vals in zip(*(axes[k] for k in names))]
    return [dict(zip(names, vals)) for vals in product(*(axes[k] for k in names))]


def cell_config(base, cell, global_seed, root, index):
    d = apply_cell(base, cell)
    d["seed"] = 0
    d.pop("output_dir", None)
    cfg = ExperimentConfig.from_dict(d)
    ident = int(cfg.cell_hash(), 16) % (2 ** 32)
    seed = int(np.random.SeedSequence([global_seed, ident]).generate_state(1)[0])
    out = str(Path(root) / f"cell_{index:03d}") if root else None
    return replace(cfg, seed=seed, output_dir=out, workers=1)


def _run_cell(args):
    index, cell, cfg = args
    try:
        summary = run_trials(cfg)
        status = "ok" if summary["n_failed"] == 0 else "partial"
        return index, cell, cfg, summary, status, ""
    except Exception as exc:  # noqa: BLE001 - one failing cell must not stop the sweep
        return index, cell, cfg, None, "failed", f"{type(exc).__name__}: {exc}"


def _fmt(cell_value):
    return cell_value if not isinstance(cell_value, dict) else json.dumps(cell_value, sort_keys=True)


def run_sweep(sweep, output_dir, workers=1, seed=None):
    base = sweep.get("base")
    if not isinstance(base, dict):
        raise ConfigError("sweep needs a 'base' config object", "base")
    global_seed = sweep.get("seed", base.get("seed", 0)) if seed is None else seed
    cells = expand_cells(sweep)
    out = Path(output_dir) if output_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for k, cell in enumerate(cells):
        cfg = cell_config(base, cell, global_seed, out, k)
        if out:
            (out / f"cell_{k:03d}.json").write_text(cfg.to_json())
        jobs.append((k, cell, cfg))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            done = list(pool.map(_run_cell, jobs))
    else:
        done = [_run_cell(job) for job in jobs]
    done.sort(key=lambda r: r[0])
    axis_names = [a for a in AXES if any(a in c for c in cells)]
    rows = []
    for index, cell, cfg, summary, status, error in done:
        row = {"cell": index}
        row.update({a: _fmt(cell.get(a, "")) for a in axis_names})
        row.update({
            "mean_acc": summary["mean_acc"] if summary else float("nan"),
            "std_acc": summary["std_acc"] if summary else float("nan"),
            "accuracy": (f"{100 * summary['mean_acc']:.1f} ± {100 * summary['std_acc']:.1f} %"
                         if summary and summary["n_ok"] else "n/a"),
            "trials_ok": summary["n_ok"] if summary else 0,
            "trials_failed": summary["n_failed"] if summary else cfg.trials,
            "status": status,
            "error": error,
            "config_hash": cfg.cell_hash(),
            "seed": cfg.seed,
        })
        rows.append(row)
    result = {"name": sweep.get("name", "sweep"), "axes": axis_names, "rows": rows}
    if out:
        with open(out / "results.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["cell"])
            writer.writeheader()
            writer.writerows(rows)
        (out / "results.json").write_text(json.dumps(result, indent=2))
    return result


def cmd_sweep(args):
    try:
        sweep = json.loads(Path(args.sweep).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    result = run_sweep(sweep, args.output_dir, args.workers or 1, args.seed)
    for row in result["rows"]:
        label = " ".join(f"{a}={row[a]}" for a in result["axes"])
        print(f"{label:50s} {row['accuracy']:>18s} [{row['status']}] {row['config_hash']}")
    return EXIT_OK if all(r["status"] == "ok" for r in result["rows"]) else EXIT_RUNTIME


# -- gradcheck -----------------------------------------------------------------


def default_gradcheck_spec():
    layer = LayerSpec(2, 4, 1, 1, "non_diagonal_dft", ActivationKind("signed_spike"))
    return NetworkSpec(layers=(layer, layer), input_dim=6, num_classes=3, dropout_p=0.0)


def gradcheck_variants(spec):
    """GELU and surrogate-smoothed spiking versions of ``spec``."""
    variants = {}
    gelu = [replace(l, activation=replace(l.activation, variant="gelu", smooth=False)) for l in spec.layers]
    variants["gelu"] = replace(spec, layers=tuple(gelu))
    smooth = []
    for l in spec.layers:
        act = l.activation if l.activation.is_spiking else replace(l.activation, variant="signed_spike")
        smooth.append(replace(l, activation=act.smoothed()))
    variants["surrogate_smoothed"] = replace(spec, layers=tuple(smooth))
    return variants


def run_gradcheck(spec, tolerance=1e-4, seed=0, batch=4, T=8, backward=None):
    rng = np.random.default_rng(seed)
    counts = rng.poisson(1.0, (batch, T, spec.input_dim))
    labels = rng.integers(0, spec.num_classes, batch)
    reports = {}
    for name, variant in gradcheck_variants(spec).items():
        net = Network.init(variant, seed=seed)
        reports[name] = grad_check(net, counts, labels, tolerance, seed=seed, backward=backward)
    return reports


def cmd_gradcheck(args):
    if args.config:
        d = json.loads(Path(args.config).read_text())
        d = d.get("network", d)
        spec = NetworkSpec.from_dict(d)
    else:
        spec = default_gradcheck_spec()
    reports = run_gradcheck(spec, args.tolerance, args.seed or 0, args.batch, args.steps)
    ok = True
    for name, rep in reports.items():
        print(f"[{name}] {'PASS' if rep.passed else 'FAIL'} (tolerance {rep.tolerance:g})")
        for line in rep.lines():
            print("  " + line)
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_CHECK


# -- data ----------------------------------------------------------------------


def cmd_convert_dataset(args):
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, src in (("train", args.train), ("test", args.test)):
        if src:
            n = datamod.convert_shd_h5(src, datamod.container_path(out, split), split)
            print(f"{split}: {n} records -> {datamod.container_path(out, split)}")
    return EXIT_OK


def cmd_make_manifest(args):
    records = datamod.load_dataset(args.data, args.split)
    ids = datamod.stratified_manifest(records, args.count, args.seed or 0)
    datamod.write_manifest(args.out, ids)
    print(f"wrote {len(ids)} ids to {args.out}")
    return EXIT_OK


def emit_plots(source, output_dir):
    """Write gnuplot-ready whitespace-separated data files; returns their paths."""
    source = Path(source)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    results = source / "results.json" if source.is_dir() else source
    if results.name == "results.json" and results.exists():
        res = json.loads(results.read_text())
        path = out / f"{res['name']}.dat"
        with open(path, "w") as fh:
            fh.write("# cell " + " ".join(res["axes"]) + " mean_acc std_acc\n")
            for row in res["rows"]:
                vals = " ".join(str(row[a]).replace(" ", "_") for a in res["axes"])
                fh.write(f"{row['cell']} {vals} {row['mean_acc']:.6f} {row['std_acc']:.6f}\n")
        written.append(path)
    for metrics in sorted(source.glob("**/metrics.jsonl")) if source.is_dir() else []:
        rel = metrics.parent.relative_to(source)
        path = out / ("_".join(rel.parts) + "_curves.dat")
        with open(path, "w") as fh:
            fh.write("# epoch train_loss train_acc val_acc lr_ssm lr_others\n")
            for line in metrics.read_text().splitlines():
                r = json.loads(line)
                val = r["val_acc"] if r["val_acc"] is not None else float("nan")
                fh.write(f"{r['epoch']} {r['train_loss']:.6f} {r['train_acc']:.6f} {val:.6f} "
                         f"{r['lr_ssm']:.6e} {r['lr_others']:.6e}\n")
        written.append(path)
    return written


def cmd_emit_plots(args):
    paths = emit_plots(args.source, args.output_dir)
    for p in paths:
        print(p)
    return EXIT_OK if paths else EXIT_RUNTIME


# -- entry point ---------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="ssmspike", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate every trial of a config")
    r.add_argument("config")
    r.add_argument("-o", "--output-dir")
    r.add_argument("-j", "--workers", type=int)
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a grid of cells and emit CSV/JSON tables")
    s.add_argument("sweep")
    s.add_argument("-o", "--output-dir", required=True)
    s.add_argument("-j", "--workers", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gradcheck", help="compare BPTT gradients with finite differences")
    g.add_argument("config", nargs="?")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--seed", type=int)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--steps", type=int, default=8)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("convert-dataset", help="convert published SHD HDF5 files")
    c.add_argument("--train")
    c.add_argument("--test")
    c.add_argument("-o", "--output-dir", required=True)
    c.set_defaults(func=cmd_convert_dataset)

    m = sub.add_parser("make-manifest", help="write a class-stratified subset manifest")
    m.add_argument("--data", required=True)
    m.add_argument("--split", choices=datamod.SPLITS, required=True)
    m.add_argument("--count", type=int, required=True)
    m.add_argument("--seed", type=int)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_manifest)

    e = sub.add_parser("emit-plots", help="write gnuplot data files from results")
    e.add_argument("source")
    e.add_argument("-o", "--output-dir", required=True)
    e.set_defaults(func=cmd_emit_plots)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SsmSpikeError, OSError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
