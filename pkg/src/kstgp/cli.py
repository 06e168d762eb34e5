"""Command-line front end: ``kstgp {train,eval,explain,sweep}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from kstgp import data as data_mod
from kstgp import explain, model_io
from kstgp.errors import DimensionMismatch, InvalidConfig, KSTGPError, RowOutOfRange
from kstgp.gp import DEFAULT_FIT_BUDGET
from kstgp.network import new_network
from kstgp.training import DEFAULT_BATCH_SIZE, TrainConfig, evaluate, train, write_history

logger = logging.getLogger("kstgp")

OUT_ENV = "KSTGP_OUT"


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run depends on."""

    data: str | None = None
    label_col: int = -1
    units: int = 2
    points: int = 6
    epochs: int = 1000
    eta_inner: float = 1e-1
    eta_outer: float = 1e-3
    seed_init: int = 0
    seed_split: int = 0
    seed_noise: int = 0
    noise: bool = True
    split_ratio: float = 0.7
    batch_size: int = DEFAULT_BATCH_SIZE  # 0 means full batch
    reduction: str = "mean"
    hyperfit_budget: int = DEFAULT_FIT_BUDGET
    out: str | None = None

    def validate(self):
        if self.data is None:
            raise InvalidConfig("no dataset given (--data)")
        if self.units < 1:
            raise InvalidConfig(f"units must be >= 1, got {self.units}")
        if self.batch_size < 0:
            raise InvalidConfig(f"batch size must be >= 0, got {self.batch_size}")
        if self.points < 2:
            raise InvalidConfig(f"points must be >= 2, got {self.points}")
        self.train_config()
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            eta_inner=self.eta_inner,
            eta_outer=self.eta_outer,
            batch_size=self.batch_size or None,
            seed=self.seed_init,
            hyperfit_budget=self.hyperfit_budget,
            reduction=self.reduction,
        )


_CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def resolve_config(args) -> RunConfig:
    """Defaults, then the optional JSON config file, then explicit flags."""
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config file: {exc}") from None
        unknown = set(cfg) - _CONFIG_KEYS
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        values.update(cfg)
    for key in _CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    cfg = RunConfig(**values)
    if cfg.out is None:
        cfg = replace(cfg, out=os.environ.get(OUT_ENV, "runs"))
    return cfg


def load_split(cfg: RunConfig):
    ds = data_mod.prepare(cfg.data, cfg.label_col, cfg.seed_noise if cfg.noise else None)
    return ds, data_mod.split(ds, cfg.split_ratio, cfg.seed_split)


def run_training(cfg: RunConfig, on_epoch=None):
    """Train one model; returns (network, history, dataset, split)."""
    ds, sp = load_split(cfg)
    net = new_network(ds.dims, cfg.units - 1, cfg.points, cfg.seed_init)
    net, history = train(net, sp, cfg.train_config(), on_epoch)
    return net, history, ds, sp


def model_metadata(cfg: RunConfig, ds, sp, net, history) -> dict:
    last = history[-1]
    raw_ranges = ds.ranges[:-1] if cfg.noise else ds.ranges
    return {
        # the output directory is where the run was written, not part of the model
        "config": {k: v for k, v in asdict(cfg).items() if k != "out"},
        "feature_names": ds.feature_names,
        "standardization": [list(r) for r in raw_ranges],
        "noise_seed": cfg.seed_noise if cfg.noise else None,
        "split": {"ratio": cfg.split_ratio, "seed": cfg.seed_split},
        "unit_sum_ranges": [list(r) for r in explain.unit_sum_ranges(net, sp.train.features)],
        "summary": {
            "epochs": len(history),
            "train_loss": last.train_loss,
            "val_loss": last.val_loss,
            "train_acc": last.train_acc,
            "val_acc": last.val_acc,
        },
    }


def cmd_train(args) -> int:
    cfg = resolve_config(args).validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    net, history, ds, sp = run_training(cfg)
    wall = time.perf_counter() - t0
    meta = model_metadata(cfg, ds, sp, net, history)
    model_io.save(out / "model.json", net, **meta)
    write_history(out / "metrics.csv", history)
    summary = dict(meta["summary"], wall_seconds=wall, train_size=len(sp.train), val_size=len(sp.validation))
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    print(
        f"train_acc={summary['train_acc']:.4f} val_acc={summary['val_acc']:.4f} "
        f"train_loss={summary['train_loss']:.6g} val_loss={summary['val_loss']:.6g} "
        f"wall={wall:.1f}s model={out / 'model.json'}"
    )
    return 0


def load_model_data(model_path, data_path=None, label_col=None):
    """Load a model and re-create its dataset with the stored scaling and noise seed."""
    net, meta = model_io.load(model_path)
    cfg = meta.get("config", {})
    path = data_path or cfg.get("data")
    if path is None:
        return net, meta, None
    ds = data_mod.prepare(
        path,
        cfg.get("label_col", -1) if label_col is None else label_col,
        meta.get("noise_seed"),
        ranges=[tuple(r) for r in meta["standardization"]],
    )
    if ds.dims != net.dims:
        raise DimensionMismatch(f"dataset has {ds.dims} features, model expects {net.dims}")
    return net, meta, ds


def _select(ds, meta, which):
    if which == "all":
        return ds
    split = meta.get("split", {})
    sp = data_mod.split(ds, split.get("ratio", 0.7), split.get("seed", 0))
    return sp.train if which == "train" else sp.validation


def cmd_eval(args) -> int:
    net, meta, ds = load_model_data(args.model, args.data, args.label_col)
    if ds is None:
        raise InvalidConfig("no dataset given and none recorded in the model")
    part = _select(ds, meta, args.split)
    acc, loss = evaluate(net, part.features, part.labels)
    print(f"accuracy={acc!r} loss={loss!r} n={len(part)} split={args.split}")
    return 0


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _parse_interval(text):
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise InvalidConfig(f"expected lo:hi, got {text!r}") from None
    return lo, hi


def cmd_explain(args) -> int:
    net, meta, ds = load_model_data(args.model, args.data, args.label_col)
    out = Path(args.out or os.environ.get(OUT_ENV, "runs")) / "explain"
    out.mkdir(parents=True, exist_ok=True)

    sym = explain.export_symbolic(net)
    (out / "symbolic.txt").write_text(sym.text)

    ranges = meta.get("unit_sum_ranges")
    markers = {}
    trace = None
    if args.trace_row is not None:
        if ds is None:
            raise InvalidConfig("--trace-row needs a dataset")
        if not 0 <= args.trace_row < len(ds):
            raise RowOutOfRange(f"row {args.trace_row} outside 0..{len(ds) - 1}")
        trace = explain.trace_instance(net, ds.features[args.trace_row], ds.labels[args.trace_row])
        rows = [
            (explain.af_name(af_id), x, y) for af_id, (x, y) in trace.markers.items()
        ]
        rows.append(("F", "", trace.output))
        _write_csv(out / f"trace_row_{args.trace_row}.csv", ["activation", "input", "output"], rows)
        print(f"row {args.trace_row}: output={trace.output:.6g} predicted={trace.predicted} label={trace.label}")
        for af_id, (x, y) in trace.markers.items():
            markers.setdefault(af_id, []).append((x, y, trace.label))
    elif ds is not None:
        # mark one representative of each class on every curve
        for label in (1, 0):
            idx = np.flatnonzero(ds.labels == label)
            if idx.size:
                t = explain.trace_instance(net, ds.features[idx[0]], label)
                for af_id, (x, y) in t.markers.items():
                    markers.setdefault(af_id, []).append((x, y, label))

    for af_id, af in net.activations():
        curve = explain.sample_af(net, af_id, args.grid, unit_sum_range=ranges)
        stem = explain.af_file_stem(af_id)
        _write_csv(out / f"{stem}.csv", ["x", "mean", "variance"], curve.tolist())
        if not args.no_svg:
            svg = explain.render_svg(curve, explain.af_name(af_id), (af.xs, af.ys), markers.get(af_id, ()))
            (out / f"{stem}.svg").write_text(svg)

    if ds is not None:
        rep = explain.influence_report(net, ds.features)
        names = ds.feature_names
        rows = [("unit", r, "", rng) for r, rng in enumerate(rep.unit_ranges)]
        for r in range(net.n_units):
            for d in range(net.dims):
                rows.append(("attribute", r, names[d], rep.attribute_ranges[r, d]))
        _write_csv(out / "influence.csv", ["kind", "unit", "attribute", "range"], rows)
        _write_csv(
            out / "ranking.csv",
            ["rank", "attribute", "max_range"],
            [(i, names[d], rep.attribute_max[d]) for i, d in enumerate(rep.ranking)],
        )
        print("unit ranges: " + ", ".join(f"{v:.4g}" for v in rep.unit_ranges))
        print("attribute ranking: " + ", ".join(names[d] for d in rep.ranking))

    if args.reverse:
        res = explain.reverse_query(net, _parse_interval(args.reverse), args.reverse_samples, args.reverse_seed)
        names = ds.feature_names if ds is not None else [f"x{d + 1}" for d in range(net.dims)]
        _write_csv(
            out / "reverse.csv",
            names + ["output"],
            np.column_stack([res.inputs, res.outputs]).tolist(),
        )
        print(f"reverse {args.reverse}: accepted {len(res.outputs)}/{res.samples} rate={res.acceptance_rate:.4g}")
    print(f"wrote {out}")
    return 0


def _sweep_cell(cfg: RunConfig):
    try:
        _, history, _, _ = run_training(cfg)
    except KSTGPError as exc:
        return cfg.points, cfg.units, cfg.seed_init, None, None, str(exc)
    last = history[-1]
    return cfg.points, cfg.units, cfg.seed_init, last.train_loss, last.val_acc, ""


def run_sweep(base: RunConfig, points, units, seeds, jobs=1):
    """Train every (points, units, seed) cell; returns (per-run rows, per-cell rows)."""
    cells = [replace(base, points=p, units=u, seed_init=s) for p in points for u in units for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            runs = list(pool.map(_sweep_cell, cells))
    else:
        runs = [_sweep_cell(c) for c in cells]
    table = []
    for p in points:
        for u in units:
            losses = [r[3] for r in runs if r[0] == p and r[1] == u and r[3] is not None]
            failed = sum(1 for r in runs if r[0] == p and r[1] == u and r[3] is None)
            if losses:
                table.append((p, u, len(losses), failed, float(np.mean(losses)), float(np.min(losses))))
            else:
                table.append((p, u, 0, failed, float("nan"), float("nan")))
    return runs, table


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_sweep(args) -> int:
    cfg = resolve_config(args).validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if not (args.sweep_points and args.sweep_units and args.sweep_seeds):
        raise InvalidConfig("sweep grids must be non-empty")
    runs, table = run_sweep(cfg, args.sweep_points, args.sweep_units, args.sweep_seeds, args.jobs)
    _write_csv(out / "sweep_runs.csv", ["points", "units", "seed", "final_train_loss", "final_val_acc", "error"], runs)
    _write_csv(out / "sweep.csv", ["points", "units", "runs_ok", "runs_failed", "mean_loss", "min_loss"], table)
    for row in table:
        print("points={} units={} ok={} failed={} mean_loss={:.6g} min_loss={:.6g}".format(*row))
    return 0


def _add_run_flags(p):
    p.add_argument("--config", help="JSON file of run settings (flags override it)")
    p.add_argument("--data", help="comma-separated dataset, one instance per row")
    p.add_argument("--label-col", dest="label_col", type=int, help="label column index (default: last)")
    p.add_argument("--units", type=int, help="number of units, i.e. repetition level + 1 (default 2)")
    p.add_argument("--points", type=int, help="control points per activation (default 6)")
    p.add_argument("--epochs", type=int, help="training epochs (default 1000)")
    p.add_argument("--eta-inner", dest="eta_inner", type=float, help="layer-1 learning rate (default 0.1)")
    p.add_argument("--eta-outer", dest="eta_outer", type=float, help="layer-2 learning rate (default 0.001)")
    p.add_argument("--seed-init", dest="seed_init", type=int)
    p.add_argument("--seed-split", dest="seed_split", type=int)
    p.add_argument("--seed-noise", dest="seed_noise", type=int)
    p.add_argument("--no-noise", dest="noise", action="store_const", const=False,
                   help="do not append the uniform noise attribute")
    p.add_argument("--batch-size", dest="batch_size", type=int,
                   help=f"mini-batch size, 0 for full batch (default {DEFAULT_BATCH_SIZE})")
    p.add_argument("--reduction", choices=("mean", "sum"),
                   help="combine per-instance losses in a batch by mean (default) or sum")
    p.add_argument("--hyperfit-budget", dest="hyperfit_budget", type=int,
                   help="kernel refit steps per activation per epoch (default 50)")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kstgp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write model.json, metrics.csv, summary.json")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and mean loss of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="dataset (default: the one recorded in the model)")
    p.add_argument("--label-col", dest="label_col", type=int)
    p.add_argument("--split", choices=("all", "train", "validation"), default="all")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="symbolic model, activation curves, influence report")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="dataset (default: the one recorded in the model)")
    p.add_argument("--label-col", dest="label_col", type=int)
    p.add_argument("--out")
    p.add_argument("--grid", type=int, default=201, help="samples per activation curve")
    p.add_argument("--trace-row", dest="trace_row", type=int, help="backtrack this data row (0-based)")
    p.add_argument("--reverse", metavar="LO:HI", help="sample inputs whose output lies in [LO, HI]; write --reverse=LO:HI when LO is negative")
    p.add_argument("--reverse-samples", dest="reverse_samples", type=int, default=10000)
    p.add_argument("--reverse-seed", dest="reverse_seed", type=int, default=0)
    p.add_argument("--no-svg", dest="no_svg", action="store_true")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("sweep", help="train over a grid of control-point counts and unit counts")
    _add_run_flags(p)
    p.add_argument("--sweep-points", dest="sweep_points", type=_int_list, default=[4, 6, 8])
    p.add_argument("--sweep-units", dest="sweep_units", type=_int_list, default=[1, 2, 3])
    p.add_argument("--sweep-seeds", dest="sweep_seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except KSTGPError as exc:
        print(f"kstgp: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
