"""Command-line interface: ``fskan <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 validation failure (bad file, config
or argument value), 3 numerical verification failure.

Training configs are JSON objects; see ``ExperimentConfig`` for the keys.
Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import datagen
from .datagen import DataError, Dataset
from .expressivity import (
    ConversionError,
    ParamSharingMLP,
    build_ps_mlp,
    fskan_to_mlp,
    mlp_to_fskan,
)
from .layers import KABank, LayerError
from .network import build_fskan, network_from_dict
from .permgroup import GroupError, BudgetExceeded, enumerate_orbits, parse_group
from .spline import SplineConfig, SplineError
from .train import TrainConfig, TrainError, evaluate, train_run

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3
MODEL_KINDS = ("fskan", "efficient-fskan", "ps-mlp")


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """A training run.

    ``widths`` lists the equivariant widths followed by the invariant width;
    an integer ``widths`` with ``depth`` equivariant layers expands to
    ``[widths] * (depth + 1)``.
    """

    data_dir: str = "data"
    out_dir: str = "run"
    task: str = "classification"
    group: str = ""
    model: str = "fskan"
    widths: object = (16, 16, 8)
    depth: int | None = None
    num_classes: int | None = None
    num_intervals: int = 5
    grid_range: tuple = (-1.0, 1.0)
    invariant_grid_range: tuple | None = None
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    reg_coeff: float = 1e-2
    weight_decay: float = 0.01
    seed: int = 0
    aggregation: str = "sum"

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        if not isinstance(d, dict):
            raise ValidationError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        if self.model not in MODEL_KINDS:
            raise ValidationError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.aggregation not in ("sum", "mean"):
            raise ValidationError(f"aggregation must be sum or mean, got {self.aggregation!r}")
        if isinstance(self.widths, int):
            depth = 1 if self.depth is None else self.depth
            self.widths = [self.widths] * (depth + 1)
        self.widths = [int(w) for w in self.widths]
        if not self.widths or min(self.widths) < 1:
            raise ValidationError("widths must be positive")
        if self.depth is not None and self.depth != len(self.widths) - 1:
            raise ValidationError(f"depth {self.depth} does not match widths {self.widths}")
        self.grid_range = tuple(float(v) for v in self.grid_range)
        if self.invariant_grid_range is not None:
            self.invariant_grid_range = tuple(float(v) for v in self.invariant_grid_range)
        try:
            self.train_config()
        except TrainError as e:
            raise ValidationError(str(e)) from e

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, reg_coeff=self.reg_coeff,
                           weight_decay=self.weight_decay, seed=self.seed, task=self.task,
                           aggregation=self.aggregation, widths=tuple(self.widths))


def load_config(path) -> ExperimentConfig:
    with open(_existing(path)) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON ({e})") from e
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _existing(path):
    if not os.path.isfile(path):
        raise ValidationError(f"no such file: {path}")
    return path


def _emit(args, payload: dict, text: str | None = None):
    if args.json or text is None:
        print(json.dumps(payload, indent=None if args.json else 2))
    else:
        print(text)


def _read_model(path):
    with open(_existing(path)) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON ({e})") from e
    try:
        net = network_from_dict(d)
    except (KeyError, TypeError) as e:
        raise ValidationError(f"{path}: malformed model ({e})") from e
    return net, d.get("meta", {})


def _write_model(net, path, meta: dict):
    d = net.to_dict()
    d["meta"] = meta
    with open(path, "w") as fh:
        json.dump(d, fh)


def _input_channels(net) -> int:
    return int(net.blocks[0].layer.d_in)


def _load_data(path, d_in: int | None = None, positions: int | None = None) -> Dataset:
    ds = Dataset.from_jsonl(_existing(path))
    raw = ds.x.reshape(len(ds), -1)
    size = raw.shape[1]
    if positions is not None:
        if size % positions:
            raise ValidationError(f"{path}: sample size {size} does not fit {positions} positions")
        ds.x = raw.reshape(len(ds), positions, size // positions)
    elif d_in is not None:
        if size % d_in:
            raise ValidationError(f"{path}: sample size {size} does not fit {d_in} channels")
        ds.x = raw.reshape(len(ds), size // d_in, d_in)
    return ds


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_orbits(args) -> int:
    group = parse_group(args.group)
    table = enumerate_orbits(group, args.k_out, args.k_in)
    payload = {
        "group": str(group),
        "k_out": args.k_out,
        "k_in": args.k_in,
        "num_orbits": table.num_orbits,
        "representatives": [[list(q), list(p)] for q, p in
                            (table.representative_pair(h) for h in range(table.num_orbits))],
        "sizes": np.bincount(table.ids.ravel(), minlength=table.num_orbits).tolist(),
    }
    if args.table:
        payload["table"] = table.ids.tolist()
    lines = [f"{group}: {table.num_orbits} orbits (k_out={args.k_out}, k_in={args.k_in})"]
    for h, ((q, p), s) in enumerate(zip(payload["representatives"], payload["sizes"])):
        lines.append(f"  orbit {h}: representative q={tuple(q)} p={tuple(p)}, size {s}")
    if args.table:
        lines.append("table:")
        lines.extend("  " + " ".join(str(v) for v in row) for row in table.ids)
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def _build_model(cfg: ExperimentConfig, group, d_in: int, d_out: int):
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    if cfg.model == "ps-mlp":
        return build_ps_mlp(group, d_in, cfg.widths, d_out, aggregation=cfg.aggregation, rng=rng)
    spline = SplineConfig(num_intervals=cfg.num_intervals, grid_range=cfg.grid_range)
    inv = None
    if cfg.invariant_grid_range is not None:
        inv = SplineConfig(num_intervals=cfg.num_intervals, grid_range=cfg.invariant_grid_range)
    kind = "efficient" if cfg.model == "efficient-fskan" else "fs"
    return build_fskan(group, d_in, cfg.widths, d_out, layer_kind=kind,
                       aggregation=cfg.aggregation, spline=spline, invariant_spline=inv,
                       head_spline=inv, rng=rng)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    for key in ("data_dir", "out_dir", "epochs", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    cfg.validate()
    group = parse_group(cfg.group) if cfg.group else None
    positions = group.degree if group is not None else None
    train = _load_data(os.path.join(cfg.data_dir, "train.jsonl"), positions=positions)
    val_path = os.path.join(cfg.data_dir, "val.jsonl")
    val = _load_data(val_path, positions=train.x.shape[1]) if os.path.isfile(val_path) \
        else train.subset(slice(0, 0))
    if group is None:
        group = parse_group(f"S({train.x.shape[1]})")
        cfg.group = str(group)
    if cfg.task == "classification":
        d_out = cfg.num_classes or int(np.max(train.y)) + 1
    else:
        d_out = 1
    net = _build_model(cfg, group, train.x.shape[2], d_out)
    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    result = train_run(net, (train.x, train.y), (val.x, val.y), cfg.train_config(),
                       metrics_path=metrics_path)
    model_path = os.path.join(cfg.out_dir, "model.json")
    cfg_d = asdict(cfg)
    _write_model(net, model_path, {"task": cfg.task, "config": cfg_d})
    last = result.history[-1]
    if not np.isfinite(last["train_loss"]):
        raise NumericalError("training diverged (non-finite loss)")
    payload = {"model": model_path, "metrics": metrics_path, "best_epoch": result.best_epoch,
               "best_score": result.best_score, "num_params": net.num_params(),
               "final": {k: v for k, v in last.items() if k != "wall_ms"}}
    _emit(args, payload, f"trained {cfg.model} ({net.num_params()} parameters); "
          f"best epoch {result.best_epoch}, score {result.best_score:.4f}\n"
          f"model: {model_path}\nmetrics: {metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net, meta = _read_model(args.model)
    ds = _load_data(args.data, d_in=_input_channels(net))
    task = args.task or meta.get("task")
    if task is None:
        task = "classification" if np.issubdtype(ds.y.dtype, np.integer) else "regression"
    if task == "classification":
        ds.y = ds.y.astype(np.int64)
    try:
        metrics = evaluate(net, ds.x, ds.y, task)
    except (LayerError, TrainError) as e:
        raise ValidationError(str(e)) from e
    payload = {"model": args.model, "data": args.data, "task": task, "count": len(ds), **metrics}
    text = ", ".join(f"{k}={v:.6g}" for k, v in metrics.items())
    _emit(args, payload, f"{len(ds)} samples: {text}")
    return EXIT_OK


def _parse_domain(text: str):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError as e:
        raise ValidationError(f"domain must be 'lo,hi', got {text!r}") from e
    if not hi > lo:
        raise ValidationError("domain needs lo < hi")
    return lo, hi


def cmd_convert(args) -> int:
    net, meta = _read_model(args.model)
    domain = _parse_domain(args.domain)
    rng = np.random.Generator(np.random.Philox(args.seed))
    if args.direction == "mlp2kan":
        if not isinstance(net, ParamSharingMLP):
            raise ValidationError("mlp2kan needs a ps-mlp model")
        out = mlp_to_fskan(net, domain)
        first = net.blocks[0].layer
        xs = rng.uniform(domain[0], domain[1], (args.samples, first.n_in, first.d_in))
        err = float(np.abs(out.forward(xs) - net.forward(xs)).max())
        eps = args.eps if args.eps is not None else 1e-9
        attempts = 1
    else:
        if isinstance(net, ParamSharingMLP):
            raise ValidationError("kan2mlp needs an fskan model")
        eps = args.eps if args.eps is not None else 1e-2
        try:
            out, report = fskan_to_mlp(net, domain, eps, samples=args.samples, rng=rng)
        except ConversionError as e:
            raise NumericalError(str(e)) from e
        err, attempts = report.achieved_error, report.attempts
    _write_model(out, args.out, {**meta, "converted_from": args.model,
                                 "direction": args.direction})
    payload = {"direction": args.direction, "out": args.out, "eps": eps,
               "sup_error": err, "samples": args.samples, "attempts": attempts,
               "num_params": out.num_params(), "passed": bool(err <= eps)}
    _emit(args, payload, f"{args.direction}: sampled sup error {err:.3e} "
          f"(eps {eps:g}) on {args.samples} points; wrote {args.out}")
    if err > eps:
        raise NumericalError(f"sampled sup error {err:.3e} exceeds eps {eps:g}")
    return EXIT_OK


def _write_split(ds: Dataset, out_dir, sizes):
    names = ("train", "val", "test")
    paths = {}
    for name, part in zip(names, ds.split(sizes)):
        paths[name] = os.path.join(out_dir, f"{name}.jsonl")
        part.to_jsonl(paths[name])
    return paths


def cmd_gendata(args) -> int:
    sizes = [args.train, args.val, args.test]
    if min(sizes) < 0:
        raise ValidationError("split sizes must be non-negative")
    count = sum(sizes)
    if args.task == "signals":
        ds = datagen.gen_signals(args.n, args.T, count, args.noise, args.seed)
    elif args.task == "formula":
        ds = datagen.gen_formula(args.formula, args.n, count, _parse_domain(args.box), args.seed)
    else:
        ds = datagen.gen_set_classification(args.n, count, args.seed, args.noise)
    os.makedirs(args.out, exist_ok=True)
    paths = _write_split(ds, args.out, sizes)
    meta = {k: v for k, v in ds.meta.items() if k != "params"}
    meta["splits"] = dict(zip(("train", "val", "test"), sizes))
    with open(os.path.join(args.out, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    payload = {"task": args.task, "files": paths, "meta": meta}
    _emit(args, payload, f"wrote {count} {args.task} samples to {args.out} "
          f"(train {args.train}, val {args.val}, test {args.test})")
    return EXIT_OK


def spline_rows(net, points: int = 256):
    """``(layer, orbit, out, in, x, value)`` samples of every shared function."""
    rows = []
    for b, block in enumerate(net.blocks):
        bank = getattr(block.layer, "bank", None)
        if not isinstance(bank, KABank):
            continue
        for h in range(bank.H):
            for o in range(bank.d_out):
                for i in range(bank.d_in):
                    f = bank.function(h, o, i)
                    xs = np.linspace(f.grid_lo, f.grid_hi, points)
                    for x, v in zip(xs, f(xs)):
                        rows.append((b, h, o, i, float(x), float(v)))
    return rows


def cmd_export_splines(args) -> int:
    net, _ = _read_model(args.model)
    if isinstance(net, ParamSharingMLP):
        raise ValidationError("export-splines needs an fskan model")
    rows = spline_rows(net, args.points)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "orbit", "out", "in", "x", "value"])
        w.writerows(rows)
    functions = len({r[:4] for r in rows})
    payload = {"out": args.out, "functions": functions, "points": args.points, "rows": len(rows)}
    _emit(args, payload, f"wrote {functions} shared functions ({len(rows)} rows) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable JSON output")
    p = _Parser(prog="fskan", description="Function-sharing KAN tools.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("orbits", parents=[common], help="orbit table of a group action",
                       description="Enumerate orbits of (q, p) index pairs.")
    s.add_argument("group", help="group spec, e.g. 'S(3)', 'C(4)', 'prod(S(2),S(2))'")
    s.add_argument("k_out", type=int, help="output tuple length")
    s.add_argument("k_in", type=int, help="input tuple length")
    s.add_argument("--table", action="store_true", help="include the full orbit-id table")
    s.set_defaults(func=cmd_orbits)

    s = sub.add_parser("train", parents=[common], help="train a model from a JSON config",
                       description="Train a model; writes model.json and metrics.jsonl.")
    s.add_argument("--config", required=True, help="JSON experiment config")
    s.add_argument("--data-dir", dest="data_dir", help="override data_dir")
    s.add_argument("--out-dir", dest="out_dir", help="override out_dir")
    s.add_argument("--epochs", type=int, help="override epochs")
    s.add_argument("--seed", type=int, help="override seed")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a model on a dataset",
                       description="Report loss and accuracy or RMSE.")
    s.add_argument("--model", required=True, help="model JSON file")
    s.add_argument("--data", required=True, help="dataset JSON-lines file")
    s.add_argument("--task", choices=("classification", "regression"),
                   help="override the task stored in the model")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("convert", parents=[common], help="convert between FS-KAN and ps-MLP",
                       description="Convert a model and verify it on random domain samples.")
    s.add_argument("--model", required=True, help="model JSON file")
    s.add_argument("--direction", required=True, choices=("mlp2kan", "kan2mlp"))
    s.add_argument("--eps", type=float, help="sup-error target (default 1e-2, 1e-9 for mlp2kan)")
    s.add_argument("--domain", default="-1,1", help="input box 'lo,hi' (default -1,1)")
    s.add_argument("--samples", type=int, default=10_000, help="verification samples")
    s.add_argument("--seed", type=int, default=0, help="sampling seed")
    s.add_argument("--out", required=True, help="converted model file")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset",
                       description="Write train/val/test JSON-lines splits and meta.json.")
    s.add_argument("--task", required=True, choices=("signals", "formula", "sets"))
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n", type=int, default=5, help="set size / number of copies")
    s.add_argument("--T", type=int, default=20, help="signal length")
    s.add_argument("--noise", type=float, default=0.3, help="noise level")
    s.add_argument("--formula", default="gauss_sum_sq", choices=sorted(datagen.FORMULAS))
    s.add_argument("--box", default="-1,1", help="formula input box 'lo,hi'")
    s.add_argument("--train", type=int, default=600)
    s.add_argument("--val", type=int, default=200)
    s.add_argument("--test", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gendata)

    s = sub.add_parser("export-splines", parents=[common], help="sample learned functions to CSV",
                       description="CSV columns: layer, orbit, out, in, x, value.")
    s.add_argument("--model", required=True, help="model JSON file")
    s.add_argument("--out", required=True, help="CSV path")
    s.add_argument("--points", type=int, default=256, help="samples per function")
    s.set_defaults(func=cmd_export_splines)
    return p


VALIDATION_ERRORS = (ValidationError, GroupError, BudgetExceeded, DataError, LayerError,
                     SplineError, TrainError, ValueError, KeyError, TypeError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"fskan: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConversionError, FloatingPointError) as e:
        print(f"fskan: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except VALIDATION_ERRORS as e:
        print(f"fskan: error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
