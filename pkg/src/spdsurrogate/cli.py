"""Command-line entry point: ``spdsurrogate <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import (
    DATASET_KINDS,
    CsvFormatError,
    Dataset,
    SamplingBox,
    SpdViolationError,
    generate_dataset,
    read_csv,
    write_csv,
)
from .experiments import EXPERIMENTS, ExperimentConfig, OptimizerSetting, run_experiment
from .layers import POSITIVITY_KINDS
from .report import ReportFormatError, dumps_report, loads_report, report_to_csv, validate_report
from .stats import factorial_grid
from .surrogates import FAMILIES, dumps_model, loads_model
from .tensor import NumericalFailure, min_eigenvalues
from .training import ModelSpec, TrainConfig, train

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_FORMAT = 4
EXIT_NOT_SPD = 5
EXIT_NUMERICAL = 6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_text(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return p.read_text(encoding="utf-8")


def _load_data(name: str, seed: int) -> Dataset:
    if name in DATASET_KINDS:
        return generate_dataset(name, seed)
    if not Path(name).is_file():
        raise FileNotFoundError(f"no such file: {name}")
    return read_csv(name, strict=True)


def _read_inputs(path: str) -> np.ndarray:
    """Input rows ``x1..xd`` from a CSV; other columns are ignored."""
    rows = [line for line in _read_text(path).splitlines() if line.strip() and not line.lstrip().startswith("#")]
    if not rows:
        raise CsvFormatError(f"{path}: no header row")
    reader = csv.reader(rows)
    header = [h.strip() for h in next(reader)]
    cols = [i for i, h in enumerate(header) if h == f"x{i + 1}"]
    if not cols:
        raise CsvFormatError(f"{path}: header must start with input columns x1..xd")
    out = []
    for row_no, cells in enumerate(reader, 1):
        try:
            out.append([float(cells[i]) for i in cols])
        except (ValueError, IndexError):
            raise CsvFormatError(f"{path}: row {row_no} has missing or non-numeric inputs") from None
    if not out:
        raise CsvFormatError(f"{path}: no data rows")
    return np.array(out)


def _write_json(obj, path: str) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n", encoding="utf-8")


# --- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    data = generate_dataset(args.kind, args.seed, args.n)
    write_csv(data, args.out)
    print(f"wrote {len(data)} samples ({args.kind}, seed {args.seed}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data = _load_data(args.data, args.data_seed)
    spec = ModelSpec(args.model, args.layer, None if args.layer == "none" else args.positivity, args.hidden)
    cfg = TrainConfig(args.optimizer, args.lr, args.epochs, args.split, args.seed)
    result = train(spec, data, cfg)
    if result.diverged:
        print(f"error: training diverged ({result.stop_reason})", file=sys.stderr)
        return EXIT_NUMERICAL
    Path(args.out).write_text(dumps_model(result.model), encoding="utf-8")
    summary = {
        "model": {"family": spec.family, "layer": spec.layer, "positivity": spec.positivity, "hidden": spec.hidden},
        "config": {"optimizer": cfg.optimizer, "lr": cfg.lr, "epochs": cfg.epochs, "split": cfg.split, "seed": cfg.seed},
        "data": args.data,
        "result": result.to_dict(),
    }
    result_path = args.result or str(Path(args.out).with_suffix(".json"))
    _write_json(summary, result_path)
    print(f"train_loss={result.train_loss:.6e} test_loss={result.test_loss:.6e} model={args.out} result={result_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = loads_model(_read_text(args.model))
    theta = _read_inputs(args.inputs)
    if theta.shape[1] != len(model.lower):
        raise CsvFormatError(f"{args.inputs}: model expects {len(model.lower)} inputs, file has {theta.shape[1]}")
    C = model.predict(theta)
    lam = min_eigenvalues(C)
    box = SamplingBox(tuple(model.lower), tuple(model.upper))
    out = Dataset(box, theta, C, model.index_map, {"source": "predict", "model": args.model})
    write_csv(out, args.out, extra_columns={"lambda_min": lam})
    print(f"wrote {len(theta)} predictions to {args.out}; {int(np.sum(lam <= 0))} not positive definite")
    return EXIT_OK


def cmd_audit(args) -> int:
    if args.model:
        model = loads_model(_read_text(args.model))
        grid = factorial_grid(model.lower, model.upper, args.grid_size)
        lam = min_eigenvalues(model.predict(grid))
        what = f"grid points ({args.grid_size}^{grid.shape[1]})"
    else:
        if not args.path:
            raise UsageError("audit: give a dataset CSV or --model")
        _read_text(args.path)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            data = read_csv(args.path)
        lam = min_eigenvalues(data.targets)
        what = "rows"
    bad = np.flatnonzero(lam <= 0.0)
    print(f"{len(lam) - len(bad)}/{len(lam)} SPD")
    if len(bad):
        listed = ", ".join(str(int(i) + 1) for i in bad[:20])
        print(f"not positive definite at {what}: {listed}{' ...' if len(bad) > 20 else ''}", file=sys.stderr)
        print(f"smallest eigenvalue {float(lam.min()):.6e}", file=sys.stderr)
        return EXIT_NOT_SPD
    return EXIT_OK


def _parse_optimizer(text: str) -> OptimizerSetting:
    parts = text.split(":")
    try:
        if parts[0] == "lbfgs" and len(parts) == 2:
            return OptimizerSetting("lbfgs", 1.0, int(parts[1]))
        if parts[0] == "adam" and len(parts) == 3:
            return OptimizerSetting("adam", float(parts[1]), int(parts[2]))
    except ValueError:
        pass
    raise UsageError(f"bad optimizer setting {text!r}; use adam:LR:EPOCHS or lbfgs:EPOCHS")


def _experiment_config(args) -> ExperimentConfig:
    if args.config:
        doc = json.loads(_read_text(args.config))
        if not isinstance(doc, dict):
            raise ReportFormatError(f"{args.config}: expected a JSON object")
        base = doc.get("config", doc)
        try:
            cfg = ExperimentConfig.from_dict(base)
        except TypeError as exc:
            raise ReportFormatError(f"{args.config}: {exc}") from None
        if cfg.experiment != args.name:
            raise UsageError(f"config is for {cfg.experiment!r}, not {args.name!r}")
        return cfg
    overrides = {}
    for key in ("dataset", "trials", "splits", "models", "layers", "positivity", "grid_size", "base_seed",
                "data_seed", "hidden"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.opt:
        overrides["optimizers"] = [_parse_optimizer(o) for o in args.opt]
    try:
        cfg = ExperimentConfig.defaults(args.name, **overrides)
    except ValueError as exc:
        raise UsageError(f"experiment {args.name}: {exc}") from None
    if args.epochs is not None or args.lr is not None:
        opts = []
        for o in cfg.optimizers:
            epochs = args.epochs if args.epochs is not None and o.name == "adam" else o.epochs
            lr = args.lr if args.lr is not None and o.name == "adam" else o.lr
            opts.append(OptimizerSetting(o.name, lr, epochs))
        cfg.optimizers = opts
        try:
            cfg.validate()
        except ValueError as exc:
            raise UsageError(f"experiment {args.name}: {exc}") from None
    return cfg


def cmd_experiment(args) -> int:
    cfg = _experiment_config(args)
    if cfg.dataset not in DATASET_KINDS and not Path(cfg.dataset).is_file():
        raise FileNotFoundError(f"no such file: {cfg.dataset}")
    report = validate_report(run_experiment(cfg, workers=args.workers))
    text = dumps_report(report)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {len(report['rows'])} rows to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_report_to_csv(args) -> int:
    report = loads_report(_read_text(args.report))
    paths = report_to_csv(report, args.out_dir)
    for p in paths:
        print(p)
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def _csv_list(kind, choices=None):
    def parse(text):
        items = [kind(t) for t in text.split(",") if t.strip()]
        if choices is not None:
            for it in items:
                if it not in choices:
                    raise argparse.ArgumentTypeError(f"invalid choice {it!r} (choose from {', '.join(choices)})")
        return items
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spdsurrogate", description="SPD-constrained surrogate models of stiffness matrices.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset CSV")
    g.add_argument("--kind", choices=sorted(DATASET_KINDS), required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=None, help="sample count (default: the kind's standard size)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model and save it")
    t.add_argument("--data", required=True, help="dataset CSV, or solid2d / hollow3d for synthetic data")
    t.add_argument("--data-seed", type=int, default=0)
    t.add_argument("--model", choices=FAMILIES, required=True)
    t.add_argument("--layer", choices=("chol", "eig", "none"), default="none")
    t.add_argument("--positivity", choices=POSITIVITY_KINDS, default=None)
    t.add_argument("--hidden", type=int, default=100)
    t.add_argument("--optimizer", choices=("adam", "lbfgs"), default="adam")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--epochs", type=int, default=10_000)
    t.add_argument("--split", type=float, default=0.8)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="model file")
    t.add_argument("--result", default=None, help="training summary JSON (default: model path with .json)")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict stiffness matrices for input rows")
    pr.add_argument("--model", required=True)
    pr.add_argument("--inputs", required=True, help="CSV with columns x1..xd")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("audit", help="check definiteness of a dataset CSV or a model on a grid")
    a.add_argument("path", nargs="?", help="dataset or prediction CSV")
    a.add_argument("--model", default=None, help="audit a model file on a factorial grid instead")
    a.add_argument("--grid-size", type=int, default=10)
    a.set_defaults(func=cmd_audit)

    e = sub.add_parser("experiment", help="run a replicated study and write a JSON report")
    e.add_argument("name", choices=EXPERIMENTS)
    e.add_argument("--config", default=None, help="JSON config, or a previous report to re-run")
    e.add_argument("--dataset", default=None, help="solid2d, hollow3d or a CSV path")
    e.add_argument("--data-seed", type=int, default=None)
    e.add_argument("--trials", type=int, default=None)
    e.add_argument("--splits", type=_csv_list(float), default=None, help="comma list, e.g. 0.8,0.5,0.1")
    e.add_argument("--models", type=_csv_list(str, FAMILIES), default=None)
    e.add_argument("--layers", type=_csv_list(str, ("chol", "eig", "none")), default=None)
    e.add_argument("--positivity", type=_csv_list(str, POSITIVITY_KINDS), default=None)
    e.add_argument("--opt", action="append", default=None, help="adam:LR:EPOCHS or lbfgs:EPOCHS (repeatable)")
    e.add_argument("--epochs", type=int, default=None, help="override Adam epochs of every setting")
    e.add_argument("--lr", type=float, default=None, help="override Adam learning rate of every setting")
    e.add_argument("--grid-size", type=int, default=None)
    e.add_argument("--base-seed", type=int, default=None)
    e.add_argument("--hidden", type=int, default=None)
    e.add_argument("--workers", type=int, default=None, help="worker processes (default: env or CPU count)")
    e.add_argument("--out", default=None, help="report path (default: stdout)")
    e.set_defaults(func=cmd_experiment)

    r = sub.add_parser("report-to-csv", help="flatten a JSON report into per-table CSV files")
    r.add_argument("report")
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_report_to_csv)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except NumericalFailure as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SpdViolationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_SPD
    except (CsvFormatError, ReportFormatError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
