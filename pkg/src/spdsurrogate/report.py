"""Report JSON schema, serialization and CSV flattening."""
from __future__ import annotations

import csv
import io
import json
import re
from pathlib import Path

import jsonschema

__all__ = [
    "REPORT_SCHEMA",
    "ReportFormatError",
    "validate_report",
    "dumps_report",
    "loads_report",
    "strip_volatile",
    "report_tables",
    "report_to_csv",
]

_NUM_OR_NULL = {"type": ["number", "null"]}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "spdsurrogate experiment report",
    "type": "object",
    "required": ["schema_version", "tool", "experiment", "config", "seeds", "dataset", "rows", "timestamp"],
    "properties": {
        "schema_version": {"const": 1},
        "tool": {
            "type": "object",
            "required": ["name", "version"],
            "properties": {"name": {"type": "string"}, "version": {"type": "string"}},
        },
        "experiment": {"enum": ["indefiniteness", "positivity-compare", "layer-compare"]},
        "config": {
            "type": "object",
            "required": ["experiment", "dataset", "trials", "splits", "models", "layers", "optimizers", "base_seed"],
            "properties": {
                "trials": {"type": "integer", "minimum": 1},
                "splits": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
                "optimizers": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["name", "lr", "epochs"],
                        "properties": {
                            "name": {"enum": ["adam", "lbfgs"]},
                            "lr": {"type": "number"},
                            "epochs": {"type": "integer", "minimum": 1},
                        },
                    },
                },
            },
        },
        "seeds": {
            "type": "object",
            "required": ["base_seed", "data_seed", "trial_seeds"],
            "properties": {
                "base_seed": {"type": "integer"},
                "data_seed": {"type": "integer"},
                "trial_seeds": {"type": "array", "items": {"type": "integer"}},
            },
        },
        "dataset": {
            "type": "object",
            "required": ["name", "size", "dims", "box_lower", "box_upper"],
        },
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": [
                    "table", "model", "layer", "positivity", "optimizer", "lr", "epochs", "split",
                    "trials", "mu", "sigma", "p95", "diverged",
                ],
                "properties": {
                    "table": {"type": "string"},
                    "model": {"enum": ["nn", "quadratic", "quartic", "rbf"]},
                    "layer": {"enum": ["chol", "eig", "none"]},
                    "positivity": {"type": ["string", "null"]},
                    "trials": {"type": "integer", "minimum": 1},
                    "mu": _NUM_OR_NULL,
                    "sigma": _NUM_OR_NULL,
                    "p95": _NUM_OR_NULL,
                    "diverged": {"type": "integer", "minimum": 0},
                    "min_test_eigenvalue": _NUM_OR_NULL,
                    "fully_spd_replicates": {"type": "integer", "minimum": 0},
                },
            },
        },
        "grid": {
            "type": "object",
            "required": ["size", "points", "per_model"],
            "properties": {
                "points": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                "per_model": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["model", "layer", "percent"],
                        "properties": {
                            "percent": {
                                "type": "array",
                                "items": {"type": "number", "minimum": 0, "maximum": 100},
                            },
                        },
                    },
                },
            },
        },
        "timestamp": {"type": "object", "required": ["created"]},
    },
}


class ReportFormatError(ValueError):
    pass


def validate_report(report: dict) -> dict:
    try:
        jsonschema.validate(report, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ReportFormatError(f"report does not match schema at {where}: {exc.message}") from None
    grid = report.get("grid")
    if grid is not None:
        n = len(grid["points"])
        for entry in grid["per_model"]:
            if len(entry["percent"]) != n:
                raise ReportFormatError("grid percentage list does not match the number of grid points")
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, allow_nan=False) + "\n"


def loads_report(text: str) -> dict:
    try:
        report = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ReportFormatError(f"report is not valid JSON: {exc}") from None
    if not isinstance(report, dict):
        raise ReportFormatError("report must be a JSON object")
    return validate_report(report)


def strip_volatile(report: dict) -> dict:
    """Copy without the wall-clock dependent ``timestamp`` block."""
    return {k: v for k, v in report.items() if k != "timestamp"}


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def report_tables(report: dict) -> dict[str, list[list[str]]]:
    """Flatten a report into ``{table_name: rows}`` with a header row first."""
    tables: dict[str, list[list[str]]] = {}
    for row in report["rows"]:
        name = row["table"]
        if name.startswith("positivity"):
            header = ["layer", "positivity", "mu", "sigma", "p95", "diverged"]
            lead = [row["layer_label"], row["positivity_label"]]
        else:
            header = ["model", "layer", "mu", "sigma", "p95", "diverged"]
            lead = [row["model_label"], row["layer_label"]]
        rows = tables.setdefault(name, [header])
        rows.append(lead + [_fmt(row["mu"]), _fmt(row["sigma"]), _fmt(row["p95"]), str(row["diverged"])])
    grid = report.get("grid")
    if grid:
        dims = len(grid["points"][0]) if grid["points"] else 0
        for entry in grid["per_model"]:
            name = f"grid/{entry['model']}-{entry['layer']}"
            rows = [[f"x{i + 1}" for i in range(dims)] + ["percent"]]
            for pt, pct in zip(grid["points"], entry["percent"]):
                rows.append([repr(float(v)) for v in pt] + [repr(float(pct))])
            tables[name] = rows
    return tables


def _table_filename(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9.+-]+", "_", name).strip("_") + ".csv"


def report_to_csv(report: dict, out_dir: str | Path) -> list[Path]:
    """Write one CSV per table into ``out_dir``; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, rows in report_tables(report).items():
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        path = out / _table_filename(name)
        path.write_text(buf.getvalue(), encoding="utf-8")
        written.append(path)
    return written
