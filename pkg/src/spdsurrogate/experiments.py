"""Replicated training studies: indefiniteness grid, positivity and layer comparisons.

Every (combination, trial) job is trained independently with a seed derived
from ``(base_seed, trial_index)``, so results do not depend on scheduling or
on the number of worker processes.
"""
from __future__ import annotations

import datetime as _dt
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .datasets import DATASET_KINDS, Dataset, generate_dataset, read_csv
from .layers import DISPLAY_NAMES, POSITIVITY_KINDS
from .stats import factorial_grid, mean_std, minimum_sample_size, tolerance_bound
from .surrogates import FAMILIES, FAMILY_LABELS
from .tensor import min_eigenvalues
from .training import LAYER_DEFAULT_POSITIVITY, ModelSpec, TrainConfig, train

__all__ = [
    "EXPERIMENTS",
    "OptimizerSetting",
    "ExperimentConfig",
    "trial_seed",
    "load_dataset",
    "run_experiment",
    "run_indefiniteness",
    "run_positivity_compare",
    "run_layer_compare",
    "WORKERS_ENV",
]

EXPERIMENTS = ("indefiniteness", "positivity-compare", "layer-compare")
WORKERS_ENV = "SPDSURROGATE_WORKERS"
SCHEMA_VERSION = 1
LAYER_LABELS = {"chol": "Chol. Fac.", "eig": "Eig. Decom.", "none": "None"}
TOLERANCE_P = 0.95
TOLERANCE_CONFIDENCE = 0.90


@dataclass(frozen=True)
class OptimizerSetting:
    name: str = "adam"
    lr: float = 1e-3
    epochs: int = 10_000

    @property
    def label(self) -> str:
        if self.name == "lbfgs":
            return f"lbfgs-e{self.epochs}"
        return f"adam-lr{self.lr:g}-e{self.epochs}"


@dataclass
class ExperimentConfig:
    experiment: str
    dataset: str = "hollow3d"
    data_seed: int = 0
    trials: int = 1080
    splits: list[float] = field(default_factory=lambda: [0.8])
    models: list[str] = field(default_factory=lambda: list(FAMILIES))
    layers: list[str] = field(default_factory=lambda: ["chol", "eig", "none"])
    positivity: list[str] = field(default_factory=lambda: list(POSITIVITY_KINDS))
    layer_positivity: dict[str, str] = field(default_factory=lambda: dict(LAYER_DEFAULT_POSITIVITY))
    optimizers: list[OptimizerSetting] = field(default_factory=lambda: [OptimizerSetting()])
    grid_size: int = 10
    base_seed: int = 0
    hidden: int = 100

    def __post_init__(self):
        self.optimizers = [o if isinstance(o, OptimizerSetting) else OptimizerSetting(**o) for o in self.optimizers]
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.splits or any(not 0.0 < s < 1.0 for s in self.splits):
            raise ValueError("splits must lie strictly between 0 and 1")
        for m in self.models:
            if m not in FAMILIES:
                raise ValueError(f"unknown model family {m!r}")
        for layer in self.layers:
            if layer not in ("chol", "eig", "none"):
                raise ValueError(f"unknown layer {layer!r}")
        for p in list(self.positivity) + list(self.layer_positivity.values()):
            if p not in POSITIVITY_KINDS:
                raise ValueError(f"unknown positivity function {p!r}")
        if not self.optimizers:
            raise ValueError("at least one optimizer setting is required")
        for o in self.optimizers:
            TrainConfig(optimizer=o.name, lr=o.lr, epochs=o.epochs)
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        if self.experiment == "indefiniteness" and "none" not in self.layers:
            raise ValueError("the indefiniteness study needs the unconstrained ('none') layer option")
        if self.experiment == "positivity-compare" and "none" in self.layers:
            raise ValueError("positivity comparison only applies to SPD layers")

    @classmethod
    def defaults(cls, experiment: str, **overrides) -> "ExperimentConfig":
        """Full-scale settings for each study; override for desk-scale runs."""
        base = {
            "indefiniteness": dict(dataset="solid2d", layers=["none"], splits=[0.8]),
            "positivity-compare": dict(
                dataset="hollow3d", models=["nn"], layers=["chol", "eig"], splits=[0.8],
                optimizers=[
                    OptimizerSetting("lbfgs", 1.0, 100),
                    OptimizerSetting("adam", 1e-3, 10_000),
                    OptimizerSetting("adam", 3e-4, 10_000),
                    OptimizerSetting("adam", 1e-4, 10_000),
                ],
            ),
            "layer-compare": dict(dataset="hollow3d", layers=["chol", "eig", "none"], splits=[0.8, 0.5, 0.1]),
        }[experiment]
        base.update(overrides)
        return cls(experiment=experiment, **base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizers"] = [asdict(o) for o in self.optimizers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)


def trial_seed(base_seed: int, trial_index: int) -> int:
    """Independent 63-bit seed for one trial."""
    state = np.random.SeedSequence([int(base_seed), int(trial_index)]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def load_dataset(name: str, data_seed: int = 0) -> Dataset:
    if name in DATASET_KINDS:
        return generate_dataset(name, data_seed)
    return read_csv(name)


@dataclass(frozen=True)
class _Combo:
    table: str
    spec: ModelSpec
    optimizer: OptimizerSetting
    split: float


def _combos(config: ExperimentConfig) -> list[_Combo]:
    out = []
    if config.experiment == "positivity-compare":
        for opt in config.optimizers:
            for layer in config.layers:
                for pos in config.positivity:
                    for model in config.models:
                        spec = ModelSpec(model, layer, pos, config.hidden)
                        out.append(_Combo(f"positivity/{opt.label}", spec, opt, config.splits[0]))
        return out
    splits = config.splits if config.experiment == "layer-compare" else config.splits[:1]
    opts = config.optimizers if config.experiment == "layer-compare" else config.optimizers[:1]
    for opt in opts:
        for split in splits:
            for model in config.models:
                for layer in config.layers:
                    pos = None if layer == "none" else config.layer_positivity[layer]
                    spec = ModelSpec(model, layer, pos, config.hidden)
                    if config.experiment == "layer-compare":
                        table = f"layers/split{round(split * 100)}/{opt.label}"
                    else:
                        table = "indefiniteness"
                    out.append(_Combo(table, spec, opt, split))
    return out


# worker-process globals, set once per process by the pool initializer
_STATE: dict = {}


def _init_worker(dataset: Dataset, grid) -> None:
    _STATE["dataset"] = dataset
    _STATE["grid"] = grid


def _run_job(job) -> dict:
    combo, seed = job
    data = _STATE["dataset"]
    grid = _STATE["grid"]
    cfg = TrainConfig(
        optimizer=combo.optimizer.name, lr=combo.optimizer.lr, epochs=combo.optimizer.epochs,
        split=combo.split, seed=seed,
    )
    start = time.perf_counter()
    result = train(combo.spec, data, cfg)
    out = {"test_loss": result.test_loss, "diverged": result.diverged, "min_eig": math.nan, "flags": None}
    if not result.diverged:
        test_inputs = data.inputs[result.test_indices]
        out["min_eig"] = float(min_eigenvalues(result.model.predict(test_inputs)).min())
        if grid is not None:
            out["flags"] = min_eigenvalues(result.model.predict(grid)) <= 0.0
    out["seconds"] = time.perf_counter() - start
    return out


def _worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        return max(1, int(raw))
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))


def _execute(jobs, dataset, grid, workers: int) -> list[dict]:
    if workers <= 1 or len(jobs) <= 1:
        _init_worker(dataset, grid)
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(dataset, grid)) as pool:
        return list(pool.map(_run_job, jobs, chunksize=max(1, len(jobs) // (8 * workers))))


def _num(v):
    return float(v) if v is not None and math.isfinite(v) else None


def _summarize(combo: _Combo, results: list[dict]) -> dict:
    errors = [r["test_loss"] for r in results if not r["diverged"]]
    diverged = sum(r["diverged"] for r in results)
    mu = sigma = p95 = None
    if len(errors) >= 2:
        mu, sigma = mean_std(errors)
    elif len(errors) == 1:
        mu = errors[0]
    needed = minimum_sample_size(TOLERANCE_P, TOLERANCE_CONFIDENCE)
    if len(errors) >= needed:
        p95 = tolerance_bound(errors, TOLERANCE_P, TOLERANCE_CONFIDENCE)
    min_eigs = [r["min_eig"] for r in results if not r["diverged"]]
    return {
        "table": combo.table,
        "model": combo.spec.family,
        "model_label": FAMILY_LABELS[combo.spec.family],
        "layer": combo.spec.layer,
        "layer_label": LAYER_LABELS[combo.spec.layer],
        "positivity": combo.spec.positivity,
        "positivity_label": DISPLAY_NAMES.get(combo.spec.positivity, "None"),
        "optimizer": combo.optimizer.name,
        "lr": combo.optimizer.lr,
        "epochs": combo.optimizer.epochs,
        "split": combo.split,
        "trials": len(results),
        "mu": _num(mu),
        "sigma": _num(sigma),
        "p95": _num(p95),
        "p95_min_trials": needed,
        "diverged": int(diverged),
        "min_test_eigenvalue": _num(min(min_eigs)) if min_eigs else None,
    }


def run_experiment(config: ExperimentConfig, workers: int | None = None, dataset: Dataset | None = None) -> dict:
    """Run one study and return its JSON-ready report."""
    config.validate()
    started = time.perf_counter()
    created = _dt.datetime.now(_dt.timezone.utc).isoformat()
    data = dataset if dataset is not None else load_dataset(config.dataset, config.data_seed)
    grid = None
    if config.experiment == "indefiniteness":
        grid = factorial_grid(data.box.lower, data.box.upper, config.grid_size)
    combos = _combos(config)
    seeds = [trial_seed(config.base_seed, t) for t in range(config.trials)]
    jobs = [(c, s) for c in combos for s in seeds]
    workers = _worker_count() if workers is None else workers
    results = _execute(jobs, data, grid, workers)

    rows, grids, timings = [], [], {}
    for ci, combo in enumerate(combos):
        chunk = results[ci * len(seeds):(ci + 1) * len(seeds)]
        row = _summarize(combo, chunk)
        key = f"{combo.table}|{combo.spec.family}|{combo.spec.layer}|{combo.spec.positivity}"
        timings[key] = sum(r["seconds"] for r in chunk)
        if grid is not None:
            flagged = [r["flags"] for r in chunk if r["flags"] is not None]
            counts = np.sum(flagged, axis=0) if flagged else np.zeros(len(grid))
            percent = 100.0 * counts / max(1, len(flagged))
            fully_spd = int(sum(not np.any(f) for f in flagged))
            row["fully_spd_replicates"] = fully_spd
            row["replicates_with_indefinite_point"] = len(flagged) - fully_spd
            row["indefinite_predictions"] = int(counts.sum())
            grids.append({
                "model": combo.spec.family,
                "layer": combo.spec.layer,
                "positivity": combo.spec.positivity,
                "replicates": len(flagged),
                "percent": [float(v) for v in percent],
            })
        rows.append(row)

    report = {
        "schema_version": SCHEMA_VERSION,
        "tool": {"name": "spdsurrogate", "version": __version__},
        "experiment": config.experiment,
        "config": config.to_dict(),
        "seeds": {"base_seed": config.base_seed, "data_seed": config.data_seed, "trial_seeds": seeds},
        "dataset": {
            "name": config.dataset,
            "size": len(data),
            "dims": data.box.dims,
            "box_lower": list(data.box.lower),
            "box_upper": list(data.box.upper),
            "index_map": data.index_map.kind,
        },
        "tolerance": {"p": TOLERANCE_P, "confidence": TOLERANCE_CONFIDENCE},
        "rows": rows,
    }
    if grid is not None:
        report["grid"] = {"size": config.grid_size, "points": grid.tolist(), "per_model": grids}
    # wall-clock fields go last and are the only part that varies between runs
    report["timestamp"] = {
        "created": created,
        "elapsed_seconds": time.perf_counter() - started,
        "workers": workers,
        "timings": timings,
    }
    return report


def run_indefiniteness(config: ExperimentConfig, **kw) -> dict:
    return run_experiment(replace(config, experiment="indefiniteness"), **kw)


def run_positivity_compare(config: ExperimentConfig, **kw) -> dict:
    return run_experiment(replace(config, experiment="positivity-compare"), **kw)


def run_layer_compare(config: ExperimentConfig, **kw) -> dict:
    return run_experiment(replace(config, experiment="layer-compare"), **kw)
