"""Sampling boxes, Latin hypercube designs, synthetic stiffness data and CSV I/O.

The synthetic ground truth stands in for unit-cell homogenization. It is an
orthotropic Cholesky construction

    C(theta) = s(theta)^2 * L(theta) L(theta)^T

where the nine pattern entries of ``L`` are seeded cubic polynomials of the
scaled inputs (Softplus on the diagonal) and ``s`` is the rod-size factor:
``radius / radius_max``, times ``sqrt(1 - ratio^2)`` for hollow rods. The
factor makes stiffness vanish as rods get thin, as homogenized truss
stiffness does, so the data spans nearly singular to stiff matrices.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .tensor import IndexMap, gather, min_eigenvalues, scatter, symmetrize_lower

__all__ = [
    "SamplingBox",
    "Dataset",
    "DatasetKind",
    "DATASET_KINDS",
    "CsvFormatError",
    "SpdViolationError",
    "latin_hypercube",
    "synthetic_stiffness",
    "generate_dataset",
    "read_csv",
    "write_csv",
    "voigt_labels",
]


class CsvFormatError(ValueError):
    pass


class SpdViolationError(ValueError):
    def __init__(self, message: str, rows: list[int]):
        super().__init__(message)
        self.rows = rows


@dataclass(frozen=True)
class SamplingBox:
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        if len(self.lower) != len(self.upper) or not self.lower:
            raise ValueError("lower and upper bounds must be non-empty and the same length")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("every lower bound must be strictly below its upper bound")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{i + 1}" for i in range(self.dims)))

    @property
    def dims(self) -> int:
        return len(self.lower)

    def scale(self, theta) -> np.ndarray:
        lo, hi = np.array(self.lower), np.array(self.upper)
        return (np.asarray(theta, dtype=np.float64) - lo) / (hi - lo)

    def unscale(self, u) -> np.ndarray:
        lo, hi = np.array(self.lower), np.array(self.upper)
        return lo + np.asarray(u, dtype=np.float64) * (hi - lo)

    def contains(self, theta) -> np.ndarray:
        """Closed-box membership (grid studies evaluate the upper faces too)."""
        theta = np.atleast_2d(theta)
        return np.all((theta >= np.array(self.lower)) & (theta <= np.array(self.upper)), axis=1)


@dataclass(frozen=True)
class DatasetKind:
    name: str
    box: SamplingBox
    size: int
    radius_index: int
    ratio_index: int | None = None


DATASET_KINDS = {
    "solid2d": DatasetKind(
        "solid2d", SamplingBox((0.001, 0.0), (0.25, 0.5), ("radius", "poisson")), 100, radius_index=0
    ),
    "hollow3d": DatasetKind(
        "hollow3d",
        SamplingBox((0.01, 0.01, 0.0), (0.9, 0.25, 0.5), ("ratio", "radius", "poisson")),
        1000,
        radius_index=1,
        ratio_index=0,
    ),
}


@dataclass
class Dataset:
    box: SamplingBox
    inputs: np.ndarray
    targets: np.ndarray
    index_map: IndexMap = field(default_factory=IndexMap.orthotropic)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        n = self.index_map.order
        if self.inputs.ndim != 2 or self.inputs.shape[1] != self.box.dims:
            raise ValueError(f"inputs must be (N, {self.box.dims}), got {self.inputs.shape}")
        if self.targets.shape != (len(self.inputs), n, n):
            raise ValueError(f"targets must be (N, {n}, {n}), got {self.targets.shape}")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.box, self.inputs[idx], self.targets[idx], self.index_map, dict(self.provenance))

    def audit(self) -> np.ndarray:
        """Indices of targets that are not positive definite."""
        return np.flatnonzero(min_eigenvalues(self.targets) <= 0.0)


def latin_hypercube(n: int, box: SamplingBox, seed) -> np.ndarray:
    """One point per equal-width stratum in every dimension, strata paired at random."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    u = np.empty((n, box.dims))
    for k in range(box.dims):
        u[:, k] = (rng.permutation(n) + rng.random(n)) / n
    u = np.minimum(u, np.nextafter(1.0, 0.0))
    return box.unscale(u)


def _softplus(x):
    return np.logaddexp(0.0, x)


@lru_cache(maxsize=32)
def _generator_coefficients(seed: int, dims: int) -> tuple[np.ndarray, np.ndarray]:
    """Cubic coefficients for the nine factor entries, rescaled over the unit box.

    Diagonal entries are mapped onto [0.2, 2] before the Softplus, the others
    onto [-1, 1]; ranges are measured on a 21-point-per-axis lattice.
    """
    from .surrogates import monomial_exponents

    rng = np.random.default_rng(seed)
    exps = monomial_exponents(dims, 3)
    decay = 1.0 / (1.0 + exps.sum(axis=1))
    coef = rng.uniform(-1.0, 1.0, (9, len(exps))) * decay
    axes = np.meshgrid(*[np.linspace(0.0, 1.0, 21)] * dims, indexing="ij")
    lattice = np.stack([a.ravel() for a in axes], axis=1)
    feats = np.prod(lattice[:, None, :] ** exps[None], axis=2)
    vals = feats @ coef.T
    lo, hi = vals.min(axis=0), vals.max(axis=0)
    diag = IndexMap.orthotropic().diagonal
    target_lo = np.where(diag, 0.2, -1.0)
    target_hi = np.where(diag, 2.0, 1.0)
    gain = (target_hi - target_lo) / (hi - lo)
    coef = coef * gain[:, None]
    coef[:, 0] += target_lo - lo * gain
    return exps, coef


def _size_factor(theta: np.ndarray, kind: DatasetKind) -> np.ndarray:
    s = theta[:, kind.radius_index] / kind.box.upper[kind.radius_index]
    if kind.ratio_index is not None:
        s = s * np.sqrt(1.0 - theta[:, kind.ratio_index] ** 2)
    return s


def synthetic_stiffness(theta, seed: int, kind: str | DatasetKind = "solid2d") -> np.ndarray:
    """Smooth SPD orthotropic ground truth for one input (6x6) or a batch (N, 6, 6)."""
    kind = DATASET_KINDS[kind] if isinstance(kind, str) else kind
    single = np.ndim(theta) == 1
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    if theta.shape[1] != kind.box.dims:
        raise ValueError(f"{kind.name} inputs have {kind.box.dims} columns, got {theta.shape[1]}")
    inside = kind.box.contains(theta)
    if not inside.all():
        bad = int(np.flatnonzero(~inside)[0])
        raise ValueError(f"input {theta[bad].tolist()} lies outside the {kind.name} sampling box")
    exps, coef = _generator_coefficients(int(seed), kind.box.dims)
    u = kind.box.scale(theta)
    f = np.prod(u[:, None, :] ** exps[None], axis=2) @ coef.T
    imap = IndexMap.orthotropic()
    f[:, imap.diagonal] = _softplus(f[:, imap.diagonal])
    L = scatter(f, imap, symmetric=False) * _size_factor(theta, kind)[:, None, None]
    C = symmetrize_lower(L @ np.swapaxes(L, -1, -2))
    return C[0] if single else C


def generate_dataset(kind: str, seed: int, n: int | None = None) -> Dataset:
    spec = DATASET_KINDS[kind]
    n = spec.size if n is None else n
    inputs = latin_hypercube(n, spec.box, [seed, 1])
    targets = synthetic_stiffness(inputs, seed, spec)
    return Dataset(
        spec.box, inputs, targets, IndexMap.orthotropic(),
        {"source": "synthetic", "kind": kind, "seed": int(seed)},
    )


# --- CSV -------------------------------------------------------------------


def voigt_labels(index_map: IndexMap) -> list[str]:
    if index_map.kind == "orthotropic":
        return ["C11", "C12", "C13", "C22", "C23", "C33", "C44", "C55", "C66"]
    return [f"C{r + 1}{c + 1}" for r, c in index_map.slots]


def _label_slot(label: str) -> tuple[int, int]:
    if len(label) != 3 or label[0] != "C" or not label[1:].isdigit():
        raise CsvFormatError(f"bad target column label {label!r}")
    i, j = int(label[1]) - 1, int(label[2]) - 1
    if not (0 <= i < 6 and 0 <= j < 6):
        raise CsvFormatError(f"target column {label!r} is outside a 6x6 matrix")
    return max(i, j), min(i, j)


def write_csv(dataset: Dataset, path_or_file, extra_columns: dict | None = None) -> None:
    """Write inputs and packed targets; box and provenance travel in '#' comments."""
    labels = voigt_labels(dataset.index_map)
    slots = [_label_slot(lab) for lab in labels]
    rows_idx = np.array([s[0] for s in slots])
    cols_idx = np.array([s[1] for s in slots])
    values = dataset.targets[:, rows_idx, cols_idx]
    d = dataset.box.dims
    header = [f"x{i + 1}" for i in range(d)] + labels
    extra_columns = extra_columns or {}
    header += list(extra_columns)

    out = io.StringIO()
    out.write("# box_names: " + " ".join(dataset.box.names) + "\n")
    out.write("# box_lower: " + " ".join(repr(v) for v in dataset.box.lower) + "\n")
    out.write("# box_upper: " + " ".join(repr(v) for v in dataset.box.upper) + "\n")
    for key in sorted(dataset.provenance):
        out.write(f"# provenance.{key}: {dataset.provenance[key]}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    extras = [np.asarray(v, dtype=np.float64) for v in extra_columns.values()]
    for i in range(len(dataset)):
        row = [repr(float(v)) for v in dataset.inputs[i]] + [repr(float(v)) for v in values[i]]
        row += [repr(float(col[i])) for col in extras]
        writer.writerow(row)
    text = out.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        Path(path_or_file).write_text(text, encoding="utf-8")


def read_csv(path_or_file, strict: bool = False, box: SamplingBox | None = None) -> Dataset:
    """Read a dataset CSV with 9 orthotropic or 21 lower-triangle target columns.

    Targets are audited: non-SPD rows produce a warning, or
    :class:`SpdViolationError` when ``strict``. Data rows are numbered from 1.
    Unknown trailing columns (e.g. ``lambda_min``) are ignored.
    """
    if hasattr(path_or_file, "read"):
        text = path_or_file.read()
        source = getattr(path_or_file, "name", "<stream>")
    else:
        text = Path(path_or_file).read_text(encoding="utf-8")
        source = str(path_or_file)

    meta: dict[str, str] = {}
    data_lines: list[tuple[int, str]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.lstrip().startswith("#"):
            key, sep, value = line.lstrip()[1:].partition(":")
            if sep:
                meta[key.strip()] = value.strip()
            continue
        data_lines.append((lineno, line))
    if not data_lines:
        raise CsvFormatError(f"{source}: no header row")

    header = [h.strip() for h in next(csv.reader([data_lines[0][1]]))]
    x_cols = [i for i, h in enumerate(header) if h.startswith("x")]
    d = len(x_cols)
    if d == 0 or [header[i] for i in x_cols] != [f"x{k + 1}" for k in range(d)] or x_cols != list(range(d)):
        raise CsvFormatError(f"{source}: header must start with input columns x1..xd")
    c_cols = [i for i, h in enumerate(header) if h.startswith("C")]
    c_slots = [_label_slot(header[i]) for i in c_cols]
    if len(set(c_slots)) != len(c_slots):
        raise CsvFormatError(f"{source}: duplicate target columns")
    ortho = IndexMap.orthotropic()
    if len(c_slots) == 9 and set(c_slots) == set(ortho.slots):
        imap = ortho
    elif len(c_slots) == 21:
        imap = IndexMap.full(6)
    else:
        raise CsvFormatError(
            f"{source}: expected the 9 orthotropic or all 21 lower-triangle target columns, "
            f"got {len(c_slots)}"
        )

    inputs, targets = [], []
    for row_no, (lineno, line) in enumerate(data_lines[1:], 1):
        cells = next(csv.reader([line]))
        if len(cells) != len(header):
            raise CsvFormatError(f"{source}: line {lineno} has {len(cells)} cells, expected {len(header)}")
        try:
            x = [float(cells[i]) for i in x_cols]
            c = [float(cells[i]) for i in c_cols]
        except ValueError as exc:
            raise CsvFormatError(f"{source}: line {lineno} (row {row_no}): {exc}") from None
        M = np.zeros((6, 6))
        for (r, col), v in zip(c_slots, c):
            M[r, col] = v
            M[col, r] = v
        inputs.append(x)
        targets.append(M)
    if not inputs:
        raise CsvFormatError(f"{source}: no data rows")
    inputs = np.array(inputs)
    targets = np.array(targets)
    if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
        raise CsvFormatError(f"{source}: non-finite values")

    if imap.kind == "full":
        try:
            gather(targets, ortho)
            imap = ortho
        except ValueError:
            pass

    if box is None:
        if "box_lower" in meta and "box_upper" in meta:
            lower = [float(v) for v in meta["box_lower"].split()]
            upper = [float(v) for v in meta["box_upper"].split()]
            names = tuple(meta.get("box_names", "").split()) or ()
            if len(names) != len(lower):
                names = ()
            box = SamplingBox(tuple(lower), tuple(upper), names)
        else:
            lo, hi = inputs.min(axis=0), inputs.max(axis=0)
            hi = np.where(hi > lo, hi, lo + 1.0)
            box = SamplingBox(tuple(lo), tuple(hi))
    if box.dims != d:
        raise CsvFormatError(f"{source}: box has {box.dims} dims but the file has {d} inputs")

    provenance = {k.split(".", 1)[1]: v for k, v in meta.items() if k.startswith("provenance.")}
    provenance.setdefault("source", "csv")
    provenance["path"] = source
    ds = Dataset(box, inputs, targets, imap, provenance)

    bad = ds.audit()
    if len(bad):
        rows = [int(i) + 1 for i in bad]
        msg = f"{source}: {len(rows)} target(s) not positive definite at data rows {rows[:20]}"
        if strict:
            raise SpdViolationError(msg, rows)
        warnings.warn(msg, stacklevel=2)
    return ds
