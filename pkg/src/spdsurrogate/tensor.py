"""Dense symmetric-matrix primitives: packing, Cholesky, Jacobi eigensolver.

Symmetric matrices are plain ``float64`` arrays whose symmetry is exact: every
constructor in this package mirrors the lower triangle onto the upper one
instead of trusting floating-point arithmetic to produce identical halves.
All functions accept a single ``(n, n)`` matrix or a stack ``(..., n, n)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import NamedTuple

import numba
import numpy as np

__all__ = [
    "DimensionError",
    "PatternViolationError",
    "NumericalFailure",
    "IndexMap",
    "EigenPair",
    "packed_size",
    "order_from_packed_size",
    "symmetrize_lower",
    "scatter",
    "gather",
    "cholesky",
    "sym_eig",
    "sym_eig_batch",
    "min_eigenvalue",
    "min_eigenvalues",
    "is_indefinite",
]

ORTHOTROPIC_SLOTS = ((0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2), (3, 3), (4, 4), (5, 5))
PATTERN_TOL = 1e-12
JACOBI_REL_TOL = 1e-14
JACOBI_MAX_SWEEPS = 100
MAX_ORDER = 64


class DimensionError(ValueError):
    pass


class PatternViolationError(ValueError):
    pass


class NumericalFailure(ArithmeticError):
    """Raised when the eigensolver fails to converge or sees non-finite input."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


def packed_size(n: int) -> int:
    """Number of independent entries of an ``n x n`` symmetric matrix."""
    if int(n) != n or n < 1:
        raise DimensionError(f"invalid matrix order {n!r}; must be a positive integer")
    n = int(n)
    return n * (n + 1) // 2


def order_from_packed_size(m: int) -> int:
    n = int(round((np.sqrt(8 * m + 1) - 1) / 2))
    if n < 1 or packed_size(n) != m:
        raise DimensionError(f"{m} is not a triangular number")
    return n


@dataclass(frozen=True)
class IndexMap:
    """Bijection between packed m-vectors and lower-triangle matrix slots.

    ``slots`` holds 0-based ``(row, col)`` pairs with ``row >= col``.
    """

    order: int
    slots: tuple[tuple[int, int], ...]
    kind: str

    def __post_init__(self):
        if self.order < 1:
            raise DimensionError("order must be >= 1")
        if len(set(self.slots)) != len(self.slots):
            raise ValueError("duplicate slots in index map")
        for r, c in self.slots:
            if not (0 <= c <= r < self.order):
                raise ValueError(f"slot {(r, c)} is not in the lower triangle")

    @classmethod
    def full(cls, n: int) -> "IndexMap":
        packed_size(n)
        slots = tuple((i, j) for i in range(n) for j in range(i + 1))
        return cls(n, slots, "full")

    @classmethod
    def orthotropic(cls) -> "IndexMap":
        return cls(6, ORTHOTROPIC_SLOTS, "orthotropic")

    @classmethod
    def from_kind(cls, kind: str, order: int = 6) -> "IndexMap":
        if kind == "full":
            return cls.full(order)
        if kind == "orthotropic":
            if order != 6:
                raise DimensionError("orthotropic pattern is defined for 6x6 only")
            return cls.orthotropic()
        raise ValueError(f"unknown index map kind {kind!r}")

    @property
    def packed_size(self) -> int:
        return len(self.slots)

    @cached_property
    def rows(self) -> np.ndarray:
        return np.array([r for r, _ in self.slots], dtype=np.intp)

    @cached_property
    def cols(self) -> np.ndarray:
        return np.array([c for _, c in self.slots], dtype=np.intp)

    @cached_property
    def diagonal(self) -> np.ndarray:
        """Boolean mask over packed positions that land on the diagonal."""
        return self.rows == self.cols

    @cached_property
    def pattern(self) -> np.ndarray:
        """Symmetric boolean mask of matrix entries covered by the map."""
        mask = np.zeros((self.order, self.order), dtype=bool)
        mask[self.rows, self.cols] = True
        mask[self.cols, self.rows] = True
        return mask


@lru_cache(maxsize=None)
def _upper_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n, 1)


def symmetrize_lower(a: np.ndarray) -> np.ndarray:
    """Return a copy of ``a`` with the strict upper triangle replaced by the lower."""
    out = np.array(a, dtype=np.float64)
    iu, ju = _upper_indices(out.shape[-1])
    out[..., iu, ju] = out[..., ju, iu]
    return out


def scatter(x: np.ndarray, index_map: IndexMap, symmetric: bool = True) -> np.ndarray:
    """Place packed components into matrix slots.

    With ``symmetric=False`` only the lower triangle is filled (a Cholesky factor).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (index_map.packed_size,):
        raise DimensionError(
            f"expected trailing dimension {index_map.packed_size}, got shape {x.shape}"
        )
    n = index_map.order
    out = np.zeros(x.shape[:-1] + (n, n))
    out[..., index_map.rows, index_map.cols] = x
    if symmetric:
        out[..., index_map.cols, index_map.rows] = x
    return out


def gather(m: np.ndarray, index_map: IndexMap, check: bool = True) -> np.ndarray:
    """Inverse of :func:`scatter`; reads the lower-triangle slots of ``m``."""
    m = np.asarray(m, dtype=np.float64)
    n = index_map.order
    if m.shape[-2:] != (n, n):
        raise DimensionError(f"expected trailing shape {(n, n)}, got {m.shape}")
    if check and index_map.kind != "full":
        outside = np.abs(np.where(index_map.pattern, 0.0, m))
        worst = outside.max() if outside.size else 0.0
        if worst > PATTERN_TOL:
            raise PatternViolationError(
                f"entry of magnitude {worst:.3g} outside the {index_map.kind} pattern"
            )
    return m[..., index_map.rows, index_map.cols].copy()


def cholesky(m: np.ndarray) -> np.ndarray | None:
    """Lower-triangular ``L`` with ``L @ L.T == m``, or ``None`` if ``m`` is not PD."""
    a = symmetrize_lower(m)
    n = a.shape[0]
    if a.shape != (n, n):
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    L = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - np.dot(L[j, :j], L[j, :j])
        if not pivot > 0.0:
            return None
        L[j, j] = np.sqrt(pivot)
        for i in range(j + 1, n):
            L[i, j] = (a[i, j] - np.dot(L[i, :j], L[j, :j])) / L[j, j]
    return L


class EigenPair(NamedTuple):
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


@numba.njit(cache=True)
def _jacobi_kernel(mats, rel_tol, max_sweeps):
    b, n, _ = mats.shape
    values = np.empty((b, n))
    vectors = np.empty((b, n, n))
    residuals = np.empty(b)
    converged = np.ones(b, dtype=np.bool_)
    a = np.empty((n, n))
    v = np.empty((n, n))
    diag = np.empty(n)
    for idx in range(b):
        fro = 0.0
        for i in range(n):
            for j in range(n):
                a[i, j] = mats[idx, i, j]
                v[i, j] = 1.0 if i == j else 0.0
                fro += a[i, j] * a[i, j]
        tol = rel_tol * np.sqrt(fro)
        off = 0.0
        done = False
        for sweep in range(max_sweeps + 1):
            off = 0.0
            for p in range(n - 1):
                for q in range(p + 1, n):
                    off += 2.0 * a[p, q] * a[p, q]
            off = np.sqrt(off)
            if off <= tol:
                done = True
                break
            if sweep == max_sweeps:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    if abs(theta) > 1e150:
                        t = 0.5 / theta
                    else:
                        t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                        if theta < 0.0:
                            t = -t
                    c = 1.0 / np.sqrt(t * t + 1.0)
                    s = t * c
                    # A <- J^T A J with J the (p, q) plane rotation
                    for k in range(n):
                        akp = a[k, p]
                        akq = a[k, q]
                        a[k, p] = c * akp - s * akq
                        a[k, q] = s * akp + c * akq
                    for k in range(n):
                        apk = a[p, k]
                        aqk = a[q, k]
                        a[p, k] = c * apk - s * aqk
                        a[q, k] = s * apk + c * aqk
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    for k in range(n):
                        vkp = v[k, p]
                        vkq = v[k, q]
                        v[k, p] = c * vkp - s * vkq
                        v[k, q] = s * vkp + c * vkq
        residuals[idx] = off
        converged[idx] = done
        for i in range(n):
            diag[i] = a[i, i]
        order = np.argsort(diag, kind="mergesort")
        for i in range(n):
            values[idx, i] = diag[order[i]]
            for k in range(n):
                vectors[idx, k, i] = v[k, order[i]]
    return values, vectors, residuals, converged


def sym_eig_batch(mats: np.ndarray) -> EigenPair:
    """Cyclic Jacobi eigendecomposition of a stack of symmetric matrices.

    Eigenvalues are ascending; eigenvector ``k`` is column ``k``.
    """
    mats = symmetrize_lower(mats)
    if mats.ndim < 2 or mats.shape[-1] != mats.shape[-2]:
        raise DimensionError(f"expected square matrices, got shape {mats.shape}")
    n = mats.shape[-1]
    if n > MAX_ORDER:
        raise DimensionError(f"order {n} exceeds the small dense limit {MAX_ORDER}")
    lead = mats.shape[:-2]
    flat = np.ascontiguousarray(mats.reshape((-1, n, n)))
    if not np.all(np.isfinite(flat)):
        raise NumericalFailure("non-finite entries passed to the eigensolver")
    values, vectors, residuals, ok = _jacobi_kernel(flat, JACOBI_REL_TOL, JACOBI_MAX_SWEEPS)
    if not ok.all():
        worst = float(residuals[~ok].max())
        raise NumericalFailure(
            f"Jacobi iteration did not converge in {JACOBI_MAX_SWEEPS} sweeps "
            f"(off-diagonal norm {worst:.3e})",
            residual=worst,
        )
    return EigenPair(values.reshape(lead + (n,)), vectors.reshape(lead + (n, n)))


def sym_eig(m: np.ndarray) -> EigenPair:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a single matrix, got shape {m.shape}")
    return sym_eig_batch(m)


def min_eigenvalues(mats: np.ndarray) -> np.ndarray:
    return sym_eig_batch(mats).eigenvalues[..., 0]


def min_eigenvalue(m: np.ndarray) -> float:
    return float(sym_eig(m).eigenvalues[0])


def is_indefinite(mats: np.ndarray) -> np.ndarray | bool:
    """``lambda_min <= 0`` classifies a matrix as not positive definite."""
    result = min_eigenvalues(mats) <= 0.0
    return bool(result) if np.ndim(result) == 0 else result
