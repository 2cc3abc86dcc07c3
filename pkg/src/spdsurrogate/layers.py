"""SPD transformation layers with exact reverse-mode gradients.

Both layers map a packed vector ``x`` (length ``m``) to an SPD matrix ``C``:

* Cholesky layer: ``L = tril(x)`` with diagonal entries replaced by ``p(x_k)``,
  then ``C = L @ L.T``.
* Eigendecomposition layer: ``A = sym(x)``, ``A = Q diag(lam) Q.T`` and
  ``C = Q diag(p(lam)) Q.T``.

Inputs may be a single vector ``(m,)`` or a batch ``(b, m)``; outputs follow
the same leading shape.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import DimensionError, IndexMap, cholesky, gather, scatter, sym_eig_batch, symmetrize_lower

__all__ = [
    "POSITIVITY_KINDS",
    "Positivity",
    "positivity_value",
    "positivity_derivative",
    "SpdLayer",
    "CholeskyCache",
    "EigenCache",
    "cholesky_layer_forward",
    "cholesky_layer_backward",
    "eig_layer_forward",
    "eig_layer_backward",
    "layer_forward_batch",
]

POSITIVITY_KINDS = ("abs", "square", "softplus", "relu", "quartic", "exp")
DISPLAY_NAMES = {
    "abs": "Abs",
    "square": "Square",
    "softplus": "Softplus",
    "relu": "ReLU",
    "quartic": "Quartic",
    "exp": "Exp",
}
LAYER_KINDS = ("chol", "eig")
# Diagonal floor per unit trace. Forming L L^T or Q p(Lam) Q^T in float64 perturbs
# the result by at most about n*u*tr(C) in 2-norm, which can exceed lambda_min when
# the condition number passes 1/u; shifting by a few times that keeps the stored
# matrix positive definite. The relative change to C is of order 1e-14.
FLOOR_PER_ORDER = 8.0 * np.finfo(np.float64).eps
_MAX = np.finfo(np.float64).max
_EXP_LIMIT = np.log(_MAX)


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class Positivity:
    """Strictly positive scalar map with an additive floor ``epsilon``."""

    kind: str
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in POSITIVITY_KINDS:
            raise ValueError(f"unknown positivity function {self.kind!r}; choose from {POSITIVITY_KINDS}")

    @property
    def display_name(self) -> str:
        return DISPLAY_NAMES[self.kind]

    def value(self, x):
        x = np.asarray(x, dtype=np.float64)
        eps = self.epsilon
        if self.kind == "abs":
            return np.abs(x) + eps
        if self.kind == "square":
            return x * x + eps
        if self.kind == "softplus":
            return np.logaddexp(0.0, x) + eps
        if self.kind == "relu":
            return np.maximum(x, 0.0) + eps
        if self.kind == "quartic":
            x2 = x * x
            return x2 * x2 + eps
        # exp saturates instead of overflowing
        with np.errstate(over="ignore"):
            return np.where(x > _EXP_LIMIT, _MAX, np.exp(np.minimum(x, _EXP_LIMIT)) + eps)

    def derivative(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "abs":
            return np.sign(x)
        if self.kind == "square":
            return 2.0 * x
        if self.kind == "softplus":
            return _logistic(x)
        if self.kind == "relu":
            return np.where(x > 0.0, 1.0, 0.0)
        if self.kind == "quartic":
            return 4.0 * x * x * x
        return np.where(x > _EXP_LIMIT, _MAX, np.exp(np.minimum(x, _EXP_LIMIT)))

    def inverse(self, y):
        """A preimage of ``y`` on the non-negative branch (used for initialization)."""
        z = np.maximum(np.asarray(y, dtype=np.float64) - self.epsilon, self.epsilon)
        if self.kind in ("abs", "relu"):
            return z
        if self.kind == "square":
            return np.sqrt(z)
        if self.kind == "quartic":
            return np.sqrt(np.sqrt(z))
        if self.kind == "softplus":
            return np.where(z > 30.0, z, np.log(np.expm1(np.minimum(z, 30.0))))
        return np.log(z)


def positivity_value(p: Positivity, x):
    return p.value(x)


def positivity_derivative(p: Positivity, x):
    return p.derivative(x)


class CholeskyCache(NamedTuple):
    x: np.ndarray
    L: np.ndarray


class EigenCache(NamedTuple):
    x: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _as_batch(x: np.ndarray, index_map: IndexMap) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != index_map.packed_size:
        raise DimensionError(
            f"layer expects packed vectors of length {index_map.packed_size}, got shape {x.shape}"
        )
    return x, single


def _as_grad_batch(g: np.ndarray, n: int) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 2:
        g = g[None]
    if g.shape[-2:] != (n, n):
        raise DimensionError(f"upstream gradient must have trailing shape {(n, n)}, got {g.shape}")
    return g


def _floor_coefficient(n: int) -> float:
    return FLOOR_PER_ORDER * (n + 2)


def _add_floor(C: np.ndarray) -> np.ndarray:
    n = C.shape[-1]
    tau = _floor_coefficient(n) * np.trace(C, axis1=-2, axis2=-1)
    idx = np.arange(n)
    C[..., idx, idx] += tau[..., None]
    return C


def _floor_backward(G: np.ndarray) -> np.ndarray:
    n = G.shape[-1]
    out = G.copy()
    idx = np.arange(n)
    out[..., idx, idx] += _floor_coefficient(n) * np.trace(G, axis1=-2, axis2=-1)[..., None]
    return out


def cholesky_layer_forward(x, positivity: Positivity, index_map: IndexMap):
    """Returns ``(C, cache)``."""
    xb, single = _as_batch(x, index_map)
    L = scatter(xb, index_map, symmetric=False)
    d = index_map.diagonal
    r = index_map.rows[d]
    L[:, r, r] = positivity.value(xb[:, d])
    C = _add_floor(symmetrize_lower(L @ np.swapaxes(L, -1, -2)))
    cache = CholeskyCache(xb, L)
    return (C[0] if single else C), cache


def cholesky_layer_backward(grad_c, cache: CholeskyCache | None, positivity: Positivity, index_map: IndexMap):
    if cache is None:
        raise RuntimeError("cholesky_layer_backward called without a forward cache")
    xb, L = cache
    single = np.ndim(grad_c) == 2
    G = _floor_backward(_as_grad_batch(grad_c, index_map.order))
    dL = (G + np.swapaxes(G, -1, -2)) @ L
    gx = dL[:, index_map.rows, index_map.cols]
    d = index_map.diagonal
    gx[:, d] *= positivity.derivative(xb[:, d])
    return gx[0] if single else gx


def eig_layer_forward(x, positivity: Positivity, index_map: IndexMap):
    """Returns ``(C, cache)``; raises :class:`NumericalFailure` on solver failure."""
    xb, single = _as_batch(x, index_map)
    A = scatter(xb, index_map, symmetric=True)
    lam, Q = sym_eig_batch(A)
    C = _add_floor(symmetrize_lower((Q * positivity.value(lam)[:, None, :]) @ np.swapaxes(Q, -1, -2)))
    cache = EigenCache(xb, lam, Q)
    return (C[0] if single else C), cache


def divided_differences(lam: np.ndarray, positivity: Positivity) -> np.ndarray:
    """First divided differences of ``p`` on the spectrum, ``(b, n, n)``.

    Near-equal eigenvalues (gap below ``1e-10 * max(1, |lam_i|, |lam_j|)``)
    use ``p'`` at their midpoint, which is the analytic limit.
    """
    li = lam[:, :, None]
    lj = lam[:, None, :]
    pl = positivity.value(lam)
    gap = li - lj
    tau = 1e-10 * np.maximum(1.0, np.maximum(np.abs(li), np.abs(lj)))
    close = np.abs(gap) <= tau
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        dd = (pl[:, :, None] - pl[:, None, :]) / gap
    b, i, j = np.nonzero(close)
    dd[b, i, j] = positivity.derivative(0.5 * (lam[b, i] + lam[b, j]))
    return dd


def eig_layer_backward(grad_c, cache: EigenCache | None, positivity: Positivity, index_map: IndexMap):
    if cache is None:
        raise RuntimeError("eig_layer_backward called without a forward cache")
    _, lam, Q = cache
    single = np.ndim(grad_c) == 2
    G = _floor_backward(_as_grad_batch(grad_c, index_map.order))
    Qt = np.swapaxes(Q, -1, -2)
    S = Qt @ (0.5 * (G + np.swapaxes(G, -1, -2))) @ Q
    gA = Q @ (divided_differences(lam, positivity) * S) @ Qt
    gA = 0.5 * (gA + np.swapaxes(gA, -1, -2))
    gx = gA[:, index_map.rows, index_map.cols]
    # each off-diagonal component occupies two mirrored entries of A
    gx[:, ~index_map.diagonal] *= 2.0
    return gx[0] if single else gx


@dataclass(frozen=True)
class SpdLayer:
    """Parameter-free map from packed vectors to SPD matrices."""

    kind: str
    positivity: Positivity
    index_map: IndexMap

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; choose from {LAYER_KINDS}")

    @classmethod
    def create(cls, kind: str, positivity: str = "softplus", index_map: IndexMap | None = None,
               epsilon: float = 1e-8) -> "SpdLayer":
        return cls(kind, Positivity(positivity, epsilon), index_map or IndexMap.orthotropic())

    @property
    def packed_size(self) -> int:
        return self.index_map.packed_size

    def forward_cached(self, x):
        if self.kind == "chol":
            return cholesky_layer_forward(x, self.positivity, self.index_map)
        return eig_layer_forward(x, self.positivity, self.index_map)

    def forward(self, x) -> np.ndarray:
        return self.forward_cached(x)[0]

    __call__ = forward

    def backward(self, grad_c, cache) -> np.ndarray:
        if self.kind == "chol":
            return cholesky_layer_backward(grad_c, cache, self.positivity, self.index_map)
        return eig_layer_backward(grad_c, cache, self.positivity, self.index_map)

    def inverse(self, c: np.ndarray) -> np.ndarray:
        """Packed vector whose forward image reproduces the SPD matrix ``c``.

        Exact up to rounding for the Cholesky layer, and for the
        eigendecomposition layer whenever ``p`` is invertible on the spectrum.
        """
        c = symmetrize_lower(c)
        if self.kind == "chol":
            L = cholesky(c)
            if L is None:
                raise ValueError("layer inverse requires a positive definite matrix")
            x = gather(L, self.index_map, check=False)
            d = self.index_map.diagonal
            x[d] = self.positivity.inverse(x[d])
            return x
        lam, Q = sym_eig_batch(c)
        a = (Q * self.positivity.inverse(lam)[None, :]) @ Q.T
        return gather(symmetrize_lower(a), self.index_map, check=False)


def layer_forward_batch(X, layer: SpdLayer) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError(f"expected a (b, m) batch, got shape {X.shape}")
    return layer.forward(X)
