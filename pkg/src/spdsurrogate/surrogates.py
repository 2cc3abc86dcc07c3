"""Surrogate model families and their composition with an SPD layer.

Every family maps scaled inputs ``u`` in ``[0, 1]^d`` to packed vectors of
length ``m`` and exposes the exact gradient of ``sum(upstream * forward(u))``
with respect to its flat parameter vector.

``bind(u)`` precomputes whatever does not depend on the parameters (the
monomial and distance design matrices of the linear families), so training
loops evaluate a fixed batch cheaply.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np

from .layers import Positivity, SpdLayer
from .tensor import DimensionError, IndexMap, gather, scatter, symmetrize_lower

__all__ = [
    "FAMILIES",
    "RadialBasisNetwork",
    "PolynomialSurface",
    "RbfInterpolant",
    "PredictiveModel",
    "make_surrogate",
    "compose",
    "dumps_model",
    "loads_model",
]

FAMILIES = ("nn", "quadratic", "quartic", "rbf")
FAMILY_LABELS = {"nn": "NN", "quadratic": "Quadratic", "quartic": "Quartic", "rbf": "RBF"}


def _check_inputs(u, d: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        u = u[None, :]
    if u.ndim != 2 or u.shape[1] != d:
        raise DimensionError(f"expected inputs with {d} columns, got shape {u.shape}")
    return u


class _LinearBound:
    """Evaluator for surrogates linear in their parameters: ``y = F @ W.T``."""

    def __init__(self, features: np.ndarray, m: int):
        self.features = features
        self.m = m

    def forward(self, params: np.ndarray) -> np.ndarray:
        return self.features @ params.reshape(self.m, -1).T

    def gradient(self, params: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        return (upstream.T @ self.features).ravel()


class RadialBasisNetwork:
    """One hidden layer of Gaussian units: ``y = V g(W u + c) + b``, ``g(z) = exp(-z^2)``."""

    family = "nn"

    def __init__(self, input_dim: int, output_dim: int, hidden: int = 100, params=None):
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.hidden = hidden
        self.params = np.zeros(self.n_params) if params is None else np.array(params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got {self.params.shape}")

    @property
    def n_params(self) -> int:
        h, d, m = self.hidden, self.input_dim, self.output_dim
        return h * d + h + m * h + m

    def unpack(self, params):
        h, d, m = self.hidden, self.input_dim, self.output_dim
        i = 0
        W = params[i:i + h * d].reshape(h, d); i += h * d
        c = params[i:i + h]; i += h
        V = params[i:i + m * h].reshape(m, h); i += m * h
        b = params[i:i + m]
        return W, c, V, b

    def init_params(self, rng: np.random.Generator, target=None) -> np.ndarray:
        h, d, m = self.hidden, self.input_dim, self.output_dim
        parts = [
            rng.uniform(-1.0, 1.0, h * d) / np.sqrt(d),
            rng.uniform(-1.0, 1.0, h) / np.sqrt(d),
            rng.uniform(-1.0, 1.0, m * h) / np.sqrt(h),
            rng.uniform(-1.0, 1.0, m) / np.sqrt(h),
        ]
        self.params = np.concatenate(parts)
        return self.params

    def bind(self, u):
        return _NetworkBound(self, _check_inputs(u, self.input_dim))

    def forward(self, u, params=None):
        return self.bind(u).forward(self.params if params is None else params)

    def gradient(self, u, upstream, params=None):
        return self.bind(u).gradient(self.params if params is None else params, upstream)


class _NetworkBound:
    def __init__(self, net: RadialBasisNetwork, u: np.ndarray):
        self.net = net
        self.u = u
        self._last = None

    def _hidden(self, params):
        last = self._last
        if last is not None and np.array_equal(last[0], params):
            return last[1], last[2]
        W, c, _, _ = self.net.unpack(params)
        z = self.u @ W.T + c
        g = np.exp(-z * z)
        # training evaluates forward and then gradient at the same parameters
        self._last = (params.copy(), z, g)
        return z, g

    def forward(self, params):
        _, _, V, b = self.net.unpack(params)
        _, g = self._hidden(params)
        return g @ V.T + b

    def gradient(self, params, upstream):
        _, _, V, _ = self.net.unpack(params)
        upstream = np.asarray(upstream, dtype=np.float64).reshape(len(self.u), -1)
        z, g = self._hidden(params)
        dz = (upstream @ V) * (-2.0 * z * g)
        return np.concatenate([
            (dz.T @ self.u).ravel(),
            dz.sum(axis=0),
            (upstream.T @ g).ravel(),
            upstream.sum(axis=0),
        ])


def monomial_exponents(d: int, degree: int) -> np.ndarray:
    """Exponent rows of all monomials of total degree <= ``degree``, graded order."""
    rows = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), total):
            e = [0] * d
            for k in combo:
                e[k] += 1
            rows.append(e)
    return np.array(rows, dtype=np.int64).reshape(-1, d)


class PolynomialSurface:
    family_by_degree = {2: "quadratic", 4: "quartic"}

    def __init__(self, input_dim: int, output_dim: int, degree: int, params=None):
        if degree < 0:
            raise ValueError("degree must be non-negative")
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.degree = degree
        self.exponents = monomial_exponents(input_dim, degree)
        assert len(self.exponents) == comb(input_dim + degree, degree)
        self.params = np.zeros(self.n_params) if params is None else np.array(params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got {self.params.shape}")

    @property
    def family(self) -> str:
        return self.family_by_degree.get(self.degree, f"poly{self.degree}")

    @property
    def basis_size(self) -> int:
        return len(self.exponents)

    @property
    def n_params(self) -> int:
        return self.output_dim * self.basis_size

    def features(self, u) -> np.ndarray:
        u = _check_inputs(u, self.input_dim)
        return np.prod(u[:, None, :] ** self.exponents[None, :, :], axis=2)

    def init_params(self, rng: np.random.Generator, target=None) -> np.ndarray:
        coef = np.zeros((self.output_dim, self.basis_size))
        if target is not None:
            coef[:, 0] = target
        self.params = coef.ravel()
        return self.params

    def bind(self, u):
        return _LinearBound(self.features(u), self.output_dim)

    def forward(self, u, params=None):
        return self.bind(u).forward(self.params if params is None else params)

    def gradient(self, u, upstream, params=None):
        return self.bind(u).gradient(self.params if params is None else params, upstream)

    def least_squares(self, u, y) -> np.ndarray:
        """Closed-form coefficients minimizing ``||F W.T - y||^2`` (cross-check path)."""
        coef, *_ = np.linalg.lstsq(self.features(u), np.asarray(y, dtype=np.float64), rcond=None)
        return coef.T.ravel()


class RbfInterpolant:
    """Linear-kernel RBF: ``y = W [||u - center_k||]_k`` with centers fixed."""

    family = "rbf"

    def __init__(self, centers, output_dim: int, params=None):
        self.centers = np.array(centers, dtype=np.float64)
        if self.centers.ndim != 2 or len(self.centers) == 0:
            raise DimensionError("centers must be a non-empty (K, d) array")
        self.input_dim = self.centers.shape[1]
        self.output_dim = output_dim
        self.params = np.zeros(self.n_params) if params is None else np.array(params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got {self.params.shape}")

    @property
    def n_params(self) -> int:
        return self.output_dim * len(self.centers)

    def features(self, u) -> np.ndarray:
        u = _check_inputs(u, self.input_dim)
        diff = u[:, None, :] - self.centers[None, :, :]
        return np.sqrt(np.einsum("bkd,bkd->bk", diff, diff))

    def init_params(self, rng: np.random.Generator, target=None) -> np.ndarray:
        w = np.zeros((self.output_dim, len(self.centers)))
        if target is not None:
            # uniform weights sized so the prediction averages to `target` over the centers
            mean_row_sum = self.features(self.centers).sum(axis=1).mean()
            if mean_row_sum > 0:
                w[:] = np.asarray(target)[:, None] / mean_row_sum
        self.params = w.ravel()
        return self.params

    def bind(self, u):
        return _LinearBound(self.features(u), self.output_dim)

    def forward(self, u, params=None):
        return self.bind(u).forward(self.params if params is None else params)

    def gradient(self, u, upstream, params=None):
        return self.bind(u).gradient(self.params if params is None else params, upstream)


def make_surrogate(family: str, input_dim: int, output_dim: int, centers=None, hidden: int = 100):
    if family == "nn":
        return RadialBasisNetwork(input_dim, output_dim, hidden)
    if family == "quadratic":
        return PolynomialSurface(input_dim, output_dim, 2)
    if family == "quartic":
        return PolynomialSurface(input_dim, output_dim, 4)
    if family == "rbf":
        if centers is None:
            raise ValueError("the rbf family needs training inputs as centers")
        return RbfInterpolant(centers, output_dim)
    raise ValueError(f"unknown surrogate family {family!r}; choose from {FAMILIES}")


@dataclass
class PredictiveModel:
    """Surrogate plus optional SPD layer, predicting 6x6 (n x n) matrices from raw inputs.

    Raw inputs are mapped affinely onto ``[0, 1]^d`` with the sampling box
    ``(lower, upper)`` before reaching the surrogate.
    """

    surrogate: object
    layer: SpdLayer | None
    index_map: IndexMap
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.surrogate.output_dim != self.index_map.packed_size:
            raise DimensionError(
                f"surrogate outputs {self.surrogate.output_dim} values but the map packs "
                f"{self.index_map.packed_size}"
            )
        if self.layer is not None and self.layer.index_map != self.index_map:
            raise DimensionError("layer and model use different index maps")

    @property
    def params(self) -> np.ndarray:
        return self.surrogate.params

    @params.setter
    def params(self, value):
        self.surrogate.params = np.asarray(value, dtype=np.float64)

    @property
    def layer_name(self) -> str:
        return "none" if self.layer is None else self.layer.kind

    def scale(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        return (theta - self.lower) / (self.upper - self.lower)

    def to_matrix(self, y: np.ndarray) -> np.ndarray:
        if self.layer is None:
            return scatter(y, self.index_map, symmetric=True)
        return self.layer.forward(y)

    def predict(self, theta, params=None) -> np.ndarray:
        single = np.ndim(theta) == 1
        y = self.surrogate.forward(self.scale(np.atleast_2d(theta)), params)
        C = self.to_matrix(y)
        return C[0] if single else C

    def bind(self, theta) -> "BoundModel":
        return BoundModel(self, self.surrogate.bind(self.scale(np.atleast_2d(theta))))

    def packed_target(self, c_mean: np.ndarray) -> np.ndarray:
        """Surrogate output that maps to ``c_mean`` (initialization anchor)."""
        if self.layer is None:
            return gather(symmetrize_lower(c_mean), self.index_map, check=False)
        return self.layer.inverse(c_mean)


class BoundModel:
    """A model tied to a fixed batch of inputs; ``vjp`` back-propagates a matrix gradient."""

    def __init__(self, model: PredictiveModel, evaluator):
        self.model = model
        self.evaluator = evaluator

    def forward(self, params):
        y = self.evaluator.forward(params)
        layer = self.model.layer
        if layer is None:
            return scatter(y, self.model.index_map, symmetric=True), None
        return layer.forward_cached(y)

    def vjp(self, params, grad_c, cache) -> np.ndarray:
        layer = self.model.layer
        imap = self.model.index_map
        if layer is None:
            gy = grad_c[:, imap.rows, imap.cols] + grad_c[:, imap.cols, imap.rows]
            gy[:, imap.diagonal] *= 0.5
        else:
            gy = layer.backward(grad_c, cache)
        return self.evaluator.gradient(params, gy)


def compose(surrogate, layer: SpdLayer | None, index_map: IndexMap | None = None,
            lower=None, upper=None) -> PredictiveModel:
    if index_map is None:
        index_map = layer.index_map if layer is not None else IndexMap.orthotropic()
    d = surrogate.input_dim
    lower = np.zeros(d) if lower is None else lower
    upper = np.ones(d) if upper is None else upper
    return PredictiveModel(surrogate, layer, index_map, lower, upper)


# --- serialization -----------------------------------------------------------

MODEL_FORMAT = "spdsurrogate-model/1"


def _fmt_array(a) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(a))


def dumps_model(model: PredictiveModel) -> str:
    s = model.surrogate
    lines = [
        f"format = {MODEL_FORMAT}",
        f"family = {s.family}",
        f"input_dim = {s.input_dim}",
        f"output_dim = {s.output_dim}",
        f"map = {model.index_map.kind}",
        f"order = {model.index_map.order}",
        f"layer = {model.layer_name}",
        f"positivity = {model.layer.positivity.kind if model.layer else 'none'}",
        f"epsilon = {repr(model.layer.positivity.epsilon) if model.layer else 'none'}",
        f"box_lower = {_fmt_array(model.lower)}",
        f"box_upper = {_fmt_array(model.upper)}",
    ]
    if isinstance(s, RadialBasisNetwork):
        lines.append(f"hidden = {s.hidden}")
    if isinstance(s, PolynomialSurface):
        lines.append(f"degree = {s.degree}")
    if isinstance(s, RbfInterpolant):
        lines.append(f"n_centers = {len(s.centers)}")
        lines.append(f"centers = {_fmt_array(s.centers)}")
    lines.append(f"n_params = {s.n_params}")
    lines.append(f"params = {_fmt_array(s.params)}")
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> PredictiveModel:
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        fields[key.strip()] = value.strip()
    try:
        if fields["format"] != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {fields['format']!r}")
        d = int(fields["input_dim"])
        m = int(fields["output_dim"])
        family = fields["family"]
        params = np.array(fields["params"].split(), dtype=np.float64)
        imap = IndexMap.from_kind(fields["map"], int(fields["order"]))
        if family == "nn":
            s = RadialBasisNetwork(d, m, int(fields["hidden"]), params)
        elif family in ("quadratic", "quartic") or family.startswith("poly"):
            s = PolynomialSurface(d, m, int(fields["degree"]), params)
        elif family == "rbf":
            centers = np.array(fields["centers"].split(), dtype=np.float64).reshape(int(fields["n_centers"]), d)
            s = RbfInterpolant(centers, m, params)
        else:
            raise ValueError(f"unknown family {family!r}")
        if int(fields["n_params"]) != s.n_params:
            raise ValueError("parameter count does not match the declared structure")
        layer = None
        if fields["layer"] != "none":
            layer = SpdLayer(fields["layer"], Positivity(fields["positivity"], float(fields["epsilon"])), imap)
        lower = np.array(fields["box_lower"].split(), dtype=np.float64)
        upper = np.array(fields["box_upper"].split(), dtype=np.float64)
    except KeyError as exc:
        raise ValueError(f"model document is missing field {exc.args[0]!r}") from None
    return PredictiveModel(s, layer, imap, lower, upper)
