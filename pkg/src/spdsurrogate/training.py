"""Loss, optimizers and the full-batch training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .datasets import Dataset
from .layers import SpdLayer
from .surrogates import PredictiveModel, compose, make_surrogate
from .tensor import NumericalFailure

__all__ = [
    "DivergenceError",
    "ModelSpec",
    "TrainConfig",
    "TrainResult",
    "AdamState",
    "LbfgsResult",
    "mse_loss",
    "adam_step",
    "lbfgs_minimize",
    "split_indices",
    "split_dataset",
    "train",
]

LAYER_DEFAULT_POSITIVITY = {"chol": "softplus", "eig": "square"}


class DivergenceError(ArithmeticError):
    """Non-finite loss, prediction or gradient."""


@dataclass(frozen=True)
class ModelSpec:
    family: str
    layer: str = "none"
    positivity: str | None = None
    hidden: int = 100

    def __post_init__(self):
        if self.layer not in ("none", "chol", "eig"):
            raise ValueError(f"unknown layer {self.layer!r}")
        if self.layer != "none" and self.positivity is None:
            object.__setattr__(self, "positivity", LAYER_DEFAULT_POSITIVITY[self.layer])

    def build(self, train_data: Dataset, rng: np.random.Generator) -> PredictiveModel:
        """Fresh model with seeded initial parameters anchored at the training-target mean."""
        imap = train_data.index_map
        layer = None if self.layer == "none" else SpdLayer.create(self.layer, self.positivity, imap)
        u = train_data.box.scale(train_data.inputs)
        s = make_surrogate(self.family, train_data.box.dims, imap.packed_size, centers=u, hidden=self.hidden)
        model = compose(s, layer, imap, train_data.box.lower, train_data.box.upper)
        target = model.packed_target(train_data.targets.mean(axis=0))
        s.init_params(rng, target)
        return model


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 10_000
    split: float = 0.8
    seed: int = 0
    history_size: int = 10
    max_line_search: int = 25

    def __post_init__(self):
        if self.optimizer not in ("adam", "lbfgs"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError("epochs must be a positive integer")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must lie strictly between 0 and 1")


@dataclass
class TrainResult:
    final_parameters: np.ndarray
    train_loss: float
    test_loss: float
    loss_history: list[float]
    diverged: bool
    stop_reason: str
    train_indices: np.ndarray
    test_indices: np.ndarray
    model: PredictiveModel | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        def num(v):
            return float(v) if math.isfinite(v) else None

        return {
            "train_loss": num(self.train_loss),
            "test_loss": num(self.test_loss),
            "loss_history": [num(v) for v in self.loss_history],
            "diverged": self.diverged,
            "stop_reason": self.stop_reason,
            "train_indices": [int(i) for i in self.train_indices],
            "test_indices": [int(i) for i in self.test_indices],
            "n_parameters": int(len(self.final_parameters)),
        }


def mse_loss(model: PredictiveModel, theta, targets, params=None, bound=None):
    """Mean of squared errors over every sample and all n*n entries, with its gradient.

    Raises :class:`DivergenceError` when the prediction is not finite.
    """
    params = model.params if params is None else params
    bound = model.bind(theta) if bound is None else bound
    targets = np.asarray(targets, dtype=np.float64)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            pred, cache = bound.forward(params)
    except NumericalFailure as exc:
        raise DivergenceError(str(exc)) from exc
    if not np.all(np.isfinite(pred)):
        raise DivergenceError("non-finite prediction")
    resid = pred - targets
    loss = float(np.mean(resid * resid))
    grad = bound.vjp(params, (2.0 / resid.size) * resid, cache)
    return loss, grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, params, grad, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t)


# --- L-BFGS ------------------------------------------------------------------


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    history: list[float]
    epochs: int
    status: str
    line_search_failed: bool = False


def _cubic_min(t1, f1, g1, t2, f2, g2, lo, hi):
    """Minimizer of the cubic through two points with slopes, clipped to ``[lo, hi]``."""
    d1 = g1 + g2 - 3.0 * (f1 - f2) / (t1 - t2)
    disc = d1 * d1 - g1 * g2
    if not (disc >= 0.0 and math.isfinite(disc)):
        return 0.5 * (lo + hi)
    d2 = math.copysign(math.sqrt(disc), t2 - t1)
    denom = g2 - g1 + 2.0 * d2
    if denom == 0.0:
        return 0.5 * (lo + hi)
    t = t2 - (t2 - t1) * (g2 + d2 - d1) / denom
    if not math.isfinite(t):
        return 0.5 * (lo + hi)
    return min(max(t, lo), hi)


def _safe_eval(fun, x):
    try:
        f, g = fun(x)
    except DivergenceError:
        return math.inf, None
    f = float(f)
    if not math.isfinite(f) or g is None or not np.all(np.isfinite(g)):
        return math.inf, None
    return f, np.asarray(g, dtype=np.float64)


def _strong_wolfe(fun, x, f0, g0, d, t, c1, c2, max_evals):
    """Bracketing + cubic zoom line search; returns ``(t, f, g)`` or ``None``."""
    gd0 = float(g0 @ d)
    evals = 0

    def phi(step):
        f, g = _safe_eval(fun, x + step * d)
        return f, g, (float(g @ d) if g is not None else math.nan)

    def zoom(lo, f_lo, gd_lo, g_lo, hi, f_hi, gd_hi):
        nonlocal evals
        while evals < max_evals:
            a, b = min(lo, hi), max(lo, hi)
            width = b - a
            if width * np.max(np.abs(d)) < 1e-16 * max(1.0, np.max(np.abs(x))):
                break
            if math.isfinite(f_hi) and math.isfinite(gd_hi):
                t_new = _cubic_min(lo, f_lo, gd_lo, hi, f_hi, gd_hi, a + 0.1 * width, b - 0.1 * width)
            else:
                t_new = 0.5 * (lo + hi)
            f_t, g_t, gd_t = phi(t_new)
            evals += 1
            if f_t > f0 + c1 * t_new * gd0 or f_t >= f_lo:
                hi, f_hi, gd_hi = t_new, f_t, gd_t
            else:
                if abs(gd_t) <= -c2 * gd0:
                    return t_new, f_t, g_t
                if gd_t * (hi - lo) >= 0.0:
                    hi, f_hi, gd_hi = lo, f_lo, gd_lo
                lo, f_lo, gd_lo, g_lo = t_new, f_t, gd_t, g_t
        return None

    t_prev, f_prev, gd_prev, g_prev = 0.0, f0, gd0, g0
    while evals < max_evals:
        f_t, g_t, gd_t = phi(t)
        evals += 1
        if f_t > f0 + c1 * t * gd0 or (evals > 1 and f_t >= f_prev):
            return zoom(t_prev, f_prev, gd_prev, g_prev, t, f_t, gd_t)
        if abs(gd_t) <= -c2 * gd0:
            return t, f_t, g_t
        if gd_t >= 0.0:
            return zoom(t, f_t, gd_t, g_t, t_prev, f_prev, gd_prev)
        t_next = _cubic_min(t_prev, f_prev, gd_prev, t, f_t, gd_t, t + 0.01 * (t - t_prev), 10.0 * t)
        t_prev, f_prev, gd_prev, g_prev = t, f_t, gd_t, g_t
        t = t_next
    return None


def _backtracking(fun, x, f0, g0, d, t, c1, max_evals):
    gd0 = float(g0 @ d)
    for _ in range(max_evals):
        f_t, g_t = _safe_eval(fun, x + t * d)
        if f_t <= f0 + c1 * t * gd0 and f_t < f0:
            return t, f_t, g_t
        t *= 0.5
    return None


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((a, rho))
        q -= a * y
    s, y = s_hist[-1], y_hist[-1]
    q *= (s @ y) / (y @ y)
    for (a, rho), s, y in zip(reversed(alphas), s_hist, y_hist):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(fun: Callable, x0, epochs: int = 100, history_size: int = 10,
                   max_line_search: int = 25, c1: float = 1e-4, c2: float = 0.9,
                   grad_tol: float = 1e-12) -> LbfgsResult:
    """Limited-memory BFGS; one epoch is one accepted step.

    ``fun(x)`` returns ``(f, grad)``. Each step searches along the two-loop
    direction for a strong-Wolfe point; if that fails it backtracks along the
    steepest-descent direction, and if that fails too the best point so far
    is returned with ``line_search_failed`` set.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = _safe_eval(fun, x)
    if g is None:
        raise DivergenceError("objective is not finite at the starting point")
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    history = [f]
    status = "max_epochs"
    failed = False
    done = 0
    for _ in range(epochs):
        if np.max(np.abs(g)) < grad_tol:
            status = "converged"
            break
        if s_hist:
            d = _two_loop(g, s_hist, y_hist)
            t0 = 1.0
        else:
            d = -g
            t0 = min(1.0, 1.0 / np.sum(np.abs(g)))
        if not g @ d < 0.0:
            s_hist.clear()
            y_hist.clear()
            d = -g
            t0 = min(1.0, 1.0 / np.sum(np.abs(g)))
        step = _strong_wolfe(fun, x, f, g, d, t0, c1, c2, max_line_search)
        if step is None:
            d = -g
            step = _backtracking(fun, x, f, g, d, min(1.0, 1.0 / np.sum(np.abs(g))), c1, max_line_search)
            s_hist.clear()
            y_hist.clear()
            if step is None:
                status = "line_search_failed"
                failed = True
                break
        t, f_new, g_new = step
        s = t * d
        y = g_new - g
        if s @ y > 1e-10 * (s @ s):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > history_size:
                s_hist.pop(0)
                y_hist.pop(0)
        x, f, g = x + s, f_new, g_new
        history.append(f)
        done += 1
    else:
        if np.max(np.abs(g)) < grad_tol:
            status = "converged"
    return LbfgsResult(x, f, g, history, done, status, failed)


# --- splitting and the training loop ------------------------------------------


def split_indices(n: int, fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < fraction < 1.0:
        raise ValueError("split fraction must lie strictly between 0 and 1")
    if n < 2:
        raise ValueError("need at least two samples to split")
    n_train = int(math.floor(fraction * n + 0.5))
    if n_train < 1 or n_train > n - 1:
        raise ValueError(f"fraction {fraction} of {n} samples leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split_dataset(data: Dataset, fraction: float, seed) -> tuple[Dataset, Dataset]:
    train_idx, test_idx = split_indices(len(data), fraction, seed)
    return data.subset(train_idx), data.subset(test_idx)


def train(spec: ModelSpec, data: Dataset, config: TrainConfig) -> TrainResult:
    """Seeded full-batch training; the seed fixes the split and the initial weights."""
    split_seed, init_seed = np.random.SeedSequence(config.seed).spawn(2)
    train_idx, test_idx = split_indices(len(data), config.split, split_seed)
    train_data, test_data = data.subset(train_idx), data.subset(test_idx)
    model = spec.build(train_data, np.random.default_rng(init_seed))
    bound = model.bind(train_data.inputs)
    targets = train_data.targets

    def objective(p):
        return mse_loss(model, None, targets, params=p, bound=bound)

    history: list[float] = []
    diverged = False
    params = model.params.copy()
    if config.optimizer == "adam":
        state = AdamState.zeros(len(params))
        stop = "max_epochs"
        for _ in range(config.epochs):
            try:
                loss, grad = objective(params)
                history.append(loss)
                params, state = adam_step(state, params, grad, config.lr)
            except DivergenceError:
                diverged, stop = True, "diverged"
                break
    else:
        try:
            res = lbfgs_minimize(objective, params, config.epochs, config.history_size, config.max_line_search)
            params, history, stop = res.x, res.history[1:], res.status
        except DivergenceError:
            diverged, stop = True, "diverged"

    model.params = params
    train_loss = test_loss = math.nan
    if not diverged:
        try:
            train_loss = objective(params)[0]
            test_loss = mse_loss(model, test_data.inputs, test_data.targets)[0]
        except DivergenceError:
            diverged, stop = True, "diverged"
    return TrainResult(params, train_loss, test_loss, history, diverged, stop, train_idx, test_idx, model)
