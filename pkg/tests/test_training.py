import math

import numpy as np
import pytest

from spdsurrogate.datasets import generate_dataset
from spdsurrogate.layers import SpdLayer
from spdsurrogate.surrogates import PolynomialSurface, compose
from spdsurrogate.tensor import IndexMap
from spdsurrogate.training import (
    AdamState,
    DivergenceError,
    ModelSpec,
    TrainConfig,
    adam_step,
    lbfgs_minimize,
    mse_loss,
    split_indices,
    train,
)

from conftest import central_difference, rel_error


def test_adam_first_step():
    params = np.array([1.0, -2.0, 0.5])
    grad = np.array([3.0, -0.1, 1e-3])
    new, state = adam_step(AdamState.zeros(3), params, grad, 1e-3)
    # bias correction makes the first step -lr * g / (|g| + eps)
    np.testing.assert_allclose(new - params, -1e-3 * grad / (np.abs(grad) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(new[0] - params[0], -1e-3 / (1 + 1e-8 / 3.0), rtol=1e-14)
    assert state.t == 1
    with pytest.raises(DivergenceError):
        adam_step(state, new, np.array([np.nan, 0, 0]), 1e-3)


def test_adam_minimizes_quadratic():
    x = np.array([3.0, -4.0])
    state = AdamState.zeros(2)
    for _ in range(3000):
        x, state = adam_step(state, x, 2 * x, 1e-2)
    assert np.max(np.abs(x)) < 1e-3


def test_mse_loss_value():
    imap = IndexMap.full(6)
    s = PolynomialSurface(1, 21, 0)
    model = compose(s, None, imap)
    target = np.eye(6) * 2.0
    # constant prediction C_hat = C + I
    s.params = model.packed_target(target + np.eye(6))
    loss, grad = mse_loss(model, np.zeros((1, 1)), target[None])
    assert loss == pytest.approx(1 / 6, rel=1e-15)
    f = lambda p: mse_loss(model, np.zeros((1, 1)), target[None], params=p)[0]
    assert rel_error(grad, central_difference(f, s.params.copy())) < 1e-6


def test_mse_loss_gradient_with_layer(rng):
    data = generate_dataset("solid2d", 0, n=20)
    model = ModelSpec("nn", "eig", "square", hidden=6).build(data, rng)
    p0 = model.params.copy()
    f = lambda p: mse_loss(model, data.inputs, data.targets, params=p)[0]
    _, g = mse_loss(model, data.inputs, data.targets, params=p0)
    assert rel_error(g, central_difference(f, p0)) < 1e-6


def test_lbfgs_quadratic():
    A = np.diag([1.0, 10.0, 100.0])
    b = np.array([1.0, 2.0, 3.0])
    res = lbfgs_minimize(lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b), np.zeros(3), epochs=20)
    np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-10)
    assert res.epochs <= 20


def rosenbrock(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return f, g


def test_lbfgs_rosenbrock():
    res = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), epochs=100)
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-6)
    assert res.epochs <= 100
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))


def test_lbfgs_reports_divergent_start():
    with pytest.raises(DivergenceError):
        lbfgs_minimize(lambda x: (math.nan, x), np.zeros(2))


def test_lbfgs_survives_nonfinite_region():
    # objective is infinite for x > 2; the line search must back off
    def fun(x):
        if x[0] > 2.0:
            return math.inf, None
        return (x[0] - 1.9) ** 2, np.array([2 * (x[0] - 1.9)])

    res = lbfgs_minimize(fun, np.array([-50.0]), epochs=50)
    assert abs(res.x[0] - 1.9) < 1e-6


def test_split_indices():
    tr, te = split_indices(100, 0.8, 3)
    assert len(tr) == 80 and len(te) == 20
    assert sorted(np.concatenate([tr, te]).tolist()) == list(range(100))
    assert len(split_indices(1000, 0.1, 0)[0]) == 100
    assert len(split_indices(5, 0.5, 0)[0]) == 3  # round half up
    a, _ = split_indices(100, 0.8, 3)
    assert np.array_equal(a, tr)
    with pytest.raises(ValueError):
        split_indices(2, 0.1, 0)
    with pytest.raises(ValueError):
        split_indices(10, 1.0, 0)


def test_train_is_deterministic_and_decreases_loss():
    data = generate_dataset("solid2d", 0)
    cfg = TrainConfig(epochs=200, seed=5)
    r1 = train(ModelSpec("nn", "chol"), data, cfg)
    r2 = train(ModelSpec("nn", "chol"), data, cfg)
    assert np.array_equal(r1.final_parameters, r2.final_parameters)
    assert r1.test_loss == r2.test_loss
    assert len(r1.loss_history) == 200
    assert r1.train_loss < r1.loss_history[0]
    assert r1.model.layer.positivity.kind == "softplus"
    d = r1.to_dict()
    assert d["diverged"] is False and len(d["test_indices"]) == 20


def test_different_seeds_resample_split_and_init():
    data = generate_dataset("solid2d", 0)
    a = train(ModelSpec("quadratic"), data, TrainConfig(epochs=5, seed=1))
    b = train(ModelSpec("quadratic"), data, TrainConfig(epochs=5, seed=2))
    assert not np.array_equal(a.test_indices, b.test_indices)


def test_lbfgs_training_matches_least_squares():
    data = generate_dataset("solid2d", 0)
    res = train(ModelSpec("quadratic"), data, TrainConfig(optimizer="lbfgs", epochs=200, seed=0))
    model = res.model
    s = model.surrogate
    tr = data.subset(res.train_indices)
    y = tr.targets[:, model.index_map.rows, model.index_map.cols]
    exact = s.least_squares(model.scale(tr.inputs), y)
    best = mse_loss(model, tr.inputs, tr.targets, params=exact)[0]
    assert res.train_loss <= best * (1 + 1e-6) + 1e-12


def test_divergence_is_reported():
    data = generate_dataset("solid2d", 0)
    res = train(ModelSpec("nn", "eig", "exp"), data, TrainConfig(lr=1e6, epochs=50, seed=0))
    assert res.diverged and res.stop_reason == "diverged"
    assert math.isnan(res.test_loss)
    assert res.to_dict()["test_loss"] is None


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        ModelSpec("nn", "qr")
    assert ModelSpec("nn", "eig").positivity == "square"
    assert SpdLayer.create("chol").positivity.kind == "softplus"


def test_adam_zero_gradient_keeps_parameters():
    p = np.array([0.3, -1.0])
    state = AdamState.zeros(2)
    for _ in range(5):
        q, state = adam_step(state, p, np.zeros(2), 1e-3)
        assert np.array_equal(q, p)


def test_mse_matches_elementwise_sum(rng):
    data = generate_dataset("solid2d", 1, n=7)
    model = ModelSpec("quadratic").build(data, rng)
    model.params = rng.normal(size=model.surrogate.n_params)
    pred = model.predict(data.inputs)
    brute = sum((pred[s, i, j] - data.targets[s, i, j]) ** 2
                for s in range(7) for i in range(6) for j in range(6)) / (7 * 36)
    assert mse_loss(model, data.inputs, data.targets)[0] == pytest.approx(brute, rel=1e-13)


def test_adam_reduces_network_loss_a_hundredfold():
    data = generate_dataset("solid2d", 0)
    res = train(ModelSpec("nn", "chol", "softplus"), data, TrainConfig(epochs=2000, seed=0))
    assert res.loss_history[0] / res.train_loss >= 100


@pytest.mark.parametrize("family", ["quadratic", "quartic"])
@pytest.mark.parametrize("layer", ["none", "chol", "eig"])
def test_constant_target_is_learned(family, layer):
    from spdsurrogate.datasets import Dataset

    data = generate_dataset("solid2d", 0)
    const = Dataset(data.box, data.inputs, np.repeat(data.targets[:1], len(data), axis=0), data.index_map)
    res = train(ModelSpec(family, layer), const, TrainConfig(epochs=200, seed=0))
    assert res.test_loss < 1e-8


def test_constant_target_network_approaches_zero():
    from spdsurrogate.datasets import Dataset

    data = generate_dataset("solid2d", 0)
    const = Dataset(data.box, data.inputs, np.repeat(data.targets[:1], len(data), axis=0), data.index_map)
    losses = [train(ModelSpec("nn"), const, TrainConfig("lbfgs", epochs=e, seed=0)).test_loss for e in (10, 100, 1000)]
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-7


def test_lbfgs_first_step_is_steepest_descent():
    A = np.diag([1.0, 4.0])
    calls = []

    def fun(x):
        calls.append(x.copy())
        return 0.5 * x @ A @ x, A @ x

    x0 = np.array([1.0, 1.0])
    lbfgs_minimize(fun, x0, epochs=1)
    step = calls[1] - x0
    g0 = A @ x0
    assert abs(step @ g0 + np.linalg.norm(step) * np.linalg.norm(g0)) < 1e-12
