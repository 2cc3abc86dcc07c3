from math import comb

import numpy as np
import pytest

from spdsurrogate.layers import SpdLayer
from spdsurrogate.surrogates import (
    FAMILIES,
    PolynomialSurface,
    RadialBasisNetwork,
    RbfInterpolant,
    compose,
    dumps_model,
    loads_model,
    make_surrogate,
    monomial_exponents,
)
from spdsurrogate.tensor import DimensionError, IndexMap

from conftest import central_difference, rel_error


def test_monomial_basis_sizes():
    for d in (1, 2, 3):
        for deg in (0, 1, 2, 4):
            e = monomial_exponents(d, deg)
            assert len(e) == comb(d + deg, deg)
            assert len({tuple(r) for r in e}) == len(e)
            assert np.all(np.diff(e.sum(axis=1)) >= 0)
    assert monomial_exponents(2, 2).tolist() == [[0, 0], [1, 0], [0, 1], [2, 0], [1, 1], [0, 2]]
    assert PolynomialSurface(3, 9, 4).n_params == 9 * 35
    assert PolynomialSurface(2, 9, 2).family == "quadratic"


def test_polynomial_features_values():
    p = PolynomialSurface(2, 1, 2)
    np.testing.assert_array_equal(p.features([[2.0, 3.0]]), [[1, 2, 3, 4, 6, 9]])


def test_network_parameter_layout(rng):
    net = RadialBasisNetwork(3, 9, hidden=100)
    assert net.n_params == 100 * 3 + 100 + 9 * 100 + 9
    params = rng.normal(size=net.n_params)
    W, c, V, b = net.unpack(params)
    u = rng.uniform(size=(4, 3))
    expected = np.exp(-(u @ W.T + c) ** 2) @ V.T + b
    np.testing.assert_allclose(net.forward(u, params), expected, rtol=1e-14)


def test_rbf_is_linear_kernel(rng):
    centers = rng.uniform(size=(5, 2))
    rbf = RbfInterpolant(centers, 2)
    u = rng.uniform(size=(3, 2))
    F = rbf.features(u)
    np.testing.assert_allclose(F, np.linalg.norm(u[:, None] - centers[None], axis=2), rtol=1e-14)
    rbf.init_params(rng, np.array([1.0, 2.0]))
    # prediction at the centers averages to the target
    np.testing.assert_allclose(rbf.forward(centers).mean(axis=0), [1.0, 2.0], rtol=1e-12)


def test_polynomial_least_squares_recovers_exact_fit(rng):
    p = PolynomialSurface(2, 3, 2)
    true = rng.normal(size=p.n_params)
    u = rng.uniform(size=(40, 2))
    y = p.forward(u, true)
    np.testing.assert_allclose(p.least_squares(u, y), true, rtol=1e-9, atol=1e-10)


def _model(family, layer, rng, d=3, imap=None):
    imap = imap or IndexMap.orthotropic()
    centers = rng.uniform(size=(12, d))
    s = make_surrogate(family, d, imap.packed_size, centers=centers, hidden=8)
    s.params = rng.normal(size=s.n_params) * 0.5
    lay = None if layer == "none" else SpdLayer.create(layer, "softplus", imap)
    return compose(s, lay, imap, np.zeros(d), np.full(d, 2.0))


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("layer", ["none", "chol", "eig"])
def test_model_vjp_matches_finite_differences(family, layer, rng):
    model = _model(family, layer, rng)
    theta = rng.uniform(0, 2, size=(7, 3))
    bound = model.bind(theta)
    G = rng.normal(size=(7, 6, 6))

    def f(p):
        return float(np.sum(G * bound.forward(p)[0]))

    p0 = model.params.copy()
    C, cache = bound.forward(p0)
    analytic = bound.vjp(p0, G, cache)
    assert rel_error(analytic, central_difference(f, p0)) < 1e-6


def test_predict_scales_inputs(rng):
    model = _model("quadratic", "none", rng)
    theta = rng.uniform(0, 2, size=(3, 3))
    direct = model.surrogate.forward(theta / 2.0)
    np.testing.assert_allclose(model.predict(theta)[:, [0, 1, 1, 2, 2, 2, 3, 4, 5], [0, 0, 1, 0, 1, 2, 3, 4, 5]],
                               direct, rtol=1e-14)
    assert model.predict(theta[0]).shape == (6, 6)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("layer", ["none", "chol", "eig"])
def test_serialization_roundtrip(family, layer, rng):
    model = _model(family, layer, rng)
    text = dumps_model(model)
    back = loads_model(text)
    assert dumps_model(back) == text
    theta = rng.uniform(0, 2, size=(5, 3))
    np.testing.assert_array_equal(back.predict(theta), model.predict(theta))


def test_serialization_errors(rng):
    text = dumps_model(_model("nn", "chol", rng))
    with pytest.raises(ValueError):
        loads_model(text.replace("spdsurrogate-model/1", "other/9"))
    with pytest.raises(ValueError):
        loads_model("\n".join(line for line in text.splitlines() if not line.startswith("params")))
    with pytest.raises(ValueError):
        loads_model("garbage")


def test_shape_errors():
    with pytest.raises(DimensionError):
        RadialBasisNetwork(2, 3, 4, params=np.zeros(5))
    with pytest.raises(DimensionError):
        PolynomialSurface(2, 3, 2).forward(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        make_surrogate("spline", 2, 9)
    with pytest.raises(ValueError):
        make_surrogate("rbf", 2, 9)


def test_quadratic_one_input_example():
    p = PolynomialSurface(1, 1, 2, params=[1.0, 2.0, 3.0])
    assert p.forward([[2.0]])[0, 0] == 17.0


def test_rbf_at_its_own_center_is_zero(rng):
    rbf = RbfInterpolant([[0.3, 0.7]], 4, params=rng.normal(size=4))
    np.testing.assert_array_equal(rbf.forward([[0.3, 0.7]]), np.zeros((1, 4)))


def test_network_with_zero_output_weights_returns_bias(rng):
    net = RadialBasisNetwork(2, 3, hidden=5)
    params = rng.normal(size=net.n_params)
    W, c, V, b = net.unpack(params)
    V[:] = 0.0
    np.testing.assert_array_equal(net.forward(rng.uniform(size=(6, 2)), params), np.tile(b, (6, 1)))


@pytest.mark.parametrize("family", ["quadratic", "quartic", "rbf"])
def test_linear_families_are_linear_in_parameters(family, rng):
    s = make_surrogate(family, 3, 9, centers=rng.uniform(size=(10, 3)))
    u = rng.uniform(size=(5, 3))
    p1, p2 = rng.integers(-4, 4, size=(2, s.n_params)).astype(float)
    lhs = s.forward(u, 2.0 * p1 - 3.0 * p2)
    np.testing.assert_allclose(lhs, 2.0 * s.forward(u, p1) - 3.0 * s.forward(u, p2), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("layer", ["chol", "eig"])
def test_composed_predictions_are_spd(layer, rng):
    from spdsurrogate.tensor import min_eigenvalues

    bad = 0
    for _ in range(100):
        model = _model("nn", layer, rng)
        model.params = rng.normal(size=model.surrogate.n_params) * 3.0
        bad += int(np.sum(min_eigenvalues(model.predict(rng.uniform(0, 2, size=(10, 3)))) <= 0))
    assert bad == 0


def test_eig_layer_with_constant_diagonal_output():
    imap = IndexMap.orthotropic()
    p = PolynomialSurface(2, 9, 0)
    p.params = np.array([1.0, 0, 2.0, 0, 0, 3.0, 4.0, 5.0, 6.0])
    model = compose(p, SpdLayer.create("eig", "square", imap), imap)
    C = model.predict(np.array([[0.1, 0.2], [0.8, 0.3]]))
    np.testing.assert_array_equal(C[0], C[1])
    np.testing.assert_allclose(np.diag(C[0]), np.array([1, 2, 3, 4, 5, 6.0]) ** 2 + 1e-8, rtol=1e-11)
