import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spdsurrogate.tensor import (
    DimensionError,
    IndexMap,
    NumericalFailure,
    PatternViolationError,
    cholesky,
    gather,
    is_indefinite,
    min_eigenvalue,
    order_from_packed_size,
    packed_size,
    scatter,
    sym_eig,
    sym_eig_batch,
    symmetrize_lower,
)

from conftest import random_spd


def test_packed_size():
    assert [packed_size(n) for n in (1, 2, 3, 6)] == [1, 3, 6, 21]
    assert order_from_packed_size(21) == 6
    with pytest.raises(DimensionError):
        packed_size(0)
    with pytest.raises(DimensionError):
        order_from_packed_size(7)


def test_index_maps():
    full = IndexMap.full(6)
    assert full.packed_size == 21
    ortho = IndexMap.orthotropic()
    assert ortho.packed_size == 9
    assert ortho.diagonal.sum() == 6
    assert ortho.pattern.sum() == 12
    assert not ortho.pattern[0, 3] and ortho.pattern[2, 0] and ortho.pattern[0, 2]
    with pytest.raises(ValueError):
        IndexMap(2, ((0, 1),), "bad")
    with pytest.raises(ValueError):
        IndexMap(2, ((0, 0), (0, 0)), "bad")


@pytest.mark.parametrize("imap", [IndexMap.full(6), IndexMap.orthotropic(), IndexMap.full(1), IndexMap.full(3)])
def test_scatter_gather_roundtrip(imap, rng):
    x = rng.normal(size=(5, imap.packed_size))
    m = scatter(x, imap)
    assert np.array_equal(m, np.swapaxes(m, -1, -2))
    assert np.array_equal(gather(m, imap), x)
    lower = scatter(x, imap, symmetric=False)
    assert np.all(np.triu(lower[0], 1) == 0)


def test_gather_rejects_out_of_pattern():
    imap = IndexMap.orthotropic()
    m = np.eye(6)
    m[4, 0] = m[0, 4] = 1e-6
    with pytest.raises(PatternViolationError):
        gather(m, imap)
    m[4, 0] = m[0, 4] = 1e-14
    gather(m, imap)
    with pytest.raises(DimensionError):
        scatter(np.zeros(8), imap)


def test_symmetrize_lower_copies():
    a = np.arange(9.0).reshape(3, 3)
    s = symmetrize_lower(a)
    assert np.array_equal(s, s.T)
    assert s[0, 2] == a[2, 0]
    assert a[0, 2] == 2.0


def test_cholesky_closed_form():
    L = cholesky(np.array([[4.0, 2.0], [2.0, 5.0]]))
    assert np.array_equal(L, np.array([[2.0, 0.0], [1.0, 2.0]]))
    assert cholesky(np.array([[1.0, 2.0], [2.0, 1.0]])) is None
    assert cholesky(np.zeros((3, 3))) is None


def test_cholesky_random(rng):
    for _ in range(20):
        a = random_spd(rng)
        L = cholesky(a)
        np.testing.assert_allclose(L @ L.T, a, rtol=1e-13, atol=1e-12)
        np.testing.assert_allclose(L, np.linalg.cholesky(a), rtol=1e-12, atol=1e-12)


def test_jacobi_diagonal_input():
    lam, q = sym_eig(np.diag([3.0, 1.0, 2.0]))
    assert np.array_equal(lam, [1.0, 2.0, 3.0])
    assert np.array_equal(np.abs(q), np.eye(3)[:, [1, 2, 0]])


def test_jacobi_two_by_two_closed_form():
    lam, q = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(lam, [1.0, 3.0], atol=1e-15)
    s = 1 / np.sqrt(2)
    np.testing.assert_allclose(np.abs(q), [[s, s], [s, s]], atol=1e-15)
    assert q[0, 0] * q[1, 0] < 0


def test_jacobi_matches_lapack(rng):
    mats = np.array([random_spd(rng, 6, -3.0) for _ in range(50)])
    lam, q = sym_eig_batch(mats)
    np.testing.assert_allclose(lam, np.linalg.eigvalsh(mats), rtol=1e-12, atol=1e-12)
    eye = np.eye(6)
    for k in range(50):
        np.testing.assert_allclose(q[k].T @ q[k], eye, atol=1e-13)
        np.testing.assert_allclose(q[k] @ np.diag(lam[k]) @ q[k].T, mats[k], atol=1e-12)
    assert np.all(np.diff(lam, axis=1) >= 0)


def test_jacobi_keeps_orthotropic_zeros(rng):
    x = rng.normal(size=9)
    m = scatter(x, IndexMap.orthotropic())
    lam, q = sym_eig(m)
    # shear block eigenvectors stay unit vectors, coupling block stays in its 3 rows
    block = np.abs(q[:3]).sum(axis=0) > 0
    assert block.sum() == 3
    assert np.all(q[3:, block] == 0) and np.all(q[:3, ~block] == 0)


def test_jacobi_failure_modes():
    with pytest.raises(NumericalFailure):
        sym_eig(np.array([[np.nan, 0.0], [0.0, 1.0]]))
    with pytest.raises(DimensionError):
        sym_eig_batch(np.zeros((65, 65)))
    with pytest.raises(DimensionError):
        sym_eig(np.zeros((2, 3, 3)))


def test_definiteness_helpers():
    assert not is_indefinite(np.eye(3))
    assert is_indefinite(np.diag([1.0, 0.0, 2.0]))
    assert min_eigenvalue(np.diag([2.0, -1.0])) == -1.0
    flags = is_indefinite(np.stack([np.eye(2), -np.eye(2)]))
    assert flags.tolist() == [False, True]


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(-1e3, 1e3)))
def test_jacobi_property(a):
    m = symmetrize_lower(a)
    lam, q = sym_eig(m)
    scale = max(1.0, np.abs(m).max())
    np.testing.assert_allclose(q.T @ q, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(q @ np.diag(lam) @ q.T, m, atol=1e-11 * scale)
    np.testing.assert_allclose(lam, np.linalg.eigvalsh(m), atol=1e-11 * scale)
