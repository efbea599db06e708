import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deformed_wigner.eigensolver import (
    ConvergenceError,
    Spectrum,
    eigenvalues_symmetric,
    tridiagonal_eigenvalues,
    tridiagonalize,
)
from deformed_wigner.ensembles import SymmetricMatrix, random_orthogonal_conjugation, sample_goe


def toeplitz(n):
    return np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)


def random_symmetric(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    return (a + a.T) / 2


def test_two_by_two():
    d, e = tridiagonalize([[0.0, 1.0], [1.0, 0.0]])
    assert np.array_equal(d, [0.0, 0.0])
    assert abs(e[0]) == 1.0
    assert np.allclose(eigenvalues_symmetric([[0.0, 1.0], [1.0, 0.0]]).values, [1.0, -1.0], rtol=0, atol=1e-15)


def test_tridiagonal_input_unchanged():
    t = np.diag([1.0, 2.0, 3.0, 4.0]) + np.diag([0.5, -0.25, 2.0], 1) + np.diag([0.5, -0.25, 2.0], -1)
    d, e = tridiagonalize(t)
    assert np.array_equal(d, np.diag(t))
    assert np.array_equal(np.abs(e), np.abs(np.diag(t, 1)))


def test_small_toeplitz():
    vals = eigenvalues_symmetric(toeplitz(3)).values
    assert np.allclose(vals, [np.sqrt(2), 0, -np.sqrt(2)], atol=1e-15)


def test_toeplitz_100():
    n = 100
    vals = eigenvalues_symmetric(toeplitz(n)).values
    exact = 2 * np.cos(np.arange(1, n + 1) * np.pi / (n + 1))
    assert np.max(np.abs(vals - exact)) < 1e-10


def test_trace_preserved_by_reduction():
    a = random_symmetric(5, 0)
    d, _ = tridiagonalize(a)
    assert d.sum() == pytest.approx(np.trace(a), abs=1e-14)


@pytest.mark.parametrize("n", [1, 2, 7, 64, 65, 130, 300])
def test_matches_reference(n):
    a = random_symmetric(n, n)
    ref = np.sort(np.linalg.eigvalsh(a))[::-1]
    vals = eigenvalues_symmetric(a).values
    assert np.max(np.abs(vals - ref)) < 1e-12 * max(1.0, np.abs(ref).max()) * n


def test_invariants_on_random_matrices():
    rng = np.random.default_rng(2024)
    n = 50
    for _ in range(100):
        a = rng.standard_normal((n, n))
        a = (a + a.T) / 2
        vals = eigenvalues_symmetric(a).values
        assert abs(vals.sum() - np.trace(a)) <= n * 1e-10 * np.abs(a).max()
        fro = np.sum(a * a)
        assert abs(np.dot(vals, vals) - fro) <= n * 1e-9 * fro


def test_orthogonal_invariance():
    m = sample_goe(50, 1.0, 77)
    c = random_orthogonal_conjugation(m, 78)
    assert np.allclose(eigenvalues_symmetric(m).values, eigenvalues_symmetric(c).values, atol=1e-9)


def test_accepts_packed_matrix():
    m = sample_goe(20, 1.0, 1)
    assert np.array_equal(eigenvalues_symmetric(m).values, eigenvalues_symmetric(m.to_dense()).values)


def test_repeated_eigenvalues_and_diagonal():
    vals = eigenvalues_symmetric(np.diag([3.0, 1.0, 3.0, -2.0])).values
    assert vals.tolist() == [3.0, 3.0, 1.0, -2.0]
    assert eigenvalues_symmetric(np.eye(5) * 2).values.tolist() == [2.0] * 5


def test_deterministic():
    a = random_symmetric(120, 5)
    assert np.array_equal(eigenvalues_symmetric(a).values, eigenvalues_symmetric(a).values)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        eigenvalues_symmetric([[1.0, np.nan], [np.nan, 1.0]])
    with pytest.raises(ValueError):
        eigenvalues_symmetric([[1.0, 2.0], [3.0, 1.0]])
    with pytest.raises(ValueError):
        eigenvalues_symmetric(np.ones((2, 3)))
    with pytest.raises(ValueError):
        tridiagonal_eigenvalues([1.0, np.inf], [0.0])


def test_convergence_error_is_arithmetic():
    assert issubclass(ConvergenceError, ArithmeticError)


def test_spectrum_type():
    s = Spectrum([3.0, 1.0, 1.0])
    assert len(s) == 3
    assert s.top(2).tolist() == [3.0, 1.0]
    with pytest.raises(ValueError):
        Spectrum([1.0, 2.0])
    with pytest.raises(ValueError):
        s.values[0] = 0.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)).map(lambda t: (t[0], t[0])),
              elements=st.floats(-100, 100)))
def test_property_against_reference(a):
    a = (a + a.T) / 2
    ref = np.sort(np.linalg.eigvalsh(a))[::-1]
    vals = eigenvalues_symmetric(a).values
    scale = max(1.0, np.abs(a).max())
    assert np.all(np.diff(vals) <= 0)
    assert np.max(np.abs(vals - ref)) < 1e-11 * scale * a.shape[0]


def test_tridiagonal_eigenvalues_direct():
    d = np.zeros(4)
    e = np.ones(3)
    vals = np.sort(tridiagonal_eigenvalues(d, e))
    exact = np.sort(2 * np.cos(np.arange(1, 5) * np.pi / 5))
    assert np.allclose(vals, exact, atol=1e-14)
    assert tridiagonal_eigenvalues([], []).size == 0


@pytest.mark.parametrize("c", [1.3e-246, 1e-150, 1e150, 3e250])
def test_extreme_scales(c):
    a = np.full((4, 4), c) + np.diag([c, 0.0, 0.0, 0.0])
    ref = np.sort(np.linalg.eigvalsh(a / c))[::-1] * c
    vals = eigenvalues_symmetric(a).values
    assert np.allclose(vals / c, ref / c, rtol=0, atol=1e-13)
