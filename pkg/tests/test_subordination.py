import cmath
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformed_wigner.eigensolver import eigenvalues_symmetric
from deformed_wigner.ensembles import EnsembleSpec, RankRule, sample_deformed
from deformed_wigner.measures import (
    DomainError,
    atomic,
    moment,
    point_mass,
    semicircle,
    signed_mass_on,
    stieltjes_eval,
    uniform,
)
from deformed_wigner.outlier_theory import limit_law_cached
from deformed_wigner.subordination import (
    ConvergenceError,
    SolverConfig,
    boundary_values,
    density_from_transform,
    omega_eval,
    omega_prime,
    solve_g_mu0,
    support_to_json,
    write_density_csv,
)

DELTA = point_mass(0.0)
TWO_ATOMS = atomic([-1.0, 1.0])


def g_semicircle(z, sigma=1.0):
    # closed form; on the real axis off the support take the root with |g| < 1/sigma
    r = cmath.sqrt(z * z - 4 * sigma**2)
    g = (-z + r) / (2 * sigma**2)
    if (z.imag > 0 and g.imag < 0) or (z.imag == 0 and abs(g) > 1 / sigma):
        g = (-z - r) / (2 * sigma**2)
    return g


def g_two_atoms(z):
    # g = w / (1 - w**2) with w = z + g reduces to g (z + g)**2 + z = 0
    coeffs = [1.0, 2 * z, z * z, z]
    roots = np.roots(coeffs)
    upper = [r for r in roots if r.imag > 0]
    assert len(upper) == 1
    return upper[0]


@pytest.fixture(scope="module")
def law_delta():
    return limit_law_cached(DELTA, 1.0)


@pytest.fixture(scope="module")
def law_uniform():
    return limit_law_cached(uniform(-1, 1), 1.0)


@pytest.fixture(scope="module")
def law_two_atoms():
    return limit_law_cached(TWO_ATOMS, 1.0)


# -- solve_g_mu0 ---------------------------------------------------------------------

def test_semicircle_examples():
    g, conv, _ = boundary_values(DELTA, 1.0, np.array([3.0]))
    assert conv[0] and abs(g[0] - (-0.381966)) < 1e-6
    assert abs(solve_g_mu0(DELTA, 1.0, 3.0 + 1e-14j) - (-0.3819660112501051)) < 1e-8
    assert abs(solve_g_mu0(DELTA, 1.0, 1j) - 0.6180339887498949j) < 1e-8


@pytest.mark.parametrize("nu0", [DELTA, uniform(-1, 1), TWO_ATOMS, atomic([0.0, 5.0], [0.3, 0.7])])
def test_large_z(nu0):
    z = 100j
    assert abs(solve_g_mu0(nu0, 1.0, z) + 1 / z) < 2e-3


def test_semicircle_grid():
    xs = np.linspace(-5, 5, 100)
    for y in (1.0, 0.1, 0.01):
        z = xs + 1j * y
        g = solve_g_mu0(DELTA, 1.0, z)
        exact = np.array([g_semicircle(complex(v)) for v in z])
        assert np.max(np.abs(g - exact)) < 1e-8


@pytest.mark.parametrize("sigma", [0.5, 2.0])
def test_semicircle_scaling(sigma):
    z = np.array([0.3 + 0.2j, -1.5 + 0.05j, 4 + 1j])
    exact = np.array([g_semicircle(complex(v), sigma) for v in z])
    assert np.max(np.abs(solve_g_mu0(DELTA, sigma, z) - exact)) < 1e-8


@pytest.mark.parametrize("z", [0.5 + 0.5j, 1.0 + 0.01j, -2.5 + 0.1j, 0.01 + 0.001j, 3 + 2j])
def test_two_atom_cubic_oracle(z):
    assert abs(solve_g_mu0(TWO_ATOMS, 1.0, z) - g_two_atoms(z)) < 1e-10


def test_residual_on_complex_grid():
    nu0 = uniform(-1, 1)
    rng = np.random.default_rng(0)
    z = rng.uniform(-4, 4, 100) + 1j * 10 ** rng.uniform(-3, 1, 100)
    g = solve_g_mu0(nu0, 1.0, z)
    res = np.abs(g - stieltjes_eval(nu0, z + g))
    assert res.max() < 1e-13
    assert np.all(g.imag > 0)


@settings(max_examples=40, deadline=None)
@given(x=st.floats(-6, 6), logy=st.floats(-3, 1), sigma=st.floats(0.2, 3))
def test_herglotz(x, logy, sigma):
    g = solve_g_mu0(TWO_ATOMS, sigma, complex(x, 10**logy))
    assert g.imag > 0


def test_lower_half_plane_by_conjugation():
    z = 0.4 + 0.3j
    assert solve_g_mu0(DELTA, 1.0, z.conjugate()) == pytest.approx(np.conj(solve_g_mu0(DELTA, 1.0, z)))


def test_real_argument_rejected():
    with pytest.raises(DomainError):
        solve_g_mu0(DELTA, 1.0, 0.5)


def test_iteration_cap_reports_residual():
    with pytest.raises(ConvergenceError) as info:
        solve_g_mu0(DELTA, 1.0, 0.1 + 1e-3j, SolverConfig(max_iter=1))
    assert np.isfinite(info.value.residual)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(damping=0.0)
    with pytest.raises(ValueError):
        SolverConfig(inversion_ys=(1e-3, 1e-2))
    with pytest.raises(ValueError):
        SolverConfig(tol=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(max_iter=0)
    assert SolverConfig().to_dict()["inversion_ys"] == [1e-2, 5e-3, 2.5e-3]


def test_damped_iteration_reaches_same_root():
    z = 0.7 + 0.05j
    assert abs(solve_g_mu0(DELTA, 1.0, z, SolverConfig(damping=0.5)) - g_semicircle(z)) < 1e-8


# -- density and support -----------------------------------------------------------------

def test_density_examples():
    grid = np.linspace(-3, 3, 601)
    dens = density_from_transform(DELTA, 1.0, grid)
    assert dens.density(0.0) == pytest.approx(1 / np.pi, abs=1e-3)
    assert dens.density(2.5) == pytest.approx(0.0, abs=1e-4)
    assert dens.density(-2.5) == pytest.approx(0.0, abs=1e-4)
    exact = np.sqrt(np.clip(4 - grid**2, 0, None)) / (2 * np.pi)
    assert np.max(np.abs(dens.density(grid) - exact)) < 1e-3


def test_density_sigma_two_mass():
    grid = np.linspace(-6, 6, 801)
    dens = density_from_transform(DELTA, 2.0, grid)
    assert signed_mass_on(dens, -4, 4) == pytest.approx(1.0, abs=1e-3)


def test_density_grid_checks():
    with pytest.raises(ValueError, match="cover"):
        density_from_transform(DELTA, 1.0, np.linspace(-1, 1, 50))
    with pytest.raises(ValueError, match="mass"):
        density_from_transform(DELTA, 1.0, np.linspace(-5, 5, 4))


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
def test_semicircle_support_and_center(sigma):
    law = limit_law_cached(DELTA, sigma)
    assert len(law.support) == 1
    lo, hi = law.support[0]
    assert lo == pytest.approx(-2 * sigma, abs=1e-3)
    assert hi == pytest.approx(2 * sigma, abs=1e-3)
    assert law.mu0_density.density(0.0) == pytest.approx(1 / (np.pi * sigma), abs=1e-3)


def test_two_separated_bulks():
    law = limit_law_cached(atomic([-3.0, 3.0]), 0.1)
    assert len(law.support) == 2
    (a, b), (c, d) = law.support
    assert b < 0 < c
    assert a == pytest.approx(-d, abs=1e-5) and b == pytest.approx(-c, abs=1e-5)
    # semicircle radius 2 sigma_eff with sigma_eff**2 = sigma**2 / 2 at leading order
    assert d - 3.0 == pytest.approx(2 * 0.1 / np.sqrt(2), abs=0.01)
    spec = EnsembleSpec(1000, 0.1, atomic([-3.0, 3.0]), None, RankRule("constant", 0))
    lam = eigenvalues_symmetric(sample_deformed(spec, 17)[1]).values
    assert np.sum(lam > 0) == 500
    assert np.all(((lam > a - 0.05) & (lam < b + 0.05)) | ((lam > c - 0.05) & (lam < d + 0.05)))


@pytest.mark.parametrize("nu0", [DELTA, uniform(-1, 1), TWO_ATOMS])
def test_limit_law_invariants(nu0):
    law = limit_law_cached(nu0, 1.0)
    mu0 = law.mu0_density
    assert mu0.total_mass() == pytest.approx(1.0, abs=1e-6)
    assert all(np.all(p.values >= 0) for p in mu0.pieces)
    assert moment(mu0, 2) == pytest.approx(1.0 + moment(nu0, 2), abs=1e-3)


@pytest.mark.slow
def test_free_convolution_of_semicircles():
    # semicircle bulk plus semicircular noise is a semicircle of variance 2
    law = limit_law_cached(semicircle(1.0), 1.0)
    assert law.upper_edge == pytest.approx(2 * np.sqrt(2), abs=1e-3)
    assert law.mu0_density.density(0.0) == pytest.approx(1 / (np.pi * np.sqrt(2)), abs=1e-3)


def test_boundary_values_off_support():
    g, conv, _ = boundary_values(DELTA, 1.0, np.array([3.0, -2.5]))
    assert conv.all()
    assert np.allclose(g, [g_semicircle(3.0 + 0j), g_semicircle(-2.5 + 0j)], atol=1e-12)


# -- omega ------------------------------------------------------------------------------

def test_omega_examples(law_delta):
    assert omega_eval(law_delta, 2.5) == pytest.approx(2.0, abs=1e-6)
    assert abs(omega_eval(law_delta, 1j) - 1.6180339887j) < 1e-6


def test_omega_upper_half_plane(law_uniform):
    z = np.array([3.0, -3.0, 0.0, 1.0]) + 1j * np.array([1e-3, 0.1, 1.0, 1e-2])
    assert np.all(omega_eval(law_uniform, z).imag > 0)


def test_omega_rejects_support(law_delta):
    with pytest.raises(DomainError):
        omega_eval(law_delta, 1.0)


def test_omega_prime_examples(law_delta):
    assert omega_prime(law_delta, 2.5) == pytest.approx(4 / 3, abs=1e-4)
    assert omega_prime(law_delta, 100.0) == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("x", [-5.0, -3.0, 2.4, 3.0, 8.0])
def test_omega_increasing(law_uniform, x):
    assert omega_prime(law_uniform, x) > 1.0


def test_omega_prime_margin(law_delta):
    with pytest.raises(DomainError):
        omega_prime(law_delta, law_delta.upper_edge + 1e-8)


def test_imaginary_part_of_omega_off_support(law_delta):
    ys = np.array([1e-2, 1e-3, 1e-4])
    excess = np.array([omega_eval(law_delta, 3.0 + 1j * y).imag - y for y in ys])
    assert np.all(excess > 0)
    assert np.all(excess <= np.sqrt(ys))
    ratio = excess / ys
    # Im omega - y = sigma**2 Im g, linear in y off the support
    assert np.ptp(ratio) < 1e-2 * ratio.mean()


# -- emission ------------------------------------------------------------------------------

def test_csv_and_json(tmp_path, law_delta):
    path = tmp_path / "rho.csv"
    write_density_csv(law_delta.mu0_density, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x,rho"
    x, rho = np.loadtxt(path, delimiter=",", skiprows=1, unpack=True)
    assert np.interp(0.0, x, rho) == pytest.approx(1 / np.pi, abs=1e-3)
    doc = json.loads(support_to_json(law_delta.support))
    assert doc["support"][0][1] == pytest.approx(2.0, abs=1e-3)
