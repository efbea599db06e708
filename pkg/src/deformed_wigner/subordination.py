"""Limiting spectral law of ``W = R / sqrt(N) + S``.

The Stieltjes transform ``g`` of the limit law solves

    g(z) = g_nu0(z + sigma**2 g(z)),        Im z > 0,

and ``omega(z) = z + sigma**2 g(z)`` is the subordination function. On the
upper half-plane the equation has exactly one root with ``Im g > 0`` (it is the
fixed point of a strict self-map of the half-plane), so branch selection is
done by keeping every iterate in the half-plane.

Boundary values on the real line are reached by continuation in ``y``:
solutions along a decreasing ladder of ``y`` (each warm-started from the
previous one) are extrapolated to ``y = 0`` and then polished by Newton's
method on the real axis, where the equation has real coefficients.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .measures import (
    DensityPiece,
    DomainError,
    SpectralMeasure,
    moment,
    stieltjes_derivative,
    stieltjes_eval,
)

__all__ = [
    "SolverConfig",
    "LimitLaw",
    "ConvergenceError",
    "solve_g_mu0",
    "boundary_values",
    "density_from_transform",
    "support_edges",
    "solve_limit_law",
    "omega_eval",
    "omega_prime",
    "write_density_csv",
    "support_to_json",
]

log = logging.getLogger(__name__)

# continuation ladder in y used before the configured inversion heights
_LADDER = (1.0, 0.3, 0.1, 0.03)


class ConvergenceError(ArithmeticError):
    """Fixed-point iteration failed; ``residual`` holds the last residual (max norm)."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class SolverConfig:
    damping: float = 1.0
    tol: float = 1e-13
    max_iter: int = 10000
    inversion_ys: tuple = (1e-2, 5e-3, 2.5e-3)
    support_eps: float = 1e-4
    min_damping: float = 2.0**-30

    def __post_init__(self):
        object.__setattr__(self, "inversion_ys", tuple(float(y) for y in self.inversion_ys))
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.tol <= 0 or self.support_eps <= 0 or self.min_damping <= 0:
            raise ValueError("tolerances must be positive")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ValueError("max_iter must be a positive integer")
        ys = np.asarray(self.inversion_ys)
        if ys.size < 1 or np.any(ys <= 0) or np.any(np.diff(ys) >= 0):
            raise ValueError("inversion_ys must be positive and strictly decreasing")

    def to_dict(self) -> dict:
        return {
            "damping": self.damping,
            "tol": self.tol,
            "max_iter": int(self.max_iter),
            "inversion_ys": list(self.inversion_ys),
            "support_eps": self.support_eps,
        }


def _g_nu0(nu0: SpectralMeasure, w: np.ndarray) -> np.ndarray:
    # real w on supp nu0 only happens transiently during real-axis Newton
    bad = (w.imag == 0) & nu0.contains(w.real)
    if np.any(bad):
        w = np.where(bad, w + 1e-12j * (1 + np.abs(w)), w)
    return np.asarray(stieltjes_eval(nu0, w))


def _dg_nu0(nu0: SpectralMeasure, w: np.ndarray) -> np.ndarray:
    bad = (w.imag == 0) & nu0.contains(w.real)
    if np.any(bad):
        w = np.where(bad, w + 1e-12j * (1 + np.abs(w)), w)
    return np.asarray(stieltjes_derivative(nu0, w))


def _rounding_floor(nu0: SpectralMeasure) -> float:
    # g_nu0 is a sum of this many terms; its rounding error bounds the reachable residual
    terms = nu0.n_atoms + sum(p.grid.size - 1 for p in nu0.pieces)
    return 4.0 * np.finfo(float).eps * terms


def _solve_upper(nu0, s2, z, g, cfg: SolverConfig):
    """Vectorized root finding in the upper half-plane.

    Each step tries a Newton update and keeps it only if it stays in the upper
    half-plane and lowers the residual; otherwise a damped Picard step
    ``g <- (1 - d) g + d g_nu0(z + s2 g)`` is taken, halving ``d`` until the
    iterate has ``Im g > 0``.
    """
    g = g.astype(complex).copy()
    gn = _g_nu0(nu0, z + s2 * g)
    res = np.abs(g - gn)
    damping = np.full(z.shape, cfg.damping)
    tol = max(cfg.tol, _rounding_floor(nu0))
    for _ in range(cfg.max_iter):
        act = np.flatnonzero(res >= tol)
        if act.size == 0:
            return g, res
        za, ga, gna, ra = z[act], g[act], gn[act], res[act]
        fp = 1.0 - s2 * _dg_nu0(nu0, za + s2 * ga)
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = ga - (ga - gna) / fp
        ok = np.isfinite(cand) & (cand.imag > 0)
        cand = np.where(ok, cand, ga)
        gnc = _g_nu0(nu0, za + s2 * cand)
        rc = np.abs(cand - gnc)
        accept = ok & (rc < ra)
        new_g = np.where(accept, cand, ga)
        new_gn = np.where(accept, gnc, gna)
        new_r = np.where(accept, rc, ra)
        rej = np.flatnonzero(~accept)
        if rej.size:
            d = damping[act[rej]]
            pic = (1.0 - d) * ga[rej] + d * gna[rej]
            low = pic.imag <= 0
            while np.any(low):
                d = np.where(low, d / 2.0, d)
                if np.any(d < cfg.min_damping):
                    raise ConvergenceError("iterate left the upper half-plane", float(np.max(ra)))
                pic = (1.0 - d) * ga[rej] + d * gna[rej]
                low = pic.imag <= 0
            damping[act[rej]] = d
            gp = _g_nu0(nu0, za[rej] + s2 * pic)
            new_g[rej], new_gn[rej], new_r[rej] = pic, gp, np.abs(pic - gp)
        g[act], gn[act], res[act] = new_g, new_gn, new_r
    raise ConvergenceError(
        f"fixed point not reached after {cfg.max_iter} iterations", float(np.max(res))
    )


def solve_g_mu0(nu0: SpectralMeasure, sigma: float, z, cfg: SolverConfig | None = None, g0=None):
    """Stieltjes transform of the limit law at ``z`` (``Im z != 0``).

    Scalar or array ``z``. Points with ``Im z < 0`` use ``g(conj z) = conj g(z)``.
    The returned value satisfies ``|g - g_nu0(z + sigma**2 g)| < cfg.tol``, with
    the tolerance raised to the rounding floor of ``g_nu0`` when ``nu0`` has many
    terms (``4 eps`` per atom or density segment).
    ``g0`` is an optional warm start (default ``-1/z``).
    """
    cfg = cfg or SolverConfig()
    z = np.asarray(z, dtype=complex)
    scalar = z.ndim == 0
    zf = z.ravel()
    if np.any(zf.imag == 0):
        raise DomainError("solve_g_mu0 needs Im z != 0; use boundary_values on the real line")
    lower = zf.imag < 0
    zu = np.where(lower, zf.conj(), zf)
    if g0 is None:
        start = -1.0 / zu
    else:
        start = np.broadcast_to(np.asarray(g0, dtype=complex), z.shape).ravel()
        start = np.where(lower, start.conj(), start)
        start = np.where(start.imag > 0, start, -1.0 / zu)
    g, _ = _solve_upper(nu0, sigma**2, zu, start, cfg)
    g = np.where(lower, g.conj(), g).reshape(z.shape)
    return complex(g) if scalar else g


def _extrapolate(ys, vals):
    """Polynomial (Neville) extrapolation to ``y = 0`` through all given heights."""
    ys = np.asarray(ys, dtype=float)
    out = np.zeros_like(vals[0])
    for i, yi in enumerate(ys):
        w = 1.0
        for j, yj in enumerate(ys):
            if j != i:
                w *= yj / (yj - yi)
        out = out + w * vals[i]
    return out


def _newton_real_axis(nu0, s2, x, g, max_iter=60, tol=1e-14):
    """Newton on the real line with residual backtracking; returns (g, converged)."""
    z = x.astype(complex)
    g = g.astype(complex).copy()
    f = g - _g_nu0(nu0, z + s2 * g)
    res = np.abs(f)
    conv = res < tol * (1 + np.abs(g))
    for _ in range(max_iter):
        act = np.flatnonzero(~conv)
        if act.size == 0:
            break
        za, ga, fa, ra = z[act], g[act], f[act], res[act]
        fp = 1.0 - s2 * _dg_nu0(nu0, za + s2 * ga)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = fa / fp
        step = np.where(np.isfinite(step), step, 0.0)
        t = np.ones(act.size)
        best_g, best_f, best_r = ga, fa, ra
        improved = np.zeros(act.size, dtype=bool)
        for _ in range(8):
            cand = ga - t * step
            fc = cand - _g_nu0(nu0, za + s2 * cand)
            rc = np.abs(fc)
            take = ~improved & (rc < ra)
            best_g = np.where(take, cand, best_g)
            best_f = np.where(take, fc, best_f)
            best_r = np.where(take, rc, best_r)
            improved |= take
            if improved.all():
                break
            t = np.where(improved, t, t / 2)
        g[act], f[act], res[act] = best_g, best_f, best_r
        tight = best_r < tol * (1 + np.abs(best_g))
        # a point that can no longer improve is as converged as it will get
        stalled = ~improved & (best_r < 1e-10 * (1 + np.abs(best_g)))
        conv[act] = tight | stalled
        if not improved.any() and not tight.any():
            break
    return g, conv


def boundary_values(nu0: SpectralMeasure, sigma: float, x, cfg: SolverConfig | None = None):
    """Boundary values ``g(x + i0)`` on the real line.

    Returns ``(g, converged, g_extrapolated)``. ``g`` has ``Im g >= 0``; it is the
    Newton-polished root when ``converged`` and the extrapolated value otherwise.
    """
    cfg = cfg or SolverConfig()
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s2 = sigma**2
    ladder = [y for y in _LADDER if y > cfg.inversion_ys[0]] + list(cfg.inversion_ys)
    g = None
    sols = []
    for y in ladder:
        g = solve_g_mu0(nu0, sigma, x + 1j * y, cfg, g0=g)
        sols.append(g)
    k = len(cfg.inversion_ys)
    g_ext = _extrapolate(cfg.inversion_ys, sols[-k:])
    # keep a strictly complex start so Newton can leave the real line
    start = g_ext.real + 1j * np.maximum(g_ext.imag, 1e-8)
    g_pol, conv = _newton_real_axis(nu0, s2, x, start)
    g_pol = np.where(g_pol.imag < 0, g_pol.conj(), g_pol)
    g_ext = g_ext.real + 1j * np.maximum(g_ext.imag, 0.0)
    return np.where(conv, g_pol, g_ext), conv, g_ext


def _check_grid_covers(nu0: SpectralMeasure, sigma: float, grid: np.ndarray):
    lo, hi = nu0.support_hull()
    if grid[0] > lo - 2.0 * sigma or grid[-1] < hi + 2.0 * sigma:
        raise ValueError(
            f"grid [{grid[0]:.4g}, {grid[-1]:.4g}] does not cover "
            f"[{lo - 2 * sigma:.4g}, {hi + 2 * sigma:.4g}], which contains supp mu0"
        )


def _density_values(nu0, sigma, x, cfg):
    g, conv, g_ext = boundary_values(nu0, sigma, x, cfg)
    rho = g.imag / np.pi
    rho_ext = g_ext.imag / np.pi
    neg = rho_ext < -1e-6
    if np.any(neg & ~conv):
        log.warning("%d extrapolated density values below -1e-6 were zeroed", int(np.sum(neg & ~conv)))
    return np.maximum(rho, 0.0)


def density_from_transform(
    nu0: SpectralMeasure, sigma: float, grid, cfg: SolverConfig | None = None
) -> SpectralMeasure:
    """Density of the limit law on ``grid`` by Stieltjes inversion.

    ``rho(x) = lim_{y -> 0+} Im g(x + iy) / pi``: the limit is extrapolated from
    ``cfg.inversion_ys`` and refined by Newton on the real axis. Negative values
    are zeroed. The result is renormalized when its mass is within 1e-3 of one;
    a larger deviation means the grid is too coarse and raises ``ValueError``.
    """
    cfg = cfg or SolverConfig()
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 3 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing with at least 3 points")
    _check_grid_covers(nu0, sigma, grid)
    rho = _density_values(nu0, sigma, grid, cfg)
    piece = DensityPiece(grid, rho)
    mass = piece.mass()
    if abs(mass - 1.0) > 1e-3:
        raise ValueError(f"recovered density has mass {mass:.6f}; refine the grid")
    return SpectralMeasure(pieces=(DensityPiece(grid, rho / mass),))


def support_edges(
    density: SpectralMeasure,
    nu0: SpectralMeasure,
    sigma: float,
    cfg: SolverConfig | None = None,
    tol: float = 1e-6,
) -> list[tuple[float, float]]:
    """Maximal intervals where the density exceeds ``cfg.support_eps``.

    Candidate intervals are read off the grid of ``density``; each endpoint is
    then refined by bisection (to ``tol``) on the pointwise density.
    """
    cfg = cfg or SolverConfig()
    if len(density.pieces) != 1:
        raise ValueError("expected a single-piece grid density")
    grid, rho = density.pieces[0].grid, density.pieces[0].values
    above = rho > cfg.support_eps
    if not above.any():
        raise ValueError("density never exceeds the support threshold")
    idx = np.flatnonzero(np.diff(above.astype(int)))
    starts = list(idx[~above[idx]] + 1)
    ends = list(idx[above[idx]])
    if above[0]:
        starts.insert(0, 0)
    if above[-1]:
        ends.append(grid.size - 1)

    def inside(x):
        return _density_values(nu0, sigma, np.array([x]), cfg)[0] > cfg.support_eps

    def bisect(a, b, a_inside):
        # a and b bracket the edge; a_inside tells which side is in the support
        while b - a > tol:
            mid = 0.5 * (a + b)
            if inside(mid) == a_inside:
                a = mid
            else:
                b = mid
        return 0.5 * (a + b)

    out = []
    for s, e in zip(starts, ends):
        lo = grid[s] if s == 0 else bisect(grid[s - 1], grid[s], False)
        hi = grid[e] if e == grid.size - 1 else bisect(grid[e], grid[e + 1], True)
        out.append((float(lo), float(hi)))
    return out


@dataclass(frozen=True)
class LimitLaw:
    """Limit spectral law: bulk law, noise level, density and support."""

    nu0: SpectralMeasure
    sigma: float
    mu0_density: SpectralMeasure
    support: tuple
    cfg: SolverConfig = field(default_factory=SolverConfig)

    @property
    def upper_edge(self) -> float:
        return self.support[-1][1]

    @property
    def lower_edge(self) -> float:
        return self.support[0][0]

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape, dtype=bool)
        for lo, hi in self.support:
            out |= (x >= lo) & (x <= hi)
        return out

    def distance_to_support(self, x: float) -> float:
        return min(max(lo - x, x - hi, 0.0) for lo, hi in self.support)


def _clustered_nodes(lo: float, hi: float, n: int) -> np.ndarray:
    theta = np.linspace(np.pi, 0.0, n)
    x = lo + (hi - lo) * (1.0 + np.cos(theta)) / 2.0
    x[0], x[-1] = lo, hi
    return x


def solve_limit_law(
    nu0: SpectralMeasure,
    sigma: float,
    cfg: SolverConfig | None = None,
    coarse_points: int = 1201,
    nodes_per_interval: int = 1501,
) -> LimitLaw:
    """Solve for the limit law and package density and support.

    A uniform coarse grid over ``[min supp nu0 - 3 sigma, max supp nu0 + 3 sigma]``
    locates the support; the final density lives on a grid clustered towards
    each support edge, with zero density at the edges.
    """
    cfg = cfg or SolverConfig()
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    nu0.check_probability()
    lo, hi = nu0.support_hull()
    coarse = np.linspace(lo - 3 * sigma, hi + 3 * sigma, coarse_points)
    dens = density_from_transform(nu0, sigma, coarse, cfg)
    support = support_edges(dens, nu0, sigma, cfg)
    pieces = []
    for a, b in support:
        x = _clustered_nodes(a, b, nodes_per_interval)
        rho = np.zeros(x.size)
        rho[1:-1] = _density_values(nu0, sigma, x[1:-1], cfg)
        pieces.append(DensityPiece(x, rho))
    mass = sum(p.mass() for p in pieces)
    if abs(mass - 1.0) > 1e-3:
        raise ValueError(f"limit density has mass {mass:.6f}")
    pieces = tuple(DensityPiece(p.grid, p.values / mass) for p in pieces)
    mu0 = SpectralMeasure(pieces=pieces)
    m2 = moment(mu0, 2)
    expected = sigma**2 + moment(nu0, 2)
    if abs(m2 - expected) > 1e-3:
        raise ValueError(f"second moment {m2:.6f} differs from sigma^2 + m2(nu0) = {expected:.6f}")
    return LimitLaw(nu0, float(sigma), mu0, tuple(support), cfg)


def _phi_prime(nu0, s2, w):
    return 1.0 - s2 * np.real(stieltjes_derivative(nu0, w))


def omega_eval(law: LimitLaw, z):
    """Subordination function ``omega(z) = z + sigma**2 g(z)``.

    Complex ``z`` (``Im z != 0``) returns complex values. Real ``z`` must lie off
    the support and returns the real boundary value; the root is checked to be
    on the branch where ``Phi' (omega) > 0``.
    """
    z = np.asarray(z)
    s2 = law.sigma**2
    if np.iscomplexobj(z) and np.all(z.imag != 0):
        return z + s2 * solve_g_mu0(law.nu0, law.sigma, z, law.cfg)
    if np.iscomplexobj(z):
        if np.any(z.imag != 0):
            raise ValueError("mix of real and complex arguments")
        z = z.real
    x = np.asarray(z, dtype=float)
    scalar = x.ndim == 0
    xf = np.atleast_1d(x)
    if np.any(law.contains(xf)):
        raise DomainError("real argument lies in the support of the limit law")
    g, conv, _ = boundary_values(law.nu0, law.sigma, xf, law.cfg)
    if not conv.all() or np.any(np.abs(g.imag) > 1e-9):
        raise ConvergenceError("no real boundary value found off the support")
    w = xf + s2 * g.real
    if np.any(_phi_prime(law.nu0, s2, w) <= 0):
        raise ConvergenceError("boundary value landed on the wrong branch")
    return float(w[0]) if scalar else w.reshape(x.shape)


def omega_prime(law: LimitLaw, x: float, step: float = 1e-5, check_tol: float = 1e-4) -> float:
    """``omega'(x) = 1 + sigma**2 integral dmu0(t) / (t - x)**2`` off the support.

    The quadrature over the stored density is cross-checked against a central
    difference of :func:`omega_eval`; a disagreement above ``check_tol``
    (relative to ``max(1, omega')``) raises ``ConvergenceError``.
    """
    x = float(x)
    margin = law.distance_to_support(x)
    if margin < 1e-6:
        raise DomainError("omega_prime needs a margin of at least 1e-6 from the support")
    quad = 1.0 + law.sigma**2 * float(np.real(stieltjes_derivative(law.mu0_density, x)))
    h = min(step, margin / 4)
    fd = (omega_eval(law, x + h) - omega_eval(law, x - h)) / (2 * h)
    if abs(quad - fd) > check_tol * max(1.0, abs(fd)):
        raise ConvergenceError(
            f"omega' quadrature {quad:.8g} disagrees with finite difference {fd:.8g}"
        )
    return quad


def write_density_csv(density: SpectralMeasure, path) -> None:
    """CSV with header ``x,rho`` (one row per grid node of every piece)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "rho"])
        for p in density.pieces:
            for x, r in zip(p.grid, p.values):
                w.writerow([repr(float(x)), repr(float(r))])


def support_to_json(support) -> str:
    return json.dumps({"support": [[float(a), float(b)] for a, b in support]})
