"""Finite signed measures on the real line.

A :class:`SpectralMeasure` is a finite sum of weighted atoms plus any number
of piecewise-linear density pieces. Each piece lives on an explicit strictly
increasing grid and is zero outside ``[grid[0], grid[-1]]``; nonzero end
values therefore encode jumps (e.g. a uniform law).

Interval convention: every interval is closed. An atom sitting exactly at an
endpoint belongs to the interval, and ``cdf(x)`` is the mass of ``(-inf, x]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DensityPiece",
    "SpectralMeasure",
    "DomainError",
    "point_mass",
    "atomic",
    "uniform",
    "semicircle",
    "grid_density",
    "empirical",
    "stieltjes_eval",
    "stieltjes_derivative",
    "moment",
    "signed_mass_on",
    "pushforward",
    "kolmogorov_distance",
    "KOLMOGOROV_GRID_SIZE",
    "to_dict",
    "from_dict",
    "to_json",
    "from_json",
]

KOLMOGOROV_GRID_SIZE = 2048

# z-chunk size for vectorized Stieltjes sums (bounds the (len z, segments) temporaries)
_CHUNK = 256


class DomainError(ValueError):
    """Raised when a transform is evaluated on the support of its measure."""


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DensityPiece:
    """Piecewise-linear density on ``grid`` (zero outside the grid range)."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = _frozen(self.grid)
        values = _frozen(self.values)
        if grid.ndim != 1 or grid.shape != values.shape:
            raise ValueError("grid and values must be 1-d arrays of equal length")
        if grid.size < 2:
            raise ValueError("a density piece needs at least two grid nodes")
        if not (np.all(np.isfinite(grid)) and np.all(np.isfinite(values))):
            raise ValueError("density grid and values must be finite")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("density grid must be strictly increasing")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def lo(self) -> float:
        return float(self.grid[0])

    @property
    def hi(self) -> float:
        return float(self.grid[-1])

    def mass(self) -> float:
        return float(np.sum(np.diff(self.grid) * (self.values[1:] + self.values[:-1])) / 2)

    def __call__(self, x):
        """Evaluate the density (zero outside the grid range)."""
        return np.interp(x, self.grid, self.values, left=0.0, right=0.0)

    def cdf(self, x) -> np.ndarray:
        """Mass of ``(-inf, x]`` carried by this piece (exact for the linear interpolant)."""
        x = np.asarray(x, dtype=float)
        g, v = self.grid, self.values
        cum = np.concatenate([[0.0], np.cumsum(np.diff(g) * (v[1:] + v[:-1]) / 2)])
        xc = np.clip(x, g[0], g[-1])
        idx = np.clip(np.searchsorted(g, xc, side="right") - 1, 0, g.size - 2)
        t0 = g[idx]
        rho_x = np.interp(xc, g, v)
        return cum[idx] + (xc - t0) * (v[idx] + rho_x) / 2


@dataclass(frozen=True)
class SpectralMeasure:
    """Atoms plus piecewise-linear density pieces; weights may be negative.

    Parameters
    ----------
    locations, weights : array_like
        Atom positions and (signed) masses.
    pieces : tuple of DensityPiece
        Density components; they may overlap, in which case they add up.
    total_mass_hint : float, optional
        Expected signed total mass, checked at construction to 1e-9.
    """

    locations: np.ndarray = field(default_factory=lambda: np.empty(0))
    weights: np.ndarray = field(default_factory=lambda: np.empty(0))
    pieces: tuple = ()
    total_mass_hint: float | None = None

    def __post_init__(self):
        loc = _frozen(np.atleast_1d(self.locations))
        w = _frozen(np.atleast_1d(self.weights))
        if loc.shape != w.shape or loc.ndim != 1:
            raise ValueError("atom locations and weights must have the same 1-d shape")
        if not (np.all(np.isfinite(loc)) and np.all(np.isfinite(w))):
            raise ValueError("atoms must be finite")
        order = np.argsort(loc, kind="stable")
        object.__setattr__(self, "locations", _frozen(loc[order]))
        object.__setattr__(self, "weights", _frozen(w[order]))
        object.__setattr__(self, "pieces", tuple(self.pieces))
        for p in self.pieces:
            if not isinstance(p, DensityPiece):
                raise TypeError("pieces must be DensityPiece instances")
        if self.total_mass_hint is not None:
            if abs(self.total_mass() - self.total_mass_hint) > 1e-9:
                raise ValueError(
                    f"total mass {self.total_mass():.12g} differs from the expected "
                    f"{self.total_mass_hint:.12g}"
                )

    # -- basic queries -------------------------------------------------------
    @property
    def n_atoms(self) -> int:
        return int(self.locations.size)

    def total_mass(self) -> float:
        return float(np.sum(self.weights)) + sum(p.mass() for p in self.pieces)

    def support_hull(self) -> tuple[float, float]:
        """Smallest closed interval containing every atom and density piece."""
        los = [p.lo for p in self.pieces]
        his = [p.hi for p in self.pieces]
        nz = self.locations[self.weights != 0]
        if nz.size:
            los.append(float(nz[0]))
            his.append(float(nz[-1]))
        if not los:
            raise ValueError("measure is zero")
        return min(los), max(his)

    def support_intervals(self) -> list[tuple[float, float]]:
        """Disjoint closed intervals covering the support (atoms are degenerate intervals)."""
        parts = [(p.lo, p.hi) for p in self.pieces]
        parts += [(float(t), float(t)) for t, w in zip(self.locations, self.weights) if w != 0]
        parts.sort()
        merged: list[list[float]] = []
        for lo, hi in parts:
            if merged and lo <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], hi)
            else:
                merged.append([lo, hi])
        return [(a, b) for a, b in merged]

    def contains(self, x) -> np.ndarray:
        """Elementwise test: is real ``x`` on the (closed) support?"""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape, dtype=bool)
        for lo, hi in self.support_intervals():
            out |= (x >= lo) & (x <= hi)
        return out

    def is_atomic(self) -> bool:
        return not self.pieces

    def is_positive(self) -> bool:
        return bool(np.all(self.weights >= 0) and all(np.all(p.values >= 0) for p in self.pieces))

    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for p in self.pieces:
            out = out + p(x)
        return out

    def cdf(self, x) -> np.ndarray:
        """Signed mass of ``(-inf, x]``."""
        x = np.asarray(x, dtype=float)
        cw = np.concatenate([[0.0], np.cumsum(self.weights)])
        out = cw[np.searchsorted(self.locations, x, side="right")]
        for p in self.pieces:
            out = out + p.cdf(x)
        return out

    def check_probability(self, tol: float = 1e-9) -> None:
        if not self.is_positive():
            raise ValueError("probability measure has negative weight or density")
        if abs(self.total_mass() - 1.0) > tol:
            raise ValueError(f"probability measure has mass {self.total_mass():.12g}")

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other: "SpectralMeasure") -> "SpectralMeasure":
        if not isinstance(other, SpectralMeasure):
            return NotImplemented
        return SpectralMeasure(
            np.concatenate([self.locations, other.locations]),
            np.concatenate([self.weights, other.weights]),
            self.pieces + other.pieces,
        )

    def __rmul__(self, c: float) -> "SpectralMeasure":
        c = float(c)
        return SpectralMeasure(
            self.locations,
            c * self.weights,
            tuple(DensityPiece(p.grid, c * p.values) for p in self.pieces),
        )

    def __neg__(self) -> "SpectralMeasure":
        return -1.0 * self

    def __sub__(self, other: "SpectralMeasure") -> "SpectralMeasure":
        return self + (-other)


# -- constructors ------------------------------------------------------------
def point_mass(t: float, weight: float = 1.0) -> SpectralMeasure:
    return SpectralMeasure([t], [weight])


def atomic(locations: Sequence[float], weights: Sequence[float] | None = None) -> SpectralMeasure:
    """Atoms with the given weights (equal weights summing to one by default)."""
    locations = np.asarray(locations, dtype=float)
    if weights is None:
        weights = np.full(locations.size, 1.0 / locations.size)
    return SpectralMeasure(locations, weights)


def empirical(eigenvalues) -> SpectralMeasure:
    """Normalized counting measure of a finite list of eigenvalues."""
    return atomic(np.asarray(eigenvalues, dtype=float))


def uniform(lo: float, hi: float) -> SpectralMeasure:
    if not hi > lo:
        raise ValueError("uniform law needs lo < hi")
    h = 1.0 / (hi - lo)
    return SpectralMeasure(pieces=(DensityPiece([lo, hi], [h, h]),))


def grid_density(grid, values, normalize: bool = False) -> SpectralMeasure:
    piece = DensityPiece(grid, values)
    if normalize:
        piece = DensityPiece(piece.grid, piece.values / piece.mass())
    return SpectralMeasure(pieces=(piece,))


def semicircle(sigma: float = 1.0, center: float = 0.0, n: int = 2001) -> SpectralMeasure:
    """Semicircle law of variance ``sigma**2`` on a cosine-clustered grid.

    Nodes are ``2 sigma cos(theta)`` for equispaced ``theta``, which resolves the
    square-root edges; the interpolant is renormalized to unit mass.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    theta = np.linspace(np.pi, 0.0, n)
    x = 2.0 * sigma * np.cos(theta)
    x[0], x[-1] = -2.0 * sigma, 2.0 * sigma
    rho = np.sqrt(np.clip(4.0 * sigma**2 - x**2, 0.0, None)) / (2.0 * np.pi * sigma**2)
    rho[0] = rho[-1] = 0.0
    return grid_density(x + center, rho, normalize=True)


# -- Stieltjes transform -----------------------------------------------------
def _as_complex(z):
    z = np.asarray(z)
    return z.astype(complex), z.ndim == 0


def _check_off_support(m: SpectralMeasure, z: np.ndarray) -> None:
    real = z.imag == 0
    if np.any(real) and np.any(m.contains(z.real[real])):
        raise DomainError("real argument lies on the support of the measure")


def _piece_stieltjes(p: DensityPiece, w: np.ndarray, order: int) -> np.ndarray:
    """Exact per-segment integral of the linear interpolant against 1/(t-w)**(order+1)."""
    t0 = p.grid[:-1]
    h = np.diff(p.grid)
    r0 = p.values[:-1]
    s = np.diff(p.values) / h
    out = np.empty(w.shape, dtype=complex)
    for k in range(0, w.size, _CHUNK):
        wk = w[k:k + _CHUNK, None]
        d0 = t0 - wk
        lg = np.log1p(h / d0)  # log((t1-w)/(t0-w)); ratio never crosses the cut
        rw = r0 - s * d0  # linear extension of the density evaluated at w
        if order == 0:
            seg = rw * lg + s * h
        else:
            seg = rw * h / (d0 * (d0 + h)) + s * lg
        out[k:k + _CHUNK] = seg.sum(axis=1)
    return out


def _stieltjes(m: SpectralMeasure, z, order: int):
    z, scalar = _as_complex(z)
    flat = z.ravel()
    _check_off_support(m, flat)
    out = np.zeros(flat.shape, dtype=complex)
    if m.n_atoms:
        for k in range(0, flat.size, _CHUNK):
            d = m.locations[None, :] - flat[k:k + _CHUNK, None]
            out[k:k + _CHUNK] = (m.weights / d ** (order + 1)).sum(axis=1)
    for p in m.pieces:
        out += _piece_stieltjes(p, flat, order)
    out = out.reshape(z.shape)
    return complex(out) if scalar else out


def stieltjes_eval(m: SpectralMeasure, z):
    """Stieltjes transform ``g(z) = integral dm(t) / (t - z)``.

    Atoms are summed exactly; each density segment is integrated in closed form
    against its linear interpolant, so accuracy does not degrade as ``Im z -> 0``.
    Accepts scalars or arrays. Raises :class:`DomainError` for real ``z`` on the
    support.
    """
    return _stieltjes(m, z, 0)


def stieltjes_derivative(m: SpectralMeasure, z):
    """``g'(z) = integral dm(t) / (t - z)**2`` (same quadrature as :func:`stieltjes_eval`)."""
    return _stieltjes(m, z, 1)


# Gauss-Legendre, 3 nodes on [0, 1]: exact for polynomials of degree <= 5
_GL_X = (1.0 + np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])) / 2.0
_GL_W = np.array([5.0, 8.0, 5.0]) / 18.0


def moment(m: SpectralMeasure, k: int) -> float:
    """``integral t**k dm(t)`` for ``0 <= k <= 4`` (exact for the stored representation)."""
    if not 0 <= k <= 4 or int(k) != k:
        raise ValueError("moment order must be an integer in [0, 4]")
    total = float(np.sum(m.weights * m.locations**k))
    for p in m.pieces:
        h = np.diff(p.grid)
        t = p.grid[:-1, None] + h[:, None] * _GL_X
        rho = p.values[:-1, None] + (p.values[1:, None] - p.values[:-1, None]) * _GL_X
        total += float(np.sum(h[:, None] * _GL_W * rho * t**k))
    return total


def signed_mass_on(m: SpectralMeasure, lo: float, hi: float) -> float:
    """Signed mass of the closed interval ``[lo, hi]``."""
    if lo > hi:
        raise ValueError("interval needs lo <= hi")
    inside = (m.locations >= lo) & (m.locations <= hi)
    total = float(np.sum(m.weights[inside]))
    for p in m.pieces:
        total += float(p.cdf(hi) - p.cdf(lo))
    return total


def _sample_points(m: SpectralMeasure) -> np.ndarray:
    pts = [m.locations]
    for p in m.pieces:
        mid = (p.grid[1:] + p.grid[:-1]) / 2
        pts += [p.grid, mid]
    return np.unique(np.concatenate(pts))


def pushforward(
    m: SpectralMeasure,
    f: Callable,
    derivative: Callable | None = None,
    min_segments: int = 8192,
) -> SpectralMeasure:
    """Image of ``m`` under a strictly monotone map ``f``.

    Atoms move to ``f(t)`` with their weights. Each density piece is carried to
    the image grid ``f(grid)`` with node values ``rho / |f'|``, then rescaled so
    that its mass is preserved exactly. Source segments are subdivided until a
    piece has at least ``min_segments`` of them; the source density is linear
    there, so this only shrinks the O(h**2) interpolation error of the image.

    ``derivative`` defaults to a central difference of ``f``.
    """
    pts = _sample_points(m)
    fp = np.asarray(f(pts), dtype=float)
    if pts.size > 1:
        steps = np.diff(fp)
        if not (np.all(steps > 0) or np.all(steps < 0)):
            raise ValueError("map is not strictly monotone on the support")
    if derivative is None:

        def derivative(x):
            eps = 1e-6 * np.maximum(1.0, np.abs(x))
            return (np.asarray(f(x + eps)) - np.asarray(f(x - eps))) / (2 * eps)

    pieces = []
    for p in m.pieces:
        g, v = p.grid, p.values
        refine = -(-min_segments // (g.size - 1))
        if refine > 1:
            frac = np.arange(refine) / refine
            g = np.concatenate([(g[:-1, None] + np.diff(g)[:, None] * frac).ravel(), g[-1:]])
            v = np.interp(g, p.grid, p.values)
        y = np.asarray(f(g), dtype=float)
        jac = np.abs(np.asarray(derivative(g), dtype=float))
        if np.any(jac == 0) or not np.all(np.isfinite(jac)):
            raise ValueError("map has a vanishing or infinite derivative on the support")
        vals = v / jac
        if y[0] > y[-1]:
            y, vals = y[::-1], vals[::-1]
        img = DensityPiece(y, vals)
        mass, img_mass = p.mass(), img.mass()
        if img_mass != 0:
            img = DensityPiece(y, vals * (mass / img_mass))
        pieces.append(img)
    locs = np.asarray(f(m.locations), dtype=float) if m.n_atoms else m.locations
    return SpectralMeasure(locs, m.weights, tuple(pieces))


def kolmogorov_distance(a: SpectralMeasure, b: SpectralMeasure, lo: float, hi: float) -> float:
    """``max |A(-inf, x] - B(-inf, x]|`` over 2048 equispaced points of ``[lo, hi]``."""
    x = np.linspace(lo, hi, KOLMOGOROV_GRID_SIZE)
    return float(np.max(np.abs(a.cdf(x) - b.cdf(x))))


# -- serialization -----------------------------------------------------------
def to_dict(m: SpectralMeasure) -> dict:
    """JSON-ready dict ``{"atoms", "grid", "density"}``.

    A single density piece serializes as flat arrays; several pieces serialize
    as lists of arrays (one per piece). No density gives empty arrays.
    """
    atoms = [[float(t), float(w)] for t, w in zip(m.locations, m.weights)]
    if len(m.pieces) == 1:
        grid = m.pieces[0].grid.tolist()
        dens = m.pieces[0].values.tolist()
    elif m.pieces:
        grid = [p.grid.tolist() for p in m.pieces]
        dens = [p.values.tolist() for p in m.pieces]
    else:
        grid, dens = [], []
    return {"atoms": atoms, "grid": grid, "density": dens}


def from_dict(doc: dict) -> SpectralMeasure:
    atoms = np.asarray(doc.get("atoms", []), dtype=float).reshape(-1, 2)
    grid, dens = doc.get("grid", []), doc.get("density", [])
    if len(grid) != len(dens):
        raise ValueError("grid and density must have the same length")
    if grid and isinstance(grid[0], (list, tuple)):
        pieces = tuple(DensityPiece(g, d) for g, d in zip(grid, dens))
    elif grid:
        pieces = (DensityPiece(grid, dens),)
    else:
        pieces = ()
    return SpectralMeasure(atoms[:, 0], atoms[:, 1], pieces)


def to_json(m: SpectralMeasure, **kwargs) -> str:
    return json.dumps(to_dict(m), **kwargs)


def from_json(text: str) -> SpectralMeasure:
    return from_dict(json.loads(text))

