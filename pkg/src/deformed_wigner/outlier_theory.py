"""Outlier predictions for deformed Wigner matrices.

``Phi(x) = x - sigma**2 g_nu0(x)`` sends a signal eigenvalue outside the bulk of
``S`` to the limiting location of the matching eigenvalue of ``W``; it inverts
the subordination function off the limit support. A spike ``theta`` separates
from the bulk exactly when ``Phi'(theta) > 0``; otherwise it is absorbed at the
nearest edge of the limit support.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .ensembles import EnsembleSpec
from .measures import (
    DomainError,
    SpectralMeasure,
    pushforward,
    signed_mass_on,
    stieltjes_derivative,
    stieltjes_eval,
    to_dict,
    to_json,
)
from .subordination import LimitLaw, SolverConfig, omega_eval, omega_prime, solve_limit_law

__all__ = [
    "OutlierPrediction",
    "phi_eval",
    "phi_prime",
    "separation_threshold",
    "limit_law_cached",
    "predict_outlier_positions",
    "split_signed_measure",
    "predict_outlier_measure",
    "outlier_density",
    "predicted_interval_mass",
    "bbp_largest",
    "bbp_edge",
]


def _real_off_support(nu0: SpectralMeasure, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if np.any(nu0.contains(x)):
        raise DomainError("Phi is only defined off the support of nu0")
    return x, x.ndim == 0


def phi_eval(nu0: SpectralMeasure, sigma: float, x):
    """``Phi(x) = x - sigma**2 g_nu0(x)`` for real ``x`` off ``supp nu0``."""
    x, scalar = _real_off_support(nu0, x)
    out = x - sigma**2 * np.real(stieltjes_eval(nu0, x))
    return float(out) if scalar else out


def phi_prime(nu0: SpectralMeasure, sigma: float, x):
    """``Phi'(x) = 1 - sigma**2 integral dnu0(t) / (t - x)**2``."""
    x, scalar = _real_off_support(nu0, x)
    out = 1.0 - sigma**2 * np.real(stieltjes_derivative(nu0, x))
    return float(out) if scalar else out


def separation_threshold(nu0: SpectralMeasure, sigma: float, side: str = "upper", tol: float = 1e-13) -> float:
    """Spike location beyond which an outlier separates from the bulk.

    Above the bulk ``Phi'`` increases to 1, so the threshold is its unique zero
    there (or the bulk edge itself if ``Phi'`` is already positive at the edge).
    ``side="lower"`` gives the mirror threshold below the bulk.
    """
    lo, hi = nu0.support_hull()
    sgn = 1.0 if side == "upper" else -1.0
    edge = hi if side == "upper" else lo
    eps = 1e-12 * max(1.0, abs(edge))
    near = edge + sgn * eps
    if phi_prime(nu0, sigma, near) > 0:
        return edge
    step = max(sigma, 1.0)
    far = edge + sgn * step
    while phi_prime(nu0, sigma, far) <= 0:
        step *= 2
        far = edge + sgn * step
    a, b = near, far  # phi' <= 0 at a, > 0 at b
    while abs(b - a) > tol * max(1.0, abs(b)):
        mid = 0.5 * (a + b)
        if phi_prime(nu0, sigma, mid) > 0:
            b = mid
        else:
            a = mid
    return 0.5 * (a + b)


def bbp_edge(law: LimitLaw) -> float:
    """Upper edge of the limit support, ``Phi(theta_c)`` when the threshold lies above ``supp nu0``.

    The outer edge is the image of the critical point of ``Phi``, which is
    sharper than the edge located on the computed density; the latter is the
    fallback when ``Phi'`` is already positive at the bulk edge.
    """
    _, hi = law.nu0.support_hull()
    theta_c = separation_threshold(law.nu0, law.sigma)
    if theta_c > hi:
        return phi_eval(law.nu0, law.sigma, theta_c)
    return law.upper_edge


_LAW_CACHE: dict = {}


def limit_law_cached(nu0: SpectralMeasure, sigma: float, cfg: SolverConfig | None = None) -> LimitLaw:
    """:func:`solve_limit_law` memoized on ``(nu0, sigma, cfg)``."""
    cfg = cfg or SolverConfig()
    key = (to_json(nu0), float(sigma), json.dumps(cfg.to_dict(), sort_keys=True))
    if key not in _LAW_CACHE:
        _LAW_CACHE[key] = solve_limit_law(nu0, sigma, cfg)
    return _LAW_CACHE[key]


@dataclass(frozen=True)
class OutlierPrediction:
    """Predicted outlier locations and outlier measure.

    ``mapped_positions[j]`` is ``Phi(spikes[j])`` for separated spikes and the
    nearest support edge for absorbed ones (``absorbed[j]`` set).
    """

    spikes: np.ndarray
    phi_values: np.ndarray
    mapped_positions: np.ndarray
    absorbed: np.ndarray
    bbp_edge: float
    mu1: SpectralMeasure | None = None
    within_hypotheses: bool = True

    def to_dict(self) -> dict:
        return {
            "mapped_positions": [float(v) for v in self.mapped_positions],
            "bbp_edge": float(self.bbp_edge),
            "mu1": None if self.mu1 is None else to_dict(self.mu1),
            "spikes": [float(v) for v in self.spikes],
            "absorbed": [bool(v) for v in self.absorbed],
            "within_hypotheses": bool(self.within_hypotheses),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _map_spikes(spikes: np.ndarray, law: LimitLaw):
    nu0, sigma = law.nu0, law.sigma
    phi = np.empty(spikes.size)
    mapped = np.empty(spikes.size)
    absorbed = np.zeros(spikes.size, dtype=bool)
    for j, theta in enumerate(spikes):
        phi[j] = phi_eval(nu0, sigma, theta)
        if phi_prime(nu0, sigma, theta) > 0:
            mapped[j] = phi[j]
        else:
            absorbed[j] = True
            edges = [e for iv in law.support for e in iv]
            edges[-1] = bbp_edge(law)
            mapped[j] = min(edges, key=lambda e: abs(e - phi[j]))
    return phi, mapped, absorbed


def predict_outlier_positions(s_spectrum, spec: EnsembleSpec, law: LimitLaw) -> OutlierPrediction:
    """Map the top ``r`` eigenvalues of ``S`` through ``Phi``.

    ``s_spectrum`` is a :class:`~deformed_wigner.eigensolver.Spectrum` or any
    descending array of eigenvalues of ``S``.
    """
    values = np.asarray(getattr(s_spectrum, "values", s_spectrum), dtype=float)
    spikes = values[: spec.rank]
    phi, mapped, absorbed = _map_spikes(spikes, law)
    mu1 = None
    within = True
    if spec.spike_law is not None:
        # the outlier theorem assumes the spike law lives on one interval
        within = len(spec.spike_law.support_intervals()) == 1
        mu1 = predict_outlier_measure(spec.signed_spike_measure(), law)
    return OutlierPrediction(spikes, phi, mapped, absorbed, bbp_edge(law), mu1, within)


def split_signed_measure(nu1: SpectralMeasure, nu0: SpectralMeasure):
    """Split ``nu1`` into its part off ``supp nu0`` and its part on it.

    Raises ``ValueError`` when a positive component touches ``supp nu0`` or when
    the masses are not ``+1`` and ``-1`` (to 1e-9).
    """
    off_loc, off_w, on_loc, on_w = [], [], [], []
    for t, w in zip(nu1.locations, nu1.weights):
        if nu0.contains(t):
            on_loc.append(t)
            on_w.append(w)
        elif w > 0:
            off_loc.append(t)
            off_w.append(w)
        elif w < 0:
            raise ValueError("negative atom off the bulk support")
    off_pieces, on_pieces = [], []
    for p in nu1.pieces:
        overlaps = any(a <= p.hi and b >= p.lo for a, b in nu0.support_intervals())
        if np.all(p.values <= 0):
            if not overlaps:
                raise ValueError("negative density off the bulk support")
            on_pieces.append(p)
        elif overlaps:
            raise ValueError("spike support intersects the bulk support")
        elif np.any(p.values < 0):
            raise ValueError("negative density off the bulk support")
        else:
            off_pieces.append(p)
    plus = SpectralMeasure(off_loc, off_w, tuple(off_pieces))
    minus = SpectralMeasure(on_loc, on_w, tuple(on_pieces))
    if abs(plus.total_mass() - 1.0) > 1e-9 or abs(minus.total_mass() + 1.0) > 1e-9:
        raise ValueError(
            f"signed spike measure has masses {plus.total_mass():.12g} off and "
            f"{minus.total_mass():.12g} on the bulk support (expected +1 and -1)"
        )
    return plus, minus


def predict_outlier_measure(nu1: SpectralMeasure, law: LimitLaw) -> SpectralMeasure:
    """Limit of ``(N / r)(mu - mu0)`` off the bulk: the image of ``nu1^+`` under ``Phi``.

    Equivalently ``mu1(D) = nu1(omega(D))`` for ``D`` off the limit support. The
    negative part is not resolved pointwise: it is stored as one atom of mass
    ``-1`` at the midpoint of the widest support interval (absorbed spike atoms
    add their weight to the same place).
    """
    nu0, sigma = law.nu0, law.sigma
    plus, _ = split_signed_measure(nu1, nu0)
    absorbed = 0.0
    keep_loc, keep_w = [], []
    for t, w in zip(plus.locations, plus.weights):
        if phi_prime(nu0, sigma, t) > 0:
            keep_loc.append(t)
            keep_w.append(w)
        else:
            absorbed += w
    for p in plus.pieces:
        if np.any(phi_prime(nu0, sigma, p.grid) <= 0):
            raise ValueError("spike density reaches below the separation threshold")
    sep = SpectralMeasure(keep_loc, keep_w, plus.pieces)
    image = pushforward(
        sep,
        lambda x: phi_eval(nu0, sigma, x),
        derivative=lambda x: phi_prime(nu0, sigma, x),
    )
    lo, hi = max(law.support, key=lambda iv: iv[1] - iv[0])
    lump = SpectralMeasure([0.5 * (lo + hi)], [absorbed - 1.0])
    return image + lump


def outlier_density(nu1: SpectralMeasure, law: LimitLaw, x) -> np.ndarray:
    """``rho_mu1(x) = rho_nu1(omega(x)) omega'(x)`` for real ``x`` off the limit support."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    w = omega_eval(law, x)
    wp = np.array([omega_prime(law, xi) for xi in x])
    return nu1.density(w) * wp


def predicted_interval_mass(nu1: SpectralMeasure, law: LimitLaw, lo: float, hi: float) -> float:
    """``mu1([lo, hi]) = nu1(omega([lo, hi]))`` for an interval off the limit support."""
    if np.any(law.contains([lo, hi])) or any(lo <= a and b <= hi for a, b in law.support):
        raise DomainError("interval touches the support of the limit law")
    a, b = omega_eval(law, np.array([lo, hi]))
    return signed_mass_on(nu1, float(a), float(b))


def _is_delta_at_zero(nu0: SpectralMeasure) -> bool:
    return nu0.is_atomic() and nu0.n_atoms == 1 and nu0.locations[0] == 0.0


def bbp_largest(theta: float, sigma: float, nu0: SpectralMeasure, law: LimitLaw | None = None) -> float:
    """Limit of the largest eigenvalue with one spike ``theta``.

    For ``nu0 = delta_0``: ``2 sigma`` if ``theta < sigma``, else ``theta + sigma**2 / theta``.
    Otherwise ``Phi(theta)`` when the spike separates above the bulk, and the
    upper edge of the limit support when it does not.
    """
    if _is_delta_at_zero(nu0):
        return 2.0 * sigma if theta < sigma else theta + sigma**2 / theta
    law = law or limit_law_cached(nu0, sigma)
    _, hi = nu0.support_hull()
    edge = bbp_edge(law)
    if theta > hi and phi_prime(nu0, sigma, theta) > 0:
        return max(edge, phi_eval(nu0, sigma, theta))
    return edge
