"""Estimator-style wrappers (``fit`` / ``transform`` / ``predict``) over the core modules.

These follow the scikit-learn conventions: hyperparameters are constructor
arguments stored unchanged, fitted state ends in an underscore, and inputs are
validated on entry.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .eigensolver import eigenvalues_symmetric
from .measures import SpectralMeasure, point_mass
from .outlier_theory import bbp_edge, phi_eval, phi_prime, separation_threshold
from .subordination import SolverConfig, omega_eval, solve_limit_law

__all__ = ["SpectrumTransformer", "OutlierMapper"]


class SpectrumTransformer(TransformerMixin, BaseEstimator):
    """Eigenvalues (descending) of real symmetric matrices.

    ``transform`` takes one ``(N, N)`` matrix or a stack ``(m, N, N)`` and
    returns ``(N,)`` or ``(m, N)``. With ``top`` set only the largest ``top``
    eigenvalues are kept.
    """

    def __init__(self, top: int | None = None):
        self.top = top

    def fit(self, X, y=None):
        X = self._validate(X)
        self.n_features_in_ = X.shape[-1]
        return self

    def _validate(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=True)
        if X.ndim not in (2, 3) or X.shape[-1] != X.shape[-2]:
            raise ValueError(f"expected square matrices, got shape {X.shape}")
        if self.top is not None and not 1 <= self.top <= X.shape[-1]:
            raise ValueError("top must lie in [1, N]")
        return X

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = self._validate(X)
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(f"fitted on N={self.n_features_in_}, got N={X.shape[-1]}")
        k = self.top or X.shape[-1]
        if X.ndim == 2:
            return eigenvalues_symmetric(X).values[:k].copy()
        return np.stack([eigenvalues_symmetric(a).values[:k] for a in X])


class OutlierMapper(BaseEstimator):
    """Map signal eigenvalues to outlier locations of ``W = R / sqrt(N) + S``.

    ``fit`` solves the limit law for the bulk ``bulk`` (default ``delta_0``) at
    noise level ``sigma``. ``predict`` applies ``Phi`` to spikes, sending
    absorbed spikes to the upper edge; ``transform`` applies the inverse map
    ``omega`` to real points outside the limit support.

    Attributes
    ----------
    law_ : LimitLaw
    support_ : list of (float, float)
    threshold_ : float
        Smallest spike above the bulk that still separates.
    bbp_edge_ : float
    """

    def __init__(self, sigma: float = 1.0, bulk: SpectralMeasure | None = None, tol: float = 1e-13, max_iter: int = 10000):
        self.sigma = sigma
        self.bulk = bulk
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X=None, y=None):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        bulk = point_mass(0.0) if self.bulk is None else self.bulk
        if not isinstance(bulk, SpectralMeasure):
            raise TypeError("bulk must be a SpectralMeasure")
        self.bulk_ = bulk
        self.law_ = solve_limit_law(bulk, self.sigma, SolverConfig(tol=self.tol, max_iter=self.max_iter))
        self.support_ = list(self.law_.support)
        self.threshold_ = separation_threshold(bulk, self.sigma)
        self.bbp_edge_ = bbp_edge(self.law_)
        return self

    @staticmethod
    def _points(X) -> np.ndarray:
        return check_array(np.atleast_1d(X), ensure_2d=False, dtype=np.float64).ravel()

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "law_")
        x = self._points(X)
        out = phi_eval(self.bulk_, self.sigma, x)
        sep = (x > self.bulk_.support_hull()[1]) & (phi_prime(self.bulk_, self.sigma, x) > 0)
        return np.where(sep, out, self.bbp_edge_)

    def separates(self, X) -> np.ndarray:
        check_is_fitted(self, "law_")
        x = self._points(X)
        return phi_prime(self.bulk_, self.sigma, x) > 0

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "law_")
        return np.asarray(omega_eval(self.law_, self._points(X)), dtype=float)
