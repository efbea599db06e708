"""Eigenvalues of dense real symmetric matrices.

Two stages, both written here:

1. Blocked Householder reduction to tridiagonal form. Reflectors of one panel
   are accumulated (``V``, ``W``) and applied to the trailing matrix as a single
   rank-``2 nb`` update, so half the work runs as matrix-matrix products.
2. Implicit QL iteration with Wilkinson shifts on the tridiagonal matrix,
   eigenvalues only. An off-diagonal ``e[i]`` is deflated once
   ``|e[i]| <= eps * (|d[i]| + |d[i+1]|)`` with ``eps = 2**-52``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .ensembles import SymmetricMatrix

__all__ = [
    "Spectrum",
    "ConvergenceError",
    "tridiagonalize",
    "tridiagonal_eigenvalues",
    "eigenvalues_symmetric",
    "MAX_SWEEPS",
]

EPS = 2.0**-52
MAX_SWEEPS = 50
_BLOCK = 64


class ConvergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues sorted in descending order."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim != 1:
            raise ValueError("spectrum must be 1-d")
        if np.any(np.diff(v) > 0):
            raise ValueError("spectrum must be sorted in descending order")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size

    def top(self, k: int) -> np.ndarray:
        return self.values[:k].copy()


def _as_dense(a) -> np.ndarray:
    if isinstance(a, SymmetricMatrix):
        return a.to_dense()
    a = np.array(a, dtype=np.float64, order="C", copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has NaN or infinite entries")
    if not np.array_equal(a, a.T):
        raise ValueError("matrix is not symmetric")
    return a


def tridiagonalize(a, block: int = _BLOCK) -> tuple[np.ndarray, np.ndarray]:
    """Householder reduction ``Q^T A Q = T``.

    Parameters
    ----------
    a : SymmetricMatrix or ndarray
    block : int
        Panel width of the blocked update.

    Returns
    -------
    diag : ndarray, shape (n,)
    offdiag : ndarray, shape (n - 1,)
        Subdiagonal of ``T``. A column that is already reduced gets no reflector,
        so tridiagonal input comes back unchanged.
    """
    A = _as_dense(a)
    n = A.shape[0]
    d = np.empty(n)
    e = np.zeros(max(n - 1, 0))
    k = 0
    while k < n - 1:
        nb = min(block, n - 1 - k)
        m = n - k
        V = np.zeros((m, nb))
        W = np.zeros((m, nb))
        for j in range(nb):
            i = k + j
            if j > 0:
                # bring column i up to date with the reflectors of this panel
                A[i:, i] -= V[j:, :j] @ W[j, :j] + W[j:, :j] @ V[j, :j]
            d[i] = A[i, i]
            x = A[i + 1:, i]
            alpha = x[0]
            if not np.any(x[1:]):
                e[i] = alpha
                continue
            # scaled norm: squares of tiny entries would underflow
            scale = np.max(np.abs(x))
            xs = x / scale
            beta = -np.copysign(scale * np.sqrt(np.dot(xs, xs)), alpha)
            tau = (beta - alpha) / beta
            v = x / (alpha - beta)
            v[0] = 1.0
            e[i] = beta
            V[j + 1:, j] = v
            w = A[i + 1:, i + 1:] @ v
            if j > 0:
                Vj, Wj = V[j + 1:, :j], W[j + 1:, :j]
                w -= Vj @ (Wj.T @ v) + Wj @ (Vj.T @ v)
            w *= tau
            w -= (0.5 * tau * np.dot(w, v)) * v
            W[j + 1:, j] = w
        s = k + nb
        if s < n:
            Vt, Wt = V[nb:], W[nb:]
            A[s:, s:] -= np.hstack([Vt, Wt]) @ np.hstack([Wt, Vt]).T
        k = s
    if n:
        d[n - 1] = A[n - 1, n - 1]
    return d, e


@numba.njit(cache=True)
def _ql_implicit(d, e, max_sweeps):
    # d: diagonal (overwritten by eigenvalues); e: e[i] couples i and i+1, e[n-1] = 0
    n = d.shape[0]
    eps = 2.0**-52
    for l in range(n):
        sweeps = 0
        while True:
            m = l
            while m < n - 1:
                if abs(e[m]) <= eps * (abs(d[m]) + abs(d[m + 1])):
                    break
                m += 1
            if m == l:
                break
            sweeps += 1
            if sweeps > max_sweeps:
                return l
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = np.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + (r if g >= 0 else -r))
            s = 1.0
            c = 1.0
            p = 0.0
            i = m - 1
            deflated = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = np.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    deflated = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                i -= 1
            if deflated:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return -1


def tridiagonal_eigenvalues(diag, offdiag) -> np.ndarray:
    """Eigenvalues of a symmetric tridiagonal matrix, in QL output order."""
    d = np.array(diag, dtype=np.float64, copy=True)
    e = np.zeros(d.size)
    e[: d.size - 1] = offdiag
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(e))):
        raise ValueError("tridiagonal matrix has NaN or infinite entries")
    if d.size == 0:
        return d
    failed = _ql_implicit(d, e, MAX_SWEEPS)
    if failed >= 0:
        raise ConvergenceError(f"QL iteration did not converge for eigenvalue {failed}")
    return d


def eigenvalues_symmetric(a) -> Spectrum:
    """All eigenvalues of a real symmetric matrix, sorted descending (stable for ties)."""
    A = _as_dense(a)
    amax = np.max(np.abs(A)) if A.size else 0.0
    # exact power-of-two scaling keeps entries away from under/overflow
    shift = 0 if amax == 0 else -int(np.frexp(amax)[1])
    d, e = tridiagonalize(np.ldexp(A, shift))
    vals = np.ldexp(tridiagonal_eigenvalues(d, e), -shift)
    order = np.argsort(-vals, kind="stable")
    return Spectrum(vals[order])
