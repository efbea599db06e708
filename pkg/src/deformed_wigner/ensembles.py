"""Deformed Wigner ensembles ``W = R / sqrt(N) + S``.

``R`` is a real symmetric Gaussian matrix with every entry on and below the
diagonal drawn independently from ``N(0, sigma**2)``. The limiting spectral
law does not depend on the diagonal variance, so the literal reading is used.

``S`` is diagonal (the spectrum of ``W`` is invariant under conjugating ``S``
by an orthogonal matrix, and ``R`` is invariant in law). Its entries are
deterministic midpoint quantiles: ``r`` spikes from the spike law, followed by
``N - r`` quantiles of the bulk law.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .measures import SpectralMeasure

__all__ = [
    "SymmetricMatrix",
    "RankRule",
    "EnsembleSpec",
    "derive_seed",
    "make_rng",
    "sample_goe",
    "quantile_atoms",
    "build_signal_matrix",
    "assemble_deformed",
    "random_orthogonal_conjugation",
    "sample_deformed",
]

_MAGIC = b"SYMM"


@dataclass(frozen=True)
class SymmetricMatrix:
    """Dense real symmetric matrix stored as its packed lower triangle (row-major)."""

    n: int
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.shape != (self.n * (self.n + 1) // 2,):
            raise ValueError(f"packed data for n={self.n} must have length n(n+1)/2")
        if not np.all(np.isfinite(data)):
            raise ValueError("matrix entries must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_dense(cls, a, check: bool = True) -> "SymmetricMatrix":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("expected a square matrix")
        if check and not np.array_equal(a, a.T):
            raise ValueError("matrix is not symmetric")
        n = a.shape[0]
        return cls(n, a[np.tril_indices(n)])

    @classmethod
    def from_diagonal(cls, diag) -> "SymmetricMatrix":
        diag = np.asarray(diag, dtype=np.float64)
        n = diag.size
        data = np.zeros(n * (n + 1) // 2)
        idx = np.arange(n)
        data[idx * (idx + 1) // 2 + idx] = diag
        return cls(n, data)

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        rows, cols = np.tril_indices(self.n)
        a[rows, cols] = self.data
        a[cols, rows] = self.data
        return a

    def diagonal(self) -> np.ndarray:
        idx = np.arange(self.n)
        return self.data[idx * (idx + 1) // 2 + idx].copy()

    def trace(self) -> float:
        return float(self.diagonal().sum())

    def frobenius_sq(self) -> float:
        """``||A||_F**2`` (off-diagonal entries counted twice)."""
        d = self.diagonal()
        return float(2.0 * np.dot(self.data, self.data) - np.dot(d, d))

    def to_bytes(self) -> bytes:
        """Binary form: ``b"SYMM"``, u64 ``n``, packed float64 lower triangle, little-endian."""
        return _MAGIC + struct.pack("<Q", self.n) + self.data.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "SymmetricMatrix":
        if buf[:4] != _MAGIC:
            raise ValueError("not a SYMM matrix file")
        (n,) = struct.unpack("<Q", buf[4:12])
        data = np.frombuffer(buf[12:], dtype="<f8")
        return cls(n, data.astype(np.float64))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SymmetricMatrix":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(frozen=True)
class RankRule:
    """Number of spikes as a function of ``N``.

    ``kind`` is ``"constant"`` (``value`` spikes), ``"power"``
    (``floor(N**value)``, ``0 < value < 1``) or ``"log"`` (``floor(value * ln N)``).
    """

    kind: str
    value: float

    def __post_init__(self):
        if self.kind == "constant":
            if self.value < 0 or int(self.value) != self.value:
                raise ValueError("constant rank must be a non-negative integer")
        elif self.kind == "power":
            if not 0 < self.value < 1:
                raise ValueError("power rank exponent alpha must lie in (0, 1)")
        elif self.kind == "log":
            if self.value <= 0:
                raise ValueError("log rank coefficient must be positive")
        else:
            raise ValueError(f"unknown rank rule {self.kind!r}")

    def rank(self, n: int) -> int:
        if self.kind == "constant":
            return int(self.value)
        if self.kind == "power":
            # guard against floor(4000**0.5) = 63.99999...
            return int(math.floor(n ** self.value + 1e-9))
        return int(math.floor(self.value * math.log(n) + 1e-9))

    def to_dict(self) -> dict:
        key = {"constant": "r", "power": "alpha", "log": "c"}[self.kind]
        value = int(self.value) if self.kind == "constant" else float(self.value)
        return {"type": self.kind, key: value}


def _gap(spikes: SpectralMeasure, bulk: SpectralMeasure) -> float:
    lo, hi = spikes.support_hull()
    gaps = []
    for a, b in bulk.support_intervals():
        if b < lo:
            gaps.append(lo - b)
        elif a > hi:
            gaps.append(a - hi)
        else:
            return 0.0
    return min(gaps)


@dataclass(frozen=True)
class EnsembleSpec:
    """One random-matrix model.

    ``spike_law`` may be ``None`` for the undeformed (zero-spike) control, in
    which case the rank is zero regardless of ``rank_rule``.
    """

    n: int
    sigma: float
    bulk: SpectralMeasure
    spike_law: SpectralMeasure | None
    rank_rule: RankRule

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        self.bulk.check_probability()
        if self.spike_law is not None:
            self.spike_law.check_probability()
            if _gap(self.spike_law, self.bulk) <= 0:
                raise ValueError("spike law must lie at positive distance from the bulk support")
            r = self.rank
            if r < 1:
                raise ValueError(f"rank rule gives r({self.n}) = {r} < 1")
            if 4 * r > self.n:
                raise ValueError(f"rank rule gives r({self.n}) = {r} > N/4")

    @property
    def rank(self) -> int:
        return 0 if self.spike_law is None else self.rank_rule.rank(self.n)

    def with_n(self, n: int) -> "EnsembleSpec":
        return EnsembleSpec(n, self.sigma, self.bulk, self.spike_law, self.rank_rule)

    def signed_spike_measure(self) -> SpectralMeasure:
        """Limit of ``(N / r)(nu - nu0)``: spike law minus bulk law."""
        if self.spike_law is None:
            raise ValueError("ensemble has no spikes")
        return self.spike_law - self.bulk


def derive_seed(master_seed: int, *keys: int) -> int:
    """64-bit seed for the stream labelled ``keys`` (e.g. ``(N, trial)``).

    Depends only on its arguments, so parallel scheduling cannot change results.
    """
    ss = np.random.SeedSequence([int(master_seed) % 2**64, *(int(k) for k in keys)])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


def sample_goe(n: int, sigma: float, seed: int) -> SymmetricMatrix:
    """Symmetric matrix with independent ``N(0, sigma**2)`` entries for ``i >= j``."""
    if n < 1:
        raise ValueError("n must be positive")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    rng = make_rng(seed)
    return SymmetricMatrix(n, sigma * rng.standard_normal(n * (n + 1) // 2))


def quantile_atoms(law: SpectralMeasure, count: int, distinct: bool = True) -> np.ndarray:
    """Midpoint quantiles ``F^{-1}((j - 1/2) / count)``, ``j = 1..count``, ascending.

    Uses the generalized inverse ``inf {x : F(x) >= u}``; inside a density segment
    the quadratic CDF is inverted exactly. With ``distinct`` set, a law that
    cannot produce ``count`` distinct quantiles (e.g. too few atoms) is an error.
    """
    if count < 1:
        raise ValueError("count must be positive")
    u = (np.arange(1, count + 1) - 0.5) / count
    nodes = np.unique(np.concatenate([law.locations] + [p.grid for p in law.pieces]))
    f_right = law.cdf(nodes)
    atom_mass = np.zeros(nodes.size)
    np.add.at(atom_mass, np.searchsorted(nodes, law.locations), law.weights)
    f_left = f_right - atom_mass

    k = np.searchsorted(f_right, u - 1e-15, side="left")
    k = np.minimum(k, nodes.size - 1)
    q = nodes[k].astype(float)
    in_seg = (f_left[k] >= u) & (k > 0)
    if np.any(in_seg):
        ks = k[in_seg]
        x0, x1 = nodes[ks - 1], nodes[ks]
        rho0 = np.zeros(ks.size)
        rho1 = np.zeros(ks.size)
        for p in law.pieces:
            covers = (x0 >= p.lo) & (x1 <= p.hi)
            rho0 += np.where(covers, p(x0), 0.0)
            rho1 += np.where(covers, p(x1), 0.0)
        h = x1 - x0
        s = (rho1 - rho0) / h
        du = np.maximum(u[in_seg] - f_right[ks - 1], 0.0)
        disc = np.sqrt(np.maximum(rho0**2 + 2.0 * s * du, 0.0))
        denom = rho0 + disc
        t = np.where(denom > 0, 2.0 * du / np.where(denom > 0, denom, 1.0), 0.0)
        q[in_seg] = x0 + np.clip(t, 0.0, h)
    if distinct and np.unique(q).size < count:
        raise ValueError(f"law has fewer than {count} distinct midpoint quantiles")
    return q


def build_signal_matrix(spec: EnsembleSpec) -> SymmetricMatrix:
    """Diagonal ``S``: ``r`` spike quantiles (descending), then ``N - r`` bulk quantiles (descending)."""
    r = spec.rank
    if r >= spec.n:
        raise ValueError("rank must be smaller than N")
    parts = []
    if r:
        parts.append(quantile_atoms(spec.spike_law, r)[::-1])
    parts.append(quantile_atoms(spec.bulk, spec.n - r, distinct=False)[::-1])
    return SymmetricMatrix.from_diagonal(np.concatenate(parts))


def assemble_deformed(r_mat: SymmetricMatrix, s_mat: SymmetricMatrix) -> SymmetricMatrix:
    """``W = R / sqrt(N) + S`` entrywise."""
    if r_mat.n != s_mat.n:
        raise ValueError(f"size mismatch: {r_mat.n} vs {s_mat.n}")
    return SymmetricMatrix(r_mat.n, r_mat.data / math.sqrt(r_mat.n) + s_mat.data)


def random_orthogonal_conjugation(m: SymmetricMatrix, seed: int) -> SymmetricMatrix:
    """``Q A Q^T`` for a Haar orthogonal ``Q`` (sanity checks only)."""
    rng = make_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((m.n, m.n)))
    q *= np.sign(np.diag(r))
    b = q @ m.to_dense() @ q.T
    return SymmetricMatrix.from_dense((b + b.T) / 2)


def sample_deformed(spec: EnsembleSpec, seed: int) -> tuple[SymmetricMatrix, SymmetricMatrix]:
    """One ``(S, W)`` pair for the given model and stream seed."""
    s_mat = build_signal_matrix(spec)
    r_mat = sample_goe(spec.n, spec.sigma, seed)
    return s_mat, assemble_deformed(r_mat, s_mat)
