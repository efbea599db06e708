"""Seeded Monte Carlo checks of the outlier laws.

Every trial is keyed by ``(N, trial)`` and draws its noise from
``derive_seed(master_seed, N, trial)``, so a report depends only on the plan.
Trials may run in worker processes (``SPECTRAL_THREADS``, default 1); results
are merged in key order and BLAS is pinned to one thread, which keeps the
output byte-identical for any worker count.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import multiprocessing
from pathlib import Path

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from .eigensolver import ConvergenceError, eigenvalues_symmetric
from .ensembles import EnsembleSpec, RankRule, build_signal_matrix, derive_seed, sample_deformed
from .measures import DomainError, SpectralMeasure, signed_mass_on, to_dict
from .outlier_theory import (
    bbp_edge,
    limit_law_cached,
    predict_outlier_measure,
    predict_outlier_positions,
    predicted_interval_mass,
)
from .subordination import SolverConfig

__all__ = [
    "ExperimentPlan",
    "ExperimentReport",
    "ExperimentError",
    "TrialResult",
    "estimate_mean_stieltjes",
    "collect_spectra",
    "clear_cache",
    "worker_count",
    "fit_loglog_slope",
    "run_mapping_experiment",
    "run_counting_experiment",
    "run_rate_experiment",
    "MAPPING_HEADER",
    "COUNTING_HEADER",
    "RATE_HEADER",
]

log = logging.getLogger(__name__)

MAPPING_HEADER = ("N", "trial", "seed", "j", "lambda_S", "phi_pred", "lambda_W", "abs_err")
COUNTING_HEADER = ("N", "trial", "seed", "delta_lo", "delta_hi", "empirical", "predicted")
RATE_HEADER = ("N", "z_re", "z_im", "residual", "n_trials")

MIN_RATE_TRIALS = 100
MIN_PROBE_IM = 0.1


class ExperimentError(RuntimeError):
    """A trial failed; the message carries the seed that reproduces it."""


@dataclass(frozen=True)
class ExperimentPlan:
    """Model template plus the Monte Carlo design.

    The model is ``W = R / sqrt(N) + S`` with noise level ``sigma``, bulk law
    ``bulk``, spike law ``spike_law`` (``None`` for the undeformed control) and
    number of spikes ``rank_rule.rank(N)``.
    """

    sigma: float
    bulk: SpectralMeasure
    spike_law: SpectralMeasure | None
    rank_rule: RankRule
    n_grid: tuple
    trials_per_n: int
    master_seed: int
    probe_points: tuple = ()
    intervals: tuple = ()
    output_path: str | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        grid = tuple(int(n) for n in self.n_grid)
        if not grid:
            raise ValueError("n_grid must not be empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("n_grid must be strictly increasing")
        object.__setattr__(self, "n_grid", grid)
        if int(self.trials_per_n) != self.trials_per_n or self.trials_per_n < 1:
            raise ValueError("trials_per_n must be a positive integer")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must fit in 64 bits")
        probes = tuple(complex(z) for z in self.probe_points)
        if any(z.imag < MIN_PROBE_IM for z in probes):
            raise ValueError(f"probe points need Im z >= {MIN_PROBE_IM}")
        object.__setattr__(self, "probe_points", probes)
        ivs = tuple((float(lo), float(hi)) for lo, hi in self.intervals)
        if any(not lo < hi for lo, hi in ivs):
            raise ValueError("intervals must satisfy lo < hi")
        object.__setattr__(self, "intervals", ivs)
        for n in grid:
            self.spec(n)  # validates rank and gap at every N

    def spec(self, n: int) -> EnsembleSpec:
        return EnsembleSpec(n, self.sigma, self.bulk, self.spike_law, self.rank_rule)

    def model_dict(self) -> dict:
        return {
            "sigma": float(self.sigma),
            "bulk": to_dict(self.bulk),
            "spike_law": None if self.spike_law is None else to_dict(self.spike_law),
            "rank_rule": self.rank_rule.to_dict(),
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.model_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            **self.model_dict(),
            "n_grid": list(self.n_grid),
            "trials_per_n": int(self.trials_per_n),
            "master_seed": int(self.master_seed),
            "probe_points": [[z.real, z.imag] for z in self.probe_points],
            "intervals": [list(iv) for iv in self.intervals],
        }


@dataclass(frozen=True)
class TrialResult:
    n: int
    trial: int
    seed: int
    eigenvalues: np.ndarray
    trace_rel_err: float

    @property
    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.eigenvalues, dtype="<f8").tobytes()).hexdigest()[:16]


@dataclass
class ExperimentReport:
    """Per-trial records, CSV rows and aggregates of one experiment."""

    kind: str
    plan: dict
    header: tuple
    rows: list
    records: list
    aggregates: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        for row in self.rows:
            writer.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "plan": self.plan,
            "columns": list(self.header),
            "rows": [list(r) for r in self.rows],
            "records": self.records,
            "aggregates": self.aggregates,
        }

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), indent=2) + "\n"

    def write(self, directory) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = d / f"{self.kind}.csv", d / f"{self.kind}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        return csv_path, json_path


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _clean(obj):
    # plain JSON types only; NaN becomes null
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(obj) else float(obj)
    return obj


def estimate_mean_stieltjes(eigs, z):
    """``(1/N) sum_k 1 / (lambda_k - z)`` from eigenvalues; ``z`` may be an array."""
    lam = np.asarray(getattr(eigs, "values", eigs), dtype=float)
    z_arr = np.asarray(z, dtype=complex)
    if np.any(z_arr.imag == 0):
        raise DomainError("estimate_mean_stieltjes needs Im z != 0")
    out = np.mean(1.0 / (lam[:, None] - z_arr.reshape(-1)[None, :]), axis=0)
    return complex(out[0]) if z_arr.ndim == 0 else out.reshape(z_arr.shape)


# ----------------------------------------------------------------- trials

def _run_trial(spec: EnsembleSpec, trial: int, seed: int) -> TrialResult:
    with threadpool_limits(1):
        _, w = sample_deformed(spec, seed)
        try:
            vals = eigenvalues_symmetric(w).values
        except ConvergenceError as exc:
            raise ExperimentError(f"N={spec.n} trial={trial} seed={seed}: {exc}") from exc
    fro = w.frobenius_sq()
    rel = abs(float(np.dot(vals, vals)) - fro) / fro
    return TrialResult(spec.n, trial, seed, vals, rel)


def _run_trial_packed(args):
    return _run_trial(*args)


_CACHE: "OrderedDict[tuple, TrialResult]" = OrderedDict()
_CACHE_LIMIT = 4096


def _mp_context():
    # fork avoids re-importing __main__ in workers; spawn where fork is unavailable
    methods = multiprocessing.get_all_start_methods()
    return multiprocessing.get_context("fork" if "fork" in methods else "spawn")


def worker_count() -> int:
    raw = os.environ.get("SPECTRAL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SPECTRAL_THREADS must be an integer, got {raw!r}") from None
    return max(n, 1)


def collect_spectra(plan: ExperimentPlan, workers: int | None = None) -> list[TrialResult]:
    """Eigenvalues of ``W`` for every ``(N, trial)`` of the plan, in key order.

    Spectra are cached per (model, N, seed), so the mapping and counting
    experiments on one ensemble share their eigendecompositions.
    """
    workers = worker_count() if workers is None else workers
    fp = plan.fingerprint()
    jobs = []
    for n in plan.n_grid:
        spec = plan.spec(n)
        for t in range(plan.trials_per_n):
            seed = derive_seed(plan.master_seed, n, t)
            jobs.append(((fp, n, seed), (spec, t, seed)))
    missing = [(key, args) for key, args in jobs if key not in _CACHE]
    if missing:
        log.info("computing %d spectra (%d cached) with %d worker(s)", len(missing), len(jobs) - len(missing), workers)
        if workers > 1 and len(missing) > 1:
            with ProcessPoolExecutor(max_workers=workers, mp_context=_mp_context()) as pool:
                results = list(pool.map(_run_trial_packed, [a for _, a in missing]))
        else:
            results = [_run_trial(*a) for _, a in missing]
        for (key, _), res in zip(missing, results):
            _CACHE[key] = res
    out = []
    for key, _ in jobs:
        _CACHE.move_to_end(key)
        out.append(_CACHE[key])
    while len(_CACHE) > _CACHE_LIMIT:
        _CACHE.popitem(last=False)
    return out


def clear_cache() -> None:
    _CACHE.clear()


def _trial_record(res: TrialResult) -> dict:
    return {
        "N": res.n,
        "trial": res.trial,
        "seed": res.seed,
        "digest": res.digest,
        "top_eigenvalue": float(res.eigenvalues[0]),
        "trace_rel_err": res.trace_rel_err,
    }


def _signal_spectrum(spec: EnsembleSpec) -> np.ndarray:
    return np.sort(build_signal_matrix(spec).diagonal())[::-1]


def _finish(report: ExperimentReport, plan: ExperimentPlan) -> ExperimentReport:
    if plan.output_path is not None:
        report.write(plan.output_path)
    return report


# ----------------------------------------------------------------- mapping

def run_mapping_experiment(plan: ExperimentPlan, workers: int | None = None) -> ExperimentReport:
    """Top ``r`` eigenvalues of ``W`` against ``Phi`` of the top ``r`` eigenvalues of ``S``.

    Per trial ``e(N, trial) = max_j |lambda_j(W) - Phi(lambda_j(S))|`` over spikes
    that separate; spikes below the threshold are reported on their own
    (distance to the predicted edge). Aggregates hold the median error and the
    median largest eigenvalue per ``N`` and whether the median error strictly
    decreases along ``n_grid``.
    """
    law = limit_law_cached(plan.bulk, plan.sigma, plan.solver)
    edge = bbp_edge(law)
    results = collect_spectra(plan, workers)
    preds = {}
    for n in plan.n_grid:
        spec = plan.spec(n)
        preds[n] = predict_outlier_positions(_signal_spectrum(spec)[: spec.rank], spec, law)

    rows, records = [], []
    per_n: dict[int, dict[str, list]] = {n: {"err": [], "top": [], "absorbed": []} for n in plan.n_grid}
    for res in results:
        pred = preds[res.n]
        lam_w = res.eigenvalues[: pred.spikes.size]
        errs = np.abs(lam_w - pred.mapped_positions)
        for j in range(pred.spikes.size):
            rows.append((res.n, res.trial, res.seed, j + 1, pred.spikes[j], pred.mapped_positions[j], lam_w[j], errs[j]))
        sep = ~pred.absorbed
        e = float(errs[sep].max()) if sep.any() else float("nan")
        rec = _trial_record(res)
        rec["max_err"] = e
        rec["absorbed_err"] = [float(v) for v in errs[pred.absorbed]]
        records.append(rec)
        per_n[res.n]["err"].append(e)
        per_n[res.n]["top"].append(float(res.eigenvalues[0]))
        per_n[res.n]["absorbed"].extend(errs[pred.absorbed])

    by_n = []
    for n in plan.n_grid:
        d = per_n[n]
        errs = np.array(d["err"])
        by_n.append({
            "N": n,
            "rank": plan.spec(n).rank,
            "n_separated": int((~preds[n].absorbed).sum()),
            "n_absorbed": int(preds[n].absorbed.sum()),
            "median_max_err": float(np.median(errs)) if np.all(np.isfinite(errs)) else None,
            "median_top_eigenvalue": float(np.median(d["top"])),
            "mean_top_eigenvalue": float(np.mean(d["top"])),
            "median_absorbed_err": float(np.median(d["absorbed"])) if d["absorbed"] else None,
        })
    medians = [b["median_max_err"] for b in by_n]
    monotone = all(m is not None for m in medians) and all(b < a for a, b in zip(medians, medians[1:]))
    aggregates = {
        "by_n": by_n,
        "monotone_decreasing": bool(monotone) if len(medians) > 1 else None,
        "bbp_edge": edge,
        "max_trace_rel_err": max(r.trace_rel_err for r in results),
    }
    report = ExperimentReport("mapping", plan.to_dict(), MAPPING_HEADER, rows, records, aggregates)
    return _finish(report, plan)


# ----------------------------------------------------------------- counting

def run_counting_experiment(plan: ExperimentPlan, workers: int | None = None) -> ExperimentReport:
    """``(1/r) #{i : lambda_i(W) in D}`` against ``mu1(D) = nu1(omega(D))``.

    Intervals are closed; each must avoid the limit support.
    """
    if plan.spike_law is None:
        raise ValueError("counting experiment needs a spike law")
    if not plan.intervals:
        raise ValueError("counting experiment needs at least one interval")
    law = limit_law_cached(plan.bulk, plan.sigma, plan.solver)
    nu1 = plan.spike_law - plan.bulk
    predicted = [predicted_interval_mass(nu1, law, lo, hi) for lo, hi in plan.intervals]
    mu1 = predict_outlier_measure(nu1, law)
    # second route: mass of the pushed-forward measure on the same interval
    pushed = [signed_mass_on(mu1, lo, hi) for lo, hi in plan.intervals]
    results = collect_spectra(plan, workers)

    rows, records = [], []
    emp: dict[tuple, list] = {}
    for res in results:
        r = plan.spec(res.n).rank
        rec = _trial_record(res)
        counts = []
        for k, (lo, hi) in enumerate(plan.intervals):
            c = int(np.count_nonzero((res.eigenvalues >= lo) & (res.eigenvalues <= hi)))
            counts.append(c)
            rows.append((res.n, res.trial, res.seed, lo, hi, c / r, predicted[k]))
            emp.setdefault((res.n, k), []).append(c / r)
        rec["counts"] = counts
        records.append(rec)

    by_interval = []
    for n in plan.n_grid:
        for k, (lo, hi) in enumerate(plan.intervals):
            vals = np.array(emp[(n, k)])
            by_interval.append({
                "N": n,
                "delta_lo": lo,
                "delta_hi": hi,
                "predicted": predicted[k],
                "predicted_pushforward": pushed[k],
                "mean_empirical": float(vals.mean()),
                "mean_abs_dev": float(np.mean(np.abs(vals - predicted[k]))),
                "abs_mean_dev": float(abs(vals.mean() - predicted[k])),
            })
    aggregates = {"by_interval": by_interval, "max_trace_rel_err": max(r.trace_rel_err for r in results)}
    report = ExperimentReport("counting", plan.to_dict(), COUNTING_HEADER, rows, records, aggregates)
    return _finish(report, plan)


# ----------------------------------------------------------------- rate

def fit_loglog_slope(ns, values, level: float = 0.95) -> dict:
    """Least-squares line through ``(log N, log value)`` with a t-based confidence band."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    if x.size < 3:
        raise ValueError("a slope fit needs at least three N values")
    fit = stats.linregress(x, y)
    dof = x.size - 2
    half = float(stats.t.ppf(0.5 + level / 2, dof) * fit.stderr)
    resid = y - (fit.intercept + fit.slope * x)
    return {
        "slope": float(fit.slope),
        "intercept": float(fit.intercept),
        "stderr": float(fit.stderr),
        "ci_low": float(fit.slope - half),
        "ci_high": float(fit.slope + half),
        "level": level,
        "r_squared": float(fit.rvalue**2),
        "max_abs_log_residual": float(np.max(np.abs(resid))),
    }


def run_rate_experiment(plan: ExperimentPlan, workers: int | None = None) -> ExperimentReport:
    """Residual ``|g_hat - g_nu(z + sigma**2 g_hat)|`` of the finite-``N`` self-consistent equation.

    ``g_hat`` is the trial mean of the empirical Stieltjes transform of ``W``;
    ``g_nu`` is exact for the diagonal ``S``. The residual should decay like
    ``1/N``; its log-log slope is fitted per probe point, as is the slope of
    the trial variance of the empirical transform.
    """
    if len(plan.n_grid) < 3:
        raise ValueError("rate experiment needs at least three N values")
    if plan.trials_per_n < MIN_RATE_TRIALS:
        raise ValueError(f"rate experiment needs trials_per_n >= {MIN_RATE_TRIALS}")
    if not plan.probe_points:
        raise ValueError("rate experiment needs at least one probe point")
    z = np.array(plan.probe_points)
    s2 = plan.sigma**2
    results = collect_spectra(plan, workers)

    samples: dict[int, list] = {n: [] for n in plan.n_grid}
    records = []
    for res in results:
        g = estimate_mean_stieltjes(res.eigenvalues, z)
        samples[res.n].append(g)
        rec = _trial_record(res)
        rec["g"] = [[v.real, v.imag] for v in g]
        records.append(rec)

    rows = []
    resid = np.empty((len(plan.n_grid), z.size))
    var = np.empty_like(resid)
    for i, n in enumerate(plan.n_grid):
        s_diag = build_signal_matrix(plan.spec(n)).diagonal()
        g = np.array(samples[n])
        g_hat = g.mean(axis=0)
        w = z + s2 * g_hat
        g_nu = np.mean(1.0 / (s_diag[:, None] - w[None, :]), axis=0)
        resid[i] = np.abs(g_hat - g_nu)
        var[i] = np.sum(np.abs(g - g_hat) ** 2, axis=0) / (g.shape[0] - 1)
        for k in range(z.size):
            rows.append((n, z[k].real, z[k].imag, resid[i, k], g.shape[0]))

    fits = []
    for k in range(z.size):
        fits.append({
            "z": [z[k].real, z[k].imag],
            "residuals": resid[:, k].tolist(),
            "variances": var[:, k].tolist(),
            "residual_fit": fit_loglog_slope(plan.n_grid, resid[:, k]),
            "variance_fit": fit_loglog_slope(plan.n_grid, var[:, k]),
        })
    aggregates = {"fits": fits, "max_trace_rel_err": max(r.trace_rel_err for r in results)}
    report = ExperimentReport("rate", plan.to_dict(), RATE_HEADER, rows, records, aggregates)
    return _finish(report, plan)
