"""Command line interface: ``deformed-wigner {solve,sample,predict,experiment} --config FILE``.

A run is described by one JSON file::

    {
      "model": {"n": 1000, "sigma": 1.0,
                "bulk": {"type": "delta", "at": 0.0},
                "spike_law": {"type": "uniform", "lo": 2.0, "hi": 3.0},
                "rank_rule": {"type": "power", "alpha": 0.4}},
      "solver": {"tol": 1e-13},
      "experiment": {"kind": "mapping", "trials": 20, "seed": 7,
                     "intervals": [[2.7, 3.1], {"phi": [2.0, 3.0]}],
                     "probes": [[1.0, 1.0]]},
      "output": {"dir": "out", "formats": ["csv", "json"]}
    }

Measures are ``delta`` (``at``), ``uniform`` (``lo``, ``hi``), ``atoms``
(``locations``, optional ``weights``), ``semicircle`` (``sigma``, ``center``)
or ``grid`` (``grid``, ``density``; normalized on load). Rank rules are
``constant`` (``r``), ``power`` (``alpha``) or ``log`` (``c``). An interval
``{"phi": [a, b]}`` means ``[Phi(a), Phi(b)]``.

Exit status: 0 on success, 1 on invalid input, 2 on numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .eigensolver import eigenvalues_symmetric
from .ensembles import EnsembleSpec, RankRule, build_signal_matrix, sample_deformed
from .experiments import ExperimentError, ExperimentPlan, run_counting_experiment, run_mapping_experiment, run_rate_experiment
from .measures import SpectralMeasure, atomic, grid_density, point_mass, semicircle, uniform
from .outlier_theory import limit_law_cached, phi_eval, predict_outlier_positions
from .subordination import SolverConfig, support_to_json, write_density_csv

__all__ = ["CliConfig", "validate_config", "measure_from_doc", "dispatch", "main"]

log = logging.getLogger("deformed_wigner")

SUBCOMMANDS = ("solve", "sample", "predict", "experiment")
EXPERIMENT_KINDS = ("mapping", "counting", "rate")
FORMATS = ("csv", "json")

_TOP_KEYS = {"model", "solver", "experiment", "output"}
_MODEL_KEYS = {"n", "n_grid", "sigma", "bulk", "spike_law", "rank_rule"}
_SOLVER_KEYS = {"damping", "tol", "max_iter", "inversion_ys", "support_eps", "min_damping"}
_EXPERIMENT_KEYS = {"kind", "trials", "seed", "intervals", "probes"}
_OUTPUT_KEYS = {"dir", "formats"}
_MEASURE_KEYS = {
    "delta": ({"at"}, set()),
    "uniform": ({"lo", "hi"}, set()),
    "atoms": ({"locations"}, {"weights"}),
    "semicircle": (set(), {"sigma", "center"}),
    "grid": ({"grid", "density"}, set()),
}
_RANK_KEYS = {"constant": "r", "power": "alpha", "log": "c"}


@dataclass(frozen=True)
class CliConfig:
    """Validated configuration; every field is plain JSON data so configs compare by value."""

    model: dict
    solver: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    def to_doc(self) -> dict:
        doc = {"model": copy.deepcopy(self.model)}
        for key in ("solver", "experiment", "output"):
            if getattr(self, key):
                doc[key] = copy.deepcopy(getattr(self, key))
        return doc

    @property
    def sigma(self) -> float:
        return float(self.model["sigma"])

    def bulk(self) -> SpectralMeasure:
        return measure_from_doc(self.model["bulk"])

    def spike_law(self) -> SpectralMeasure | None:
        doc = self.model.get("spike_law")
        return None if doc is None else measure_from_doc(doc)

    def rank_rule(self) -> RankRule:
        doc = self.model.get("rank_rule", {"type": "constant", "r": 0})
        return RankRule(doc["type"], doc[_RANK_KEYS[doc["type"]]])

    def n_values(self) -> list[int]:
        if "n_grid" in self.model:
            return [int(n) for n in self.model["n_grid"]]
        if "n" in self.model:
            return [int(self.model["n"])]
        return []

    def solver_config(self) -> SolverConfig:
        kw = dict(self.solver)
        if "inversion_ys" in kw:
            kw["inversion_ys"] = tuple(kw["inversion_ys"])
        return SolverConfig(**kw)


def measure_from_doc(doc: dict) -> SpectralMeasure:
    kind = doc["type"]
    if kind == "delta":
        return point_mass(float(doc["at"]))
    if kind == "uniform":
        return uniform(float(doc["lo"]), float(doc["hi"]))
    if kind == "atoms":
        return atomic(doc["locations"], doc.get("weights"))
    if kind == "semicircle":
        return semicircle(float(doc.get("sigma", 1.0)), float(doc.get("center", 0.0)))
    if kind == "grid":
        return grid_density(doc["grid"], doc["density"], normalize=True)
    raise ValueError(f"unknown measure type {kind!r}")


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _unknown(doc: dict, allowed: set, where: str, errors: list) -> None:
    for key in sorted(set(doc) - allowed):
        errors.append(f"{where}.{key}: unknown key" if where else f"{key}: unknown key")


def _check_section(doc, name: str, errors: list) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        errors.append(f"{name}: must be an object")
        return {}
    return sec


def _check_measure(doc, where: str, errors: list) -> None:
    if not isinstance(doc, dict):
        errors.append(f"{where}: must be an object")
        return
    kind = doc.get("type")
    if kind not in _MEASURE_KEYS:
        errors.append(f"{where}.type: must be one of {sorted(_MEASURE_KEYS)}")
        return
    required, optional = _MEASURE_KEYS[kind]
    for key in sorted(required - set(doc)):
        errors.append(f"{where}.{key}: required field missing")
    _unknown(doc, required | optional | {"type"}, where, errors)
    if required - set(doc):
        return
    try:
        m = measure_from_doc(doc)
        m.check_probability()
    except (ValueError, TypeError) as exc:
        errors.append(f"{where}: {exc}")


def _check_rank_rule(doc, errors: list) -> None:
    where = "model.rank_rule"
    if not isinstance(doc, dict):
        errors.append(f"{where}: must be an object")
        return
    kind = doc.get("type")
    if kind not in _RANK_KEYS:
        errors.append(f"{where}.type: must be one of {sorted(_RANK_KEYS)}")
        return
    key = _RANK_KEYS[kind]
    _unknown(doc, {"type", key}, where, errors)
    if key not in doc:
        errors.append(f"{where}.{key}: required field missing")
        return
    v = doc[key]
    if kind == "constant" and not (_is_int(v) and v >= 0):
        errors.append(f"{where}.r: must be a non-negative integer")
    elif kind == "power" and not (_is_number(v) and 0 < v < 1):
        errors.append(f"{where}.alpha: α in (0,1) required, got {v!r}")
    elif kind == "log" and not (_is_number(v) and v > 0):
        errors.append(f"{where}.c: must be positive")


def _check_interval(iv, where: str, errors: list) -> None:
    pair = iv.get("phi") if isinstance(iv, dict) else iv
    if isinstance(iv, dict):
        _unknown(iv, {"phi"}, where, errors)
    if not (isinstance(pair, list) and len(pair) == 2 and all(_is_number(v) for v in pair)):
        errors.append(f"{where}: must be [lo, hi] or {{\"phi\": [a, b]}}")
    elif not pair[0] < pair[1]:
        errors.append(f"{where}: lo must be smaller than hi")


def validate_config(doc) -> CliConfig | list[str]:
    """Typed config, or the complete list of violations."""
    errors: list[str] = []
    if not isinstance(doc, dict):
        return ["config: top level must be an object"]
    _unknown(doc, _TOP_KEYS, "", errors)
    if "model" not in doc:
        errors.append("model: required field missing")
    model = _check_section(doc, "model", errors)
    solver = _check_section(doc, "solver", errors)
    exp = _check_section(doc, "experiment", errors)
    out = _check_section(doc, "output", errors)

    # model
    _unknown(model, _MODEL_KEYS, "model", errors)
    if "model" in doc:
        if "sigma" not in model:
            errors.append("model.sigma: required field missing")
        elif not (_is_number(model["sigma"]) and model["sigma"] > 0):
            errors.append("model.sigma: sigma must be positive")
        if "bulk" not in model:
            errors.append("model.bulk: required field missing")
        else:
            _check_measure(model["bulk"], "model.bulk", errors)
    if "n" in model and "n_grid" in model:
        errors.append("model: give either n or n_grid, not both")
    if "n" in model and not (_is_int(model["n"]) and model["n"] >= 1):
        errors.append("model.n: must be a positive integer")
    if "n_grid" in model:
        g = model["n_grid"]
        if not (isinstance(g, list) and g and all(_is_int(v) and v >= 1 for v in g)):
            errors.append("model.n_grid: must be a non-empty list of positive integers")
        elif any(b <= a for a, b in zip(g, g[1:])):
            errors.append("model.n_grid: must be strictly increasing")
    if model.get("spike_law") is not None:
        _check_measure(model["spike_law"], "model.spike_law", errors)
        if "rank_rule" not in model:
            errors.append("model.rank_rule: required when spike_law is given")
    if "rank_rule" in model:
        _check_rank_rule(model["rank_rule"], errors)

    # solver
    _unknown(solver, _SOLVER_KEYS, "solver", errors)
    if solver and not set(solver) - _SOLVER_KEYS:
        try:
            kw = dict(solver)
            if "inversion_ys" in kw:
                kw["inversion_ys"] = tuple(kw["inversion_ys"])
            SolverConfig(**kw)
        except (ValueError, TypeError) as exc:
            errors.append(f"solver: {exc}")

    # experiment
    _unknown(exp, _EXPERIMENT_KEYS, "experiment", errors)
    if "kind" in exp and exp["kind"] not in EXPERIMENT_KINDS:
        errors.append(f"experiment.kind: must be one of {list(EXPERIMENT_KINDS)}")
    if "trials" in exp and not (_is_int(exp["trials"]) and exp["trials"] >= 1):
        errors.append("experiment.trials: must be a positive integer")
    if "seed" in exp and not (_is_int(exp["seed"]) and 0 <= exp["seed"] < 2**64):
        errors.append("experiment.seed: must be an integer in [0, 2**64)")
    for i, iv in enumerate(exp.get("intervals", [])):
        _check_interval(iv, f"experiment.intervals[{i}]", errors)
    for i, p in enumerate(exp.get("probes", [])):
        if not (isinstance(p, list) and len(p) == 2 and all(_is_number(v) for v in p)):
            errors.append(f"experiment.probes[{i}]: must be [re, im]")
        elif p[1] < 0.1:
            errors.append(f"experiment.probes[{i}]: Im z must be at least 0.1")

    # output
    _unknown(out, _OUTPUT_KEYS, "output", errors)
    if "dir" in out and not isinstance(out["dir"], str):
        errors.append("output.dir: must be a string")
    if "formats" in out:
        f = out["formats"]
        if not (isinstance(f, list) and f and all(v in FORMATS for v in f)):
            errors.append(f"output.formats: must be a non-empty subset of {list(FORMATS)}")

    if errors:
        return errors
    cfg = CliConfig(copy.deepcopy(model), copy.deepcopy(solver), copy.deepcopy(exp), copy.deepcopy(out))
    # model-level consistency (rank bounds, spike gap) at every N
    for n in cfg.n_values():
        try:
            EnsembleSpec(n, cfg.sigma, cfg.bulk(), cfg.spike_law(), cfg.rank_rule())
        except ValueError as exc:
            errors.append(f"model (N={n}): {exc}")
    return errors or cfg


# ----------------------------------------------------------------- commands

class UsageError(ValueError):
    pass


def _require_n(cfg: CliConfig) -> int:
    ns = cfg.n_values()
    if not ns:
        raise UsageError("model.n: required field missing")
    return ns[0]


def _spec(cfg: CliConfig) -> EnsembleSpec:
    return EnsembleSpec(_require_n(cfg), cfg.sigma, cfg.bulk(), cfg.spike_law(), cfg.rank_rule())


def _cmd_solve(cfg: CliConfig, out: Path, seed, formats) -> None:
    law = limit_law_cached(cfg.bulk(), cfg.sigma, cfg.solver_config())
    write_density_csv(law.mu0_density, out / "mu0_density.csv")
    (out / "mu0_support.json").write_text(support_to_json(law.support) + "\n")
    log.info("support %s", law.support)


def _cmd_sample(cfg: CliConfig, out: Path, seed, formats) -> None:
    spec = _spec(cfg)
    seed = cfg.experiment.get("seed", 0) if seed is None else seed
    s_mat, w_mat = sample_deformed(spec, seed)
    s_mat.save(out / "S.symm")
    w_mat.save(out / "W.symm")
    lam_w = eigenvalues_symmetric(w_mat).values
    lam_s = np.sort(s_mat.diagonal())[::-1]
    lines = ["k,lambda_W,lambda_S"]
    lines += [f"{k + 1},{float(lam_w[k])!r},{float(lam_s[k])!r}" for k in range(spec.n)]
    (out / "eigenvalues.csv").write_text("\n".join(lines) + "\n")


def _cmd_predict(cfg: CliConfig, out: Path, seed, formats) -> None:
    spec = _spec(cfg)
    law = limit_law_cached(spec.bulk, spec.sigma, cfg.solver_config())
    s_vals = np.sort(build_signal_matrix(spec).diagonal())[::-1]
    pred = predict_outlier_positions(s_vals, spec, law)
    (out / "prediction.json").write_text(pred.to_json(indent=2) + "\n")


def _resolve_intervals(cfg: CliConfig) -> list[tuple[float, float]]:
    out = []
    for iv in cfg.experiment.get("intervals", []):
        if isinstance(iv, dict):
            a, b = iv["phi"]
            out.append((phi_eval(cfg.bulk(), cfg.sigma, a), phi_eval(cfg.bulk(), cfg.sigma, b)))
        else:
            out.append((float(iv[0]), float(iv[1])))
    return out


def build_plan(cfg: CliConfig, seed=None) -> ExperimentPlan:
    exp = cfg.experiment
    ns = cfg.n_values()
    if not ns:
        raise UsageError("model.n_grid: required field missing")
    for key in ("kind", "trials"):
        if key not in exp:
            raise UsageError(f"experiment.{key}: required field missing")
    return ExperimentPlan(
        sigma=cfg.sigma,
        bulk=cfg.bulk(),
        spike_law=cfg.spike_law(),
        rank_rule=cfg.rank_rule(),
        n_grid=tuple(ns),
        trials_per_n=exp["trials"],
        master_seed=exp.get("seed", 0) if seed is None else seed,
        probe_points=tuple(complex(re, im) for re, im in exp.get("probes", [])),
        intervals=tuple(_resolve_intervals(cfg)),
        solver=cfg.solver_config(),
    )


_RUNNERS = {"mapping": run_mapping_experiment, "counting": run_counting_experiment, "rate": run_rate_experiment}


def _cmd_experiment(cfg: CliConfig, out: Path, seed, formats) -> None:
    plan = build_plan(cfg, seed)
    report = _RUNNERS[cfg.experiment["kind"]](plan)
    if "csv" in formats:
        (out / f"{report.kind}.csv").write_text(report.to_csv())
    if "json" in formats:
        (out / f"{report.kind}.json").write_text(report.to_json())


_COMMANDS = {"solve": _cmd_solve, "sample": _cmd_sample, "predict": _cmd_predict, "experiment": _cmd_experiment}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deformed-wigner", description="Deformed Wigner matrices: limit laws and outliers.")
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--output-dir", help="directory for output files (overrides output.dir)")
    p.add_argument("--seed", type=int, help="override the master seed (experiment) or trial seed (sample)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def dispatch(argv: list[str]) -> int:
    """Run one subcommand; returns the process exit status."""
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        doc = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        print(f"error: --config: file not found: {args.config}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: --config: invalid JSON: {exc}", file=sys.stderr)
        return 1
    cfg = validate_config(doc)
    if isinstance(cfg, list):
        for msg in cfg:
            print(f"error: {msg}", file=sys.stderr)
        return 1
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed: must be in [0, 2**64)", file=sys.stderr)
        return 1

    out = Path(args.output_dir or cfg.output.get("dir", "."))
    formats = cfg.output.get("formats", list(FORMATS))
    try:
        out.mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](cfg, out, args.seed, formats)
    except (ArithmeticError, ExperimentError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: list[str] | None = None) -> None:
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))
