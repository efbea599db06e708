import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from deformed_wigner.eigensolver import eigenvalues_symmetric
from deformed_wigner.ensembles import EnsembleSpec, RankRule, derive_seed, sample_deformed
from deformed_wigner.experiments import (
    COUNTING_HEADER,
    MAPPING_HEADER,
    RATE_HEADER,
    ExperimentPlan,
    clear_cache,
    collect_spectra,
    estimate_mean_stieltjes,
    fit_loglog_slope,
    run_counting_experiment,
    run_mapping_experiment,
    run_rate_experiment,
    worker_count,
)
from deformed_wigner.measures import DomainError, point_mass, uniform

EXPECTED = json.loads((Path(__file__).parent / "expected.json").read_text())
DELTA = point_mass(0.0)


def small_plan(**kw):
    args = dict(
        sigma=1.0,
        bulk=DELTA,
        spike_law=uniform(2, 3),
        rank_rule=RankRule("constant", 4),
        n_grid=(40, 80),
        trials_per_n=3,
        master_seed=11,
    )
    args.update(kw)
    return ExperimentPlan(**args)


def rate_plan(**kw):
    args = dict(rank_rule=RankRule("constant", 2), n_grid=(16, 32, 64), trials_per_n=100, probe_points=(1 + 1j,))
    args.update(kw)
    return small_plan(**args)


# -- estimator of the Stieltjes transform ------------------------------------------------

def test_mean_stieltjes_example():
    assert estimate_mean_stieltjes([1.0, -1.0], 1j) == pytest.approx(0.5j, abs=1e-15)
    with pytest.raises(DomainError):
        estimate_mean_stieltjes([1.0], 2.0)


def test_mean_stieltjes_herglotz():
    lam = np.random.default_rng(1).standard_normal(50)
    z = np.array([0.3 + 0.1j, -2 + 1j, 5 + 0.5j])
    assert np.all(estimate_mean_stieltjes(lam, z).imag > 0)


@pytest.mark.slow
def test_mean_stieltjes_matches_semicircle():
    cfg = EXPECTED["semicircle_stieltjes"]
    spec = EnsembleSpec(cfg["n"], 1.0, DELTA, None, RankRule("constant", 0))
    lam = eigenvalues_symmetric(sample_deformed(spec, cfg["seed"])[1])
    g = estimate_mean_stieltjes(lam, complex(cfg["z"], 1e-9))
    assert abs(g - cfg["value"]) < cfg["tol"]


# -- plans ----------------------------------------------------------------------------------

def test_plan_validation():
    with pytest.raises(ValueError, match="increasing"):
        small_plan(n_grid=(80, 40))
    with pytest.raises(ValueError, match="trials"):
        small_plan(trials_per_n=0)
    with pytest.raises(ValueError, match="64 bits"):
        small_plan(master_seed=2**64)
    with pytest.raises(ValueError, match="Im z"):
        small_plan(probe_points=(1 + 0.01j,))
    with pytest.raises(ValueError, match="lo < hi"):
        small_plan(intervals=((3.0, 2.5),))
    with pytest.raises(ValueError):
        small_plan(n_grid=(8, 40))  # r = 4 > N/4 at N = 8


def test_plan_fingerprint_ignores_design():
    assert small_plan().fingerprint() == small_plan(trials_per_n=7, master_seed=3).fingerprint()
    assert small_plan().fingerprint() != small_plan(sigma=0.5).fingerprint()


def test_collect_spectra_seeds_and_order():
    clear_cache()
    plan = small_plan()
    res = collect_spectra(plan, workers=1)
    assert [(r.n, r.trial) for r in res] == [(n, t) for n in (40, 80) for t in range(3)]
    assert all(r.seed == derive_seed(11, r.n, r.trial) for r in res)
    assert max(r.trace_rel_err for r in res) < 1e-12


def test_worker_env(monkeypatch):
    monkeypatch.setenv("SPECTRAL_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.delenv("SPECTRAL_THREADS")
    assert worker_count() == 1
    monkeypatch.setenv("SPECTRAL_THREADS", "many")
    with pytest.raises(ValueError):
        worker_count()


# -- mapping and counting -----------------------------------------------------------------

def test_mapping_report_layout(tmp_path):
    clear_cache()
    rep = run_mapping_experiment(small_plan(output_path=str(tmp_path)), workers=1)
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert tuple(rows[0]) == MAPPING_HEADER
    assert len(rows) == 1 + 2 * 3 * 4
    assert sorted(p.name for p in tmp_path.iterdir()) == ["mapping.csv", "mapping.json"]
    doc = json.loads((tmp_path / "mapping.json").read_text())
    assert doc["aggregates"]["bbp_edge"] == pytest.approx(2.0)
    assert [b["N"] for b in doc["aggregates"]["by_n"]] == [40, 80]
    # lambda_S column holds the quantiles of the spike law
    assert [float(r[4]) for r in rows[1:5]] == [2.875, 2.625, 2.375, 2.125]


def test_reports_identical_across_worker_counts(monkeypatch):
    plan = small_plan(intervals=((2.5, 3.5),))
    clear_cache()
    one = run_mapping_experiment(plan, workers=1).to_json()
    clear_cache()
    two = run_mapping_experiment(plan, workers=2).to_json()
    assert one == two
    clear_cache()
    monkeypatch.setenv("SPECTRAL_THREADS", "2")
    assert run_counting_experiment(plan).to_csv() == run_counting_experiment(plan, workers=1).to_csv()


def test_counting_report():
    clear_cache()
    plan = small_plan(intervals=((2.5, 10 / 3), (2.8, 5.0)))
    rep = run_counting_experiment(plan, workers=1)
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert tuple(rows[0]) == COUNTING_HEADER
    first = rep.aggregates["by_interval"][0]
    assert first["predicted"] == pytest.approx(1.0, abs=1e-9)
    assert first["predicted_pushforward"] == pytest.approx(1.0, abs=1e-6)
    for row in rows[1:]:
        assert float(row[5]) * 4 == pytest.approx(round(float(row[5]) * 4))


def test_counting_preconditions():
    with pytest.raises(ValueError, match="interval"):
        run_counting_experiment(small_plan())
    with pytest.raises(ValueError, match="spike law"):
        run_counting_experiment(small_plan(spike_law=None, intervals=((3.0, 4.0),)))
    with pytest.raises(DomainError):
        run_counting_experiment(small_plan(intervals=((1.5, 3.0),)))


# -- rate -------------------------------------------------------------------------------------

def test_rate_preconditions():
    with pytest.raises(ValueError, match="three"):
        run_rate_experiment(rate_plan(n_grid=(64,)))
    with pytest.raises(ValueError, match="trials"):
        run_rate_experiment(rate_plan(trials_per_n=99))
    with pytest.raises(ValueError, match="probe"):
        run_rate_experiment(rate_plan(probe_points=()))


def test_rate_report():
    clear_cache()
    rep = run_rate_experiment(rate_plan(), workers=1)
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert tuple(rows[0]) == RATE_HEADER
    assert [int(r[0]) for r in rows[1:]] == [16, 32, 64]
    assert all(int(r[4]) == 100 for r in rows[1:])
    fit = rep.aggregates["fits"][0]
    assert fit["residual_fit"]["slope"] < 0
    assert fit["variance_fit"]["slope"] < 0


def test_loglog_fit_recovers_power():
    ns = np.array([100, 200, 400, 800])
    fit = fit_loglog_slope(ns, 3.0 / ns)
    assert fit["slope"] == pytest.approx(-1.0, abs=1e-12)
    assert fit["r_squared"] == pytest.approx(1.0)
    noisy = fit_loglog_slope(ns, 3.0 / ns * np.array([1.05, 0.97, 1.02, 0.99]))
    assert noisy["ci_low"] < -1.0 < noisy["ci_high"]
    with pytest.raises(ValueError):
        fit_loglog_slope([1, 2], [1, 2])


# -- controls -----------------------------------------------------------------------------------

@pytest.mark.slow
def test_zero_spike_control():
    cfg = EXPECTED["zero_spike_control"]
    plan = ExperimentPlan(1.0, DELTA, None, RankRule("constant", 0), (cfg["n"],), cfg["trials"], cfg["seed"])
    rep = run_mapping_experiment(plan)
    by_n = rep.aggregates["by_n"][0]
    assert by_n["rank"] == 0 and rep.rows == []
    assert abs(by_n["median_top_eigenvalue"] - cfg["limit"]) < cfg["tol"]


@pytest.mark.slow
def test_rate_without_signal():
    # S = 0: the finite-N equation is the semicircle one and its defect still decays
    cfg, band = EXPECTED["rate_control"], EXPECTED["rate"]["slope_band"]
    plan = ExperimentPlan(
        1.0, DELTA, None, RankRule("constant", 0), (128, 256, 512, 1024), cfg["trials"], cfg["seed"],
        probe_points=(complex(*EXPECTED["rate"]["z"]),),
    )
    fit = run_rate_experiment(plan).aggregates["fits"][0]["residual_fit"]
    assert band[0] <= fit["slope"] <= band[1]
