# tests/acceptance/test_acceptance_criteria.py
"""Desk-scale acceptance runs on the shipped configs.

Run with ``pytest -c pytest.acceptance.ini``; SA_LAB_ACCEPTANCE_SCALE shrinks
or grows every simulation horizon (1.0 reproduces the shipped configs) and
SA_LAB_THREADS sets the worker count.
"""
import json
import math

import numpy as np
import pytest
import scipy.signal

from conftest import ACCEPTANCE_SCALE, ROOT, THREADS
from sa_lab.config import ExperimentConfig, load_config
from sa_lab.controlled_kernels import FiniteKernelFamily, stationary_distribution
from sa_lab.estimators import green_kubo
from sa_lab.experiment_cli import EXIT_OK, run_experiment
from sa_lab.poisson_gateaux import poisson_solve_exact, poisson_solve_series

pytestmark = pytest.mark.acceptance


def _scaled(n: int, floor: int) -> int:
    return max(floor, math.ceil(n * ACCEPTANCE_SCALE))


def _config(name: str, analyses: list[str], edit=None) -> ExperimentConfig:
    raw = load_config(ROOT / "configs" / name).reproducible_dump()
    raw["analyses"] = analyses
    if edit is not None:
        edit(raw)
    return ExperimentConfig.model_validate(raw)


def _run(config: ExperimentConfig, out, threads: int = THREADS) -> dict:
    outcome = run_experiment(config, out, threads=threads)
    assert outcome.exit_code == EXIT_OK, outcome.manifest["errors"]
    return outcome.manifest


def _load(path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


# --- scaling in alpha ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def bias_run(tmp_path_factory):
    def scale(raw):
        raw["sweep"]["steps_per_unit_alpha"] = _scaled(raw["sweep"]["steps_per_unit_alpha"], 1000)

    out = tmp_path_factory.mktemp("bias")
    _run(_config("finite2_bias.toml", ["bias", "moments", "rr"], scale), out)
    return out


def test_bias_is_linear_in_alpha(bias_run, recorder):
    record = _load(bias_run / "scaling_bias.json")
    recorder.metrics({"slope": record["slope"], "slope_stderr": record["slope_stderr"], "r2": record["r2"]})
    assert 0.75 <= record["slope"] <= 1.25, f"bias slope {record['slope']}"


def test_moments_scale_as_powers_of_alpha(bias_run, recorder):
    record = _load(bias_run / "scaling_moments.json")
    m2, m4 = record["m2"]["slope"], record["m4"]["slope"]
    recorder.metrics({"m2_slope": m2, "m4_slope": m4, "halves": record["halves"]})
    assert 0.85 <= m2 <= 1.15, f"m2 slope {m2}"
    assert 1.7 <= m4 <= 2.3, f"m4 slope {m4}"
    for half in record["halves"]:
        assert half["z"] is None or abs(half["z"]) < 4.0, f"halves disagree at alpha={half['alpha']}"


def test_richardson_romberg_raises_the_slope(bias_run, recorder):
    record = _load(bias_run / "rr.json")
    recorder.metrics({"rr_slope": record["rr"]["slope"], "raw_slope": record["raw"]["slope"], "gain": record["slope_gain"]})
    assert record["slope_gain"] >= 0.4, f"RR slope gain {record['slope_gain']}"


# --- forgetting and CLT ------------------------------------------------------------------------


def test_coupled_pairs_forget_geometrically(tmp_path, recorder):
    _run(_config("finite2_clt.toml", ["coupling"]), tmp_path)
    record = _load(tmp_path / "coupling.json")
    recorder.metrics(record)
    assert record["rate"] < 0
    assert record["rate"] <= -0.5 * record["tau"], f"rate {record['rate']} vs tau {record['tau']}"
    assert record["r2"] >= 0.9


def test_clt_coverage_is_nominal(tmp_path, recorder):
    def scale(raw):
        raw["clt"]["n_steps"] = _scaled(raw["clt"]["n_steps"], 10_000)

    _run(_config("finite2_clt.toml", ["clt"], scale), tmp_path)
    record = _load(tmp_path / "clt.json")
    recorder.metrics({"coverage": record["coverage"], "sigma_h": record["sigma_h"], "burn_in": record["burn_in"]})
    assert 0.91 <= record["coverage"] <= 0.985, f"coverage {record['coverage']}"


def test_green_kubo_matches_ar1_closed_form(recorder):
    gen = np.random.default_rng(20240611)
    series = scipy.signal.lfilter([1.0], [1.0, -0.5], gen.standard_normal(1_000_000))
    est = green_kubo(series, max_lag=200)
    recorder.metrics({"sigma_h": est.sigma_h, "batch_means": est.batch_means})
    assert abs(est.sigma_h[0, 0] / 4.0 - 1.0) < 0.05


# --- Poisson solver and kernel response ------------------------------------------------------------


def test_poisson_series_matches_exact_on_random_chains():
    gen = np.random.default_rng(7)
    for _ in range(20):
        P = gen.random((5, 5)) + 0.05
        P /= P.sum(axis=1, keepdims=True)
        f = gen.normal(size=5)
        pi = stationary_distribution(P)
        exact = poisson_solve_exact(P, pi, f)
        series = poisson_solve_series(FiniteKernelFamily(5, lambda theta, P=P: P), [0.0], f, depth=200)
        assert float(np.abs(series.values - exact.values).max()) < 1e-8
        assert exact.equation_residual < 1e-10 and exact.centering_residual < 1e-10


def test_remainder_exponent_separates_smooth_from_kink(tmp_path, recorder):
    _run(_config("finite2_terms.toml", ["wd_scan"]), tmp_path / "smooth")
    _run(_config("finite2_kink_wd.toml", ["wd_scan"]), tmp_path / "kink")
    smooth = _load(tmp_path / "smooth" / "wd_scan.json")
    kink = _load(tmp_path / "kink" / "wd_scan.json")
    recorder.metrics({"smooth": smooth["fitted_exponent"], "kink": kink["fitted_exponent"]})
    assert 1.8 <= smooth["fitted_exponent"] <= 2.2 and not smooth["violation"]
    assert 0.8 <= kink["fitted_exponent"] <= 1.2 and kink["violation"]


# --- stationary Taylor balance ------------------------------------------------------------------------


def _decomposition_edit(control: bool):
    def edit(raw):
        dc = raw["decomposition"]
        dc["alphas"] = [0.01]
        dc["n_samples"] = _scaled(dc["n_samples"], 2000)
        if control:
            raw["problem"]["kernel"]["params"].update({"ka": 0.0, "kb": 0.0})

    return edit


def test_bias_terms_balance(tmp_path, recorder):
    _run(_config("finite2_terms.toml", ["decomposition"], _decomposition_edit(False)), tmp_path)
    entry = _load(tmp_path / "decomposition.json")["entries"][0]
    recorder.metrics({k: entry[k] for k in ("bias_hat", "term_I", "term_II", "term_III", "term_IV", "balance_ratio")})
    assert entry["balance_ratio"] <= 5.0


def test_kernel_response_term_vanishes_without_decision_dependence(tmp_path):
    _run(_config("finite2_terms.toml", ["decomposition"], _decomposition_edit(True)), tmp_path)
    entry = _load(tmp_path / "decomposition.json")["entries"][0]
    for value, se in zip(entry["term_I"], entry["term_I_se"]):
        assert abs(value) <= 3 * se + 1e-12


# --- determinism -----------------------------------------------------------------------------------------


def test_outputs_identical_across_runs_and_threads(tmp_path):
    def shrink(raw):
        raw["coupling"]["n_steps"] = _scaled(raw["coupling"]["n_steps"], 200)

    config = _config("finite2_clt.toml", ["coupling"], shrink)
    for name, threads in (("a", 1), ("b", 1), ("c", 8)):
        _run(config, tmp_path / name, threads=threads)
    for artifact in ("coupling.csv", "coupling.json", "manifest.json", "plots/coupling.svg"):
        first = (tmp_path / "a" / artifact).read_bytes()
        assert first == (tmp_path / "b" / artifact).read_bytes(), artifact
        assert first == (tmp_path / "c" / artifact).read_bytes(), artifact
