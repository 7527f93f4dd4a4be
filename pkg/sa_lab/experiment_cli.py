#!/usr/bin/env python3
"""Config-driven experiment runner.

Usage:
    python -m sa_lab validate configs/finite2_bias.toml
    python -m sa_lab run configs/finite2_bias.toml --output-dir out/finite2 --threads 8
    python -m sa_lab run out/finite2/manifest.json --output-dir out/rerun

Each requested analysis runs its module pipeline and writes CSV/JSON/SVG
artifacts; a failing analysis is recorded in manifest.json and the others
still run. Exit codes: 0 ok, 1 some analysis failed, 2 configuration error.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__
from . import reporting
from . import rng as lab_rng
from .config import ANALYSES, ExperimentConfig, FieldError, default_burn_in, parse_config, problem_errors
from .controlled_kernels import KernelDiagnostics, diagnose_kernel
from .errors import ConfigurationError, EstimationError, LabError
from .estimators import (
    bias_estimate,
    bias_term_decomposition,
    cauchy_differences,
    clt_coverage,
    geometric_rate_fit,
    green_kubo,
    norm_row,
    replica_moment,
    rr_scaling_rows,
    scaling_report,
    ScalingRow,
)
from .mean_field import RootCertificate, conditional_monotonicity_constant, find_root, local_jacobian
from .poisson_gateaux import (
    bias_operator,
    gateaux_derivative,
    poisson_operator_bounds,
    solve_for_map,
    wd_remainder_scan,
)
from .registry import build_kernel, build_map
from .sa_engine import (
    SAConfig,
    default_threads,
    forgetting_rate,
    moment_snapshot,
    recommended_burn_in,
    run_coupled,
    run_sa,
    sample_stationary,
    sensitivity_condition,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ANALYSIS_FAILED = 1
EXIT_CONFIG_ERROR = 2

STREAM_SWEEP = 100
STREAM_CLT = 200
STREAM_COUPLING = 300
STREAM_DECOMPOSITION = 400

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str | None = None) -> None:
    level = (level or os.getenv("SA_LAB_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


# --- validation ----------------------------------------------------------------------------


def _read(path: Path) -> tuple[ExperimentConfig | None, list[FieldError]]:
    text = path.read_text(encoding="utf-8")
    suffix = path.suffix.lower()
    config, errors = parse_config(text, suffix)
    if config is not None:
        errors = problem_errors(config, None if suffix == ".json" else text)
    return (config if not errors else None), errors


def validate_config(path: str | Path) -> list[FieldError]:
    """Full schema and invariant check without running anything; an empty list means ok.

    Unreadable files raise OSError.
    """
    _, errors = _read(Path(path))
    return errors


# --- runner --------------------------------------------------------------------------------


def _sa_config(section: str, **fields) -> SAConfig:
    try:
        return SAConfig(**fields)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(part) for part in first["loc"])
        raise ConfigurationError(f"{section}.{loc}" if loc else section, first["msg"]) from exc


@dataclass
class RunOutcome:
    exit_code: int
    output_dir: Path
    manifest: dict


@dataclass
class _Problem:
    kernel: object
    update: object
    theta0: np.ndarray
    x0: object
    root: RootCertificate
    diagnostics: KernelDiagnostics | None = None
    mu_bar_g: float | None = None

    @property
    def theta_star(self) -> np.ndarray:
        return self.root.theta_star

    @property
    def forgetting_ready(self) -> bool:
        d = self.diagnostics
        return d is not None and d.rho_hat > 0 and self.mu_bar_g is not None and self.mu_bar_g > 0


@dataclass
class _Failure:
    error: LabError


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig, output_dir: Path, threads: int | None = None):
        self.config = config
        self.out = Path(output_dir)
        self.threads = threads or default_threads()
        self.warnings: list[str] = []
        self.errors: list[dict] = []
        self.status: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self.streams: dict[str, dict] = {}
        self.burn_ins: dict[str, int] = {}
        self.artifacts: set[str] = set()
        self.problem: _Problem | None = None
        self._cache: dict[str, object] = {}

    # -- bookkeeping

    def warn(self, message: str) -> None:
        logger.warning(message)
        self.warnings.append(message)

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - start, 6)

    def _path(self, name: str) -> Path:
        self.artifacts.add(name)
        return self.out / name

    def csv(self, name: str, header, rows) -> None:
        reporting.write_csv(self._path(name), header, rows)

    def json(self, name: str, record: dict, schema: str | None) -> None:
        reporting.write_json(self._path(name), record, schema)

    def plot(self, name: str, *args, **kwargs) -> None:
        reporting.svg_plot(self._path(f"plots/{name}.svg"), *args, **kwargs)

    def register_streams(self, name: str, stream_id: int, replicas: int) -> None:
        self.streams[name] = {
            "stream_id": stream_id,
            "replicas": [s.describe() for s in lab_rng.replica_streams(self.config.seed, stream_id, range(replicas))],
        }

    def cached(self, key: str, build):
        if key not in self._cache:
            try:
                self._cache[key] = build()
            except LabError as exc:
                self._cache[key] = _Failure(exc)
        value = self._cache[key]
        if isinstance(value, _Failure):
            raise value.error
        return value

    # -- problem set-up

    def build_problem(self) -> _Problem:
        cfg = self.config
        kernel = build_kernel(cfg.problem.kernel.name, cfg.problem.kernel.params)
        update = build_map(cfg.problem.map.name, cfg.problem.map.params, kernel)
        theta0 = np.zeros(update.dim) if cfg.problem.theta0 is None else np.asarray(cfg.problem.theta0, dtype=float)
        if theta0.shape != (update.dim,):
            raise ConfigurationError("problem.theta0", f"expected {update.dim} components")
        x0 = 0 if cfg.problem.x0 is None else cfg.problem.x0
        start = theta0 if cfg.root.theta0 is None else np.asarray(cfg.root.theta0, dtype=float)
        root = find_root(
            update, kernel, start, tol=cfg.root.tol, max_iters=cfg.root.max_iters,
            step=cfg.root.step, budget=cfg.root.budget, seed=cfg.seed,
        )
        if root.monotonicity_ok is False:
            self.warn("mean-field Jacobian contradicts the configured monotonicity hint")
        problem = _Problem(kernel, update, theta0, x0, root)
        self._diagnose(problem)
        return problem

    def _grid(self, theta_star: np.ndarray) -> np.ndarray:
        d = self.config.diagnostics
        offsets = np.linspace(-d.grid_radius, d.grid_radius, d.grid_points)
        return np.vstack([theta_star + np.outer(offsets, e) for e in np.eye(theta_star.size)])

    def _diagnose(self, problem: _Problem) -> None:
        cfg = self.config
        try:
            problem.diagnostics = diagnose_kernel(problem.kernel, problem.theta_star, n_pairs=cfg.diagnostics.n_pairs, rng_seed=cfg.seed)
            problem.mu_bar_g = conditional_monotonicity_constant(problem.update, problem.kernel, self._grid(problem.theta_star), seed=cfg.seed)
        except LabError as exc:
            self.warn(f"kernel diagnostics failed: {exc}")
            return
        diag = problem.diagnostics
        if not diag.contracting or diag.rho_hat <= 0:
            self.warn(f"{problem.kernel.name}: no contraction certificate at theta*; forgetting-rate recommendations disabled")
        if problem.mu_bar_g <= 0:
            self.warn(f"conditional monotonicity constant {problem.mu_bar_g:.4g} is not positive; forgetting-rate recommendations disabled")
        l1 = problem.update.lipschitz_hint
        if l1 is None:
            self.warn("map has no lipschitz_hint; sensitivity condition not evaluated")
        elif problem.forgetting_ready and diag.lp_hat is not None:
            check = sensitivity_condition(diag.lp_hat, min(diag.rho_hat, 1.0), problem.mu_bar_g, l1)
            if not check.satisfied:
                self.warnings.append(f"sensitivity condition violated: L_P={check.lp:.4g} > bound {check.bound:.4g}")

    def burn_in_for(self, alpha: float, n_post: int, configured: int | None) -> tuple[int, int | None]:
        """(burn-in to use, forgetting recommendation or None)."""
        p = self.problem
        rec = None
        if p.forgetting_ready:
            rec = recommended_burn_in(alpha, p.mu_bar_g, p.diagnostics.rho_hat, self.config.sweep.burn_in_safety)
        if configured is not None:
            return configured, rec
        return (rec if rec is not None else default_burn_in(n_post)), rec

    def _tau(self, alpha: float) -> float:
        p = self.problem
        if not p.forgetting_ready:
            raise EstimationError("forgetting rate needs a contracting kernel and a positive conditional monotonicity constant")
        return forgetting_rate(alpha, p.mu_bar_g, p.diagnostics.rho_hat)

    # -- shared computations

    def sweep(self) -> list:
        return self.cached("sweep", self._run_sweep)

    def _run_sweep(self) -> list:
        cfg, p = self.config, self.problem
        s = cfg.sweep
        results = []
        records = []
        for i, alpha in enumerate(s.alphas):
            n_post = math.ceil(s.steps_per_unit_alpha / alpha)
            burn, rec = self.burn_in_for(alpha, n_post, s.burn_in)
            self.burn_ins[f"sweep[{i}]"] = burn
            sa = _sa_config(
                "sweep", alpha=alpha, n_steps=burn + n_post, burn_in=burn, seed=cfg.seed, noise=cfg.problem.noise,
                replica_count=s.replicas, thin=s.thin, moment_order=s.moment_order,
                block_size=s.block_size, stream_id=STREAM_SWEEP + i,
            )
            self.register_streams(f"sweep[{i}]", sa.stream_id, s.replicas)
            with self.stage(f"sweep[{i}]"):
                res = run_sa(sa, p.update, p.kernel, p.theta0, p.x0, theta_star=p.theta_star, recommended=rec, threads=self.threads)
            self.warnings.extend(res.warnings)
            logger.info("sweep cell alpha=%g done (%d replicas, %d steps)", alpha, s.replicas, sa.n_steps)
            records.extend(
                {"analysis": "sweep", "alpha_index": i, "replica": r, **acc.to_record()}
                for r, acc in enumerate(res.replica_accumulators)
            )
            if res.trajectory is not None:
                self._trajectory(f"trajectory_sweep_{i}.csv", res.trajectory)
            results.append(res)
        reporting.write_jsonl(self._path("accumulators.jsonl"), records, "accumulator")
        return results

    def _trajectory(self, name: str, traj: np.ndarray) -> None:
        d = self.problem.update.dim
        width = traj.shape[1] - 2 - d
        header = ["replica", "k"] + [f"theta_{j}" for j in range(d)] + [f"x_{j}" for j in range(width)]
        rows = ([int(r[0]), int(r[1]), *r[2:]] for r in traj)
        self.csv(name, header, rows)

    def bias_estimates(self) -> list:
        return self.cached("bias", lambda: [bias_estimate(r.replica_accumulators, self.problem.theta_star) for r in self.sweep()])

    def gateaux(self):
        def build():
            p = self.problem
            g_hat = solve_for_map(p.update, p.kernel, p.theta_star)
            lam = gateaux_derivative(p.kernel, p.theta_star, g_hat, tuple(self.config.wd_scan.fd_steps))
            for message in lam.warnings:
                self.warnings.append(message)
            j_loc = local_jacobian(p.update, p.kernel, p.theta_star)
            return g_hat, lam, j_loc

        return self.cached("gateaux", build)

    # -- analyses

    def run_bias(self) -> None:
        estimates = self.bias_estimates()
        rows = [norm_row(e.alpha, e.bias, e.std_error, e.n_replicas) for e in estimates]
        report = scaling_report(rows, "bias")
        d = self.problem.update.dim
        header = ["alpha", "estimate", "std_error", "n_replicas"] + [f"bias_{j}" for j in range(d)] + [f"bias_se_{j}" for j in range(d)]
        by_alpha = {e.alpha: e for e in estimates}
        self.csv("scaling_bias.csv", header, (
            [r.alpha, r.estimate, r.std_error, r.n_replicas, *by_alpha[r.alpha].bias, *by_alpha[r.alpha].std_error]
            for r in report.rows
        ))
        record = report.to_record()
        record["theta_star"] = self.problem.theta_star
        record["bias_vectors"] = {repr(e.alpha): e.bias for e in estimates}
        self.json("scaling_bias.json", record, "scaling")
        self._scaling_plot("bias", {"||bias||": report.rows}, report, "||bias||")
        if report.error:
            raise EstimationError(report.error)

    def _scaling_plot(self, name: str, series: dict[str, list[ScalingRow]], report, ylabel: str) -> None:
        pts = {k: [(r.alpha, r.estimate) for r in rows] for k, rows in series.items()}
        fit = (report.fit.slope, report.fit.intercept) if report.fit else None
        self.plot(name, f"{ylabel} vs alpha", pts, "alpha", ylabel, fit=fit)

    def run_moments(self) -> None:
        theta_star = self.problem.theta_star
        reports = {}
        for power, name in ((2, "m2"), (4, "m4")):
            rows = []
            for res in self.sweep():
                mean, se = replica_moment(res.replica_accumulators, theta_star, power)
                rows.append(ScalingRow(res.config.alpha, mean, se, len(res.replica_accumulators)))
            reports[name] = scaling_report(rows, name)
            self.csv(f"scaling_{name}.csv", ["alpha", "estimate", "std_error", "n_replicas"],
                     ([r.alpha, r.estimate, r.std_error, r.n_replicas] for r in reports[name].rows))
            self._scaling_plot(name, {f"E||delta||^{power}": reports[name].rows}, reports[name], f"E||delta||^{power}")
        m_alphas = {res.config.alpha: moment_snapshot(res.accumulator, theta_star).m_alpha for res in self.sweep()}
        record = {
            "m2": reports["m2"].to_record(),
            "m4": reports["m4"].to_record(),
            "m_alpha": {repr(a): m for a, m in m_alphas.items()},
            "cauchy": [{"alpha": a, "alpha_next": b, "gap": g} for a, b, g in cauchy_differences(m_alphas)],
            "halves": [self._halves(res) for res in self.sweep()],
        }
        self.json("scaling_moments.json", record, "moments")
        failed = [r.error for r in reports.values() if r.error]
        if failed:
            raise EstimationError("; ".join(failed))

    def _halves(self, res) -> dict:
        """First- vs second-half E||delta||^2 across replicas, as a z-score."""
        theta_star = self.problem.theta_star
        diffs = np.array([
            moment_snapshot(first, theta_star).m2 - moment_snapshot(second, theta_star).m2
            for first, second in res.replica_halves
            if first.count and second.count
        ])
        if len(diffs) < 2:
            return {"alpha": res.config.alpha, "mean_difference": None, "z": None}
        se = diffs.std(ddof=1) / math.sqrt(len(diffs))
        return {"alpha": res.config.alpha, "mean_difference": diffs.mean(), "z": diffs.mean() / se if se > 0 else None}

    def run_rr(self) -> None:
        estimates = self.bias_estimates()
        pairs = rr_scaling_rows(estimates)
        if not pairs:
            raise EstimationError("no alpha on the grid has its double on the grid; RR needs (alpha, 2 alpha) pairs")
        raw_rows = {e.alpha: norm_row(e.alpha, e.bias, e.std_error, e.n_replicas) for e in estimates}
        rr_report = scaling_report([row for row, _ in pairs], "rr_bias")
        raw_report = scaling_report([raw_rows[row.alpha] for row, _ in pairs], "bias")
        self.csv("rr.csv", ["alpha", "rr_estimate", "rr_std_error", "raw_estimate", "raw_std_error", "n_replicas"], (
            [row.alpha, row.estimate, row.std_error, raw_rows[row.alpha].estimate, raw_rows[row.alpha].std_error, row.n_replicas]
            for row in rr_report.rows
        ))
        gain = rr_report.fit.slope - raw_report.fit.slope if rr_report.fit and raw_report.fit else None
        record = {
            "rr": rr_report.to_record(),
            "raw": raw_report.to_record(),
            "slope_gain": gain,
            "corrected": {repr(row.alpha): vec for row, vec in pairs},
        }
        self.json("rr.json", record, "rr")
        self._scaling_plot("rr", {"rr": rr_report.rows, "raw": raw_report.rows}, rr_report, "||bias||")
        if rr_report.error:
            raise EstimationError(rr_report.error)

    def run_clt(self) -> None:
        cfg, p = self.config, self.problem
        c = cfg.clt
        burn, rec = self.burn_in_for(c.alpha, c.n_steps, c.burn_in)
        self.burn_ins["clt"] = burn
        sa = _sa_config(
            "clt", alpha=c.alpha, n_steps=burn + c.n_steps, burn_in=burn, seed=cfg.seed, noise=cfg.problem.noise,
            replica_count=c.replicas, record_series=min(c.series_replicas, c.replicas),
            block_size=cfg.sweep.block_size, stream_id=STREAM_CLT,
        )
        self.register_streams("clt", STREAM_CLT, c.replicas)
        res = run_sa(sa, p.update, p.kernel, p.theta0, p.x0, theta_star=p.theta_star, recommended=rec, threads=self.threads)
        self.warnings.extend(res.warnings)
        max_lag = min(c.max_lag, c.n_steps // 50)
        if max_lag < 1:
            raise EstimationError(f"clt.n_steps={c.n_steps} is too short for a Green-Kubo estimate")
        estimates = [green_kubo(series, max_lag) for series in res.series]
        for i, gk in enumerate(estimates):
            if not gk.plateau_flag:
                self.warnings.append(f"Green-Kubo sum for series {i} did not plateau before lag {max_lag}")
        sigma = np.mean([gk.sigma_h for gk in estimates], axis=0)
        means = np.stack([moment_snapshot(acc, p.theta_star).mean_delta for acc in res.replica_accumulators]) + p.theta_star
        coverage = clt_coverage(means, sigma, c.n_steps, c.nominal)
        record = {
            "alpha": c.alpha,
            "n_steps": c.n_steps,
            "n_replicas": c.replicas,
            "burn_in": burn,
            "sigma_h": sigma,
            "green_kubo": [gk.to_record() for gk in estimates],
            "coverage": coverage.coverage,
            "nominal": coverage.nominal,
            "chi2_threshold": coverage.threshold,
            "mean_of_means": means.mean(axis=0),
        }
        self.json("clt.json", record, "clt")

    def run_coupling(self) -> None:
        cfg, p = self.config, self.problem
        c = cfg.coupling
        alpha = c.alpha if c.alpha is not None else cfg.sweep.alphas[0]
        tau = self._tau(alpha)
        d = p.update.dim
        shift = c.offset * np.ones(d) / math.sqrt(d)
        sa = _sa_config(
            "coupling", alpha=alpha, n_steps=c.n_steps, seed=cfg.seed, noise=cfg.problem.noise, replica_count=c.replicas,
            block_size=cfg.sweep.block_size, stream_id=STREAM_COUPLING,
        )
        self.register_streams("coupling", STREAM_COUPLING, c.replicas)
        trace = run_coupled(sa, p.update, p.kernel, (p.theta_star - shift, p.x0), (p.theta_star + shift, p.x0), threads=self.threads)
        mean_theta, mean_x, mean_joint = trace.theta_sq.mean(axis=1), trace.x_sq.mean(axis=1), trace.mean_joint_sq()
        self.csv("coupling.csv", ["k", "mean_theta_sq", "mean_x_sq", "mean_joint_sq"],
                 ([k, a, b, j] for k, (a, b, j) in enumerate(zip(mean_theta, mean_x, mean_joint))))
        self.plot("coupling", f"coupled distance, alpha={alpha:g}", {"E d^2": list(enumerate(mean_joint))},
                  "k", "E d^2", log_x=False)
        fit = geometric_rate_fit(trace, c.floor_ratio)
        within = fit.rate <= -0.5 * tau
        met = trace.meeting_times >= 0
        record = {
            "alpha": alpha,
            "rate": fit.rate,
            "r2": fit.r2,
            "window": fit.window,
            "tau": tau,
            "rho_hat": p.diagnostics.rho_hat,
            "mu_bar_g": p.mu_bar_g,
            "within_bound": within,
            "meeting_fraction": float(met.mean()),
            "median_meeting_time": float(np.median(trace.meeting_times[met])) if met.any() else None,
        }
        self.json("coupling.json", record, "coupling")
        if not within:
            self.warn(f"coupled decay rate {fit.rate:.4g} is slower than -tau/2 = {-0.5 * tau:.4g}")
        if fit.r2 < 0.9:
            self.warn(f"coupled log-distance fit has r2={fit.r2:.3f} over {fit.window} steps")

    def run_wd_scan(self) -> None:
        cfg, p = self.config, self.problem
        g_hat, lam, j_loc = self.gateaux()
        report = wd_remainder_scan(p.kernel, p.theta_star, g_hat, lam, cfg.wd_scan.radii, cfg.wd_scan.n_directions, seed=cfg.seed)
        if report.violation:
            self.warnings.append(f"remainder exponent {report.fitted_exponent:.3f} indicates the kernel response is not locally linear")
        self.csv("wd_scan.csv", ["radius", "sup_remainder"], ([r, v] for r, v in zip(report.radii, report.sup_remainders)))
        op = bias_operator(lam.lambda_bar, j_loc)
        bounds = poisson_operator_bounds(p.kernel, p.theta_star, g_hat, self._grid(p.theta_star))
        record = {
            **report.to_record(),
            "lambda_bar": lam.lambda_bar,
            "richardson_error": lam.richardson_error,
            "differentiable": lam.differentiable,
            "jacobian_local": j_loc,
            "jacobian_total": p.root.jacobian,
            "jacobian_identity_residual": float(np.abs(j_loc + lam.lambda_bar - p.root.jacobian).max()),
            "bias_operator": {"matrix": op.matrix, "min_singular_value": op.min_singular_value, "invertible": op.invertible},
            "operator_bounds": asdict(bounds),
            "poisson_residual": g_hat.equation_residual,
        }
        self.json("wd_scan.json", record, "wd_scan")
        rows = report.log_rows()
        fit = None
        if len(rows) >= 2:
            slope, intercept = np.polyfit([r[0] for r in rows], [r[1] for r in rows], 1)
            fit = (float(slope), float(intercept))
        self.plot("wd_scan", "kernel response remainder", {"sup remainder": list(zip(report.radii, report.sup_remainders))},
                  "radius", "sup remainder", fit=fit)

    def run_decomposition(self) -> None:
        cfg, p = self.config, self.problem
        dc = cfg.decomposition
        g_hat, lam, j_loc = self.gateaux()
        entries = []
        for i, alpha in enumerate(dc.alphas):
            tau = self._tau(alpha)
            gap = dc.gap or math.ceil(4.0 / tau)
            burn = recommended_burn_in(alpha, p.mu_bar_g, p.diagnostics.rho_hat, cfg.sweep.burn_in_safety)
            self.burn_ins[f"decomposition[{i}]"] = burn
            per_replica = math.ceil(dc.n_samples / dc.replicas)
            sa = _sa_config(
                "decomposition", alpha=alpha, n_steps=burn + per_replica * gap, burn_in=burn, seed=cfg.seed, noise=cfg.problem.noise,
                replica_count=dc.replicas, block_size=cfg.sweep.block_size, stream_id=STREAM_DECOMPOSITION + i,
            )
            self.register_streams(f"decomposition[{i}]", sa.stream_id, dc.replicas)
            samples = sample_stationary(sa, p.update, p.kernel, p.theta0, p.x0, gap, dc.n_samples, threads=self.threads)
            delta = samples.theta - p.theta_star
            m_alpha = delta.T @ delta / len(delta) / alpha
            dec = bias_term_decomposition(samples, p.theta_star, g_hat, lam, j_loc, p.update, p.kernel, alpha, m_alpha)
            entry = dec.to_record()
            entry.update({
                "alpha": alpha,
                "gap": gap,
                "burn_in": burn,
                "m_alpha": m_alpha,
                "balance_ratio": dec.balance_ratio(),
                "term_III_over_alpha": dec.term_III / alpha,
            })
            entries.append(entry)
        record = {"theta_star": p.theta_star, "lambda_bar": lam.lambda_bar, "jacobian_local": j_loc, "entries": entries}
        self.json("decomposition.json", record, "decomposition")

    # -- driver

    def run(self) -> int:
        requested = [a for a in ANALYSES if a in self.config.analyses]
        if requested:
            with self.stage("problem"):
                try:
                    self.problem = self.build_problem()
                except LabError as exc:
                    for name in requested:
                        self._fail(name, exc)
            for name in requested:
                if name in self.status:
                    continue
                with self.stage(name):
                    try:
                        getattr(self, f"run_{name}")()
                        self.status[name] = "ok"
                        logger.info("analysis %s finished", name)
                    except LabError as exc:
                        self._fail(name, exc)
            reporting.write_json(self.out / "timings.json", {"stages": self.timings})
            self.artifacts.add("timings.json")
        self.json("manifest.json", self.manifest(), "manifest")
        return EXIT_ANALYSIS_FAILED if any(v == "failed" for v in self.status.values()) else EXIT_OK

    def _fail(self, name: str, exc: LabError) -> None:
        logger.error("analysis %s failed: %s", name, exc)
        self.status[name] = "failed"
        self.errors.append({"analysis": name, "error_type": type(exc).__name__, "message": str(exc)})

    def manifest(self) -> dict:
        p = self.problem
        root = diagnostics = None
        if p is not None:
            root = {
                "theta_star": p.theta_star,
                "residual": p.root.residual,
                "jacobian": p.root.jacobian,
                "jacobian_error": p.root.jacobian_error,
                "method": p.root.method,
                "iterations": p.root.iterations,
            }
            if p.diagnostics is not None:
                diagnostics = {**asdict(p.diagnostics), "mu_bar_g": p.mu_bar_g}
        return {
            "version": __version__,
            "config": self.config.reproducible_dump(),
            "config_hash": self.config.config_hash(),
            "seed": self.config.seed,
            "streams": self.streams,
            "burn_in": self.burn_ins,
            "analyses": self.status,
            "errors": self.errors,
            "warnings": self.warnings,
            "root": root,
            "diagnostics": diagnostics,
            "artifacts": sorted(self.artifacts - {"manifest.json"}),
        }


def run_experiment(config: ExperimentConfig, output_dir: str | Path | None = None, threads: int | None = None) -> RunOutcome:
    out = Path(output_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    runner = ExperimentRunner(config, out, threads)
    code = runner.run()
    return RunOutcome(code, out, runner.manifest())


# --- command line ----------------------------------------------------------------------------


def _report_errors(path: Path, errors: list[FieldError]) -> None:
    for err in errors:
        print(f"{path}: {err}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: $SA_LAB_LOG_LEVEL or INFO)")
    parser = argparse.ArgumentParser(prog="sa_lab", description="Constant-stepsize SA experiments under controlled Markov noise.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run the analyses named in a config (or a previous manifest.json)")
    run.add_argument("config", type=Path)
    run.add_argument("--output-dir", type=Path, default=None)
    run.add_argument("--threads", type=int, default=None, help="worker threads; never changes results")
    run.add_argument("--seed-override", type=int, default=None)
    check = sub.add_parser("validate", parents=[common], help="check a config without running anything")
    check.add_argument("config", type=Path)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        config, errors = _read(args.config)
    except OSError as exc:
        print(f"{args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    if errors:
        _report_errors(args.config, errors)
        return EXIT_CONFIG_ERROR
    if args.command == "validate":
        print(f"{args.config}: ok")
        return EXIT_OK

    if args.seed_override is not None:
        raw = {**config.model_dump(mode="json"), "seed": args.seed_override}
        config, errors = parse_config(reporting.dumps(raw), ".json")
        if errors:
            _report_errors(args.config, errors)
            return EXIT_CONFIG_ERROR
    if args.threads is not None and args.threads < 1:
        print("--threads must be positive", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    outcome = run_experiment(config, args.output_dir, args.threads)
    print(f"artifacts written to {outcome.output_dir} (exit {outcome.exit_code})")
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
