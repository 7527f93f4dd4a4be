"""Estimators that turn replicated runs into scaling claims.

Standard errors are replica-level throughout; iterates inside one run are
dependent, so within-run batching appears only in the Green-Kubo
cross-check.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.stats

from .controlled_kernels import ControlledKernel, check_theta, transition_matrix
from .errors import (
    ConfigurationError,
    DegenerateFitError,
    EstimationError,
    ReplicationError,
    UnsupportedOperationError,
)
from .mean_field import UpdateMap, expected_hessian, map_hessian, map_jacobian
from .poisson_gateaux import GateauxOperator, PoissonSolution
from .sa_engine import CoupledTrace, MomentAccumulator, StationarySamples, moment_snapshot

logger = logging.getLogger(__name__)

PLATEAU_TOL = 1e-3
PLATEAU_WINDOW = 5


# --- bias and scaling ----------------------------------------------------------------------


@dataclass(frozen=True)
class BiasEstimate:
    alpha: float
    bias: np.ndarray
    std_error: np.ndarray
    n_replicas: int


def bias_estimate(accumulators: list[MomentAccumulator], theta_star) -> BiasEstimate:
    """Mean over replicas of each replica's post-burn-in mean Delta, with the across-replica standard error."""
    if len(accumulators) < 2:
        raise ReplicationError("bias_estimate requires at least 2 replicas")
    means = np.stack([moment_snapshot(acc, theta_star).mean_delta for acc in accumulators])
    n = len(means)
    return BiasEstimate(accumulators[0].alpha, means.mean(axis=0), means.std(axis=0, ddof=1) / math.sqrt(n), n)


def replica_moment(accumulators: list[MomentAccumulator], theta_star, power: int) -> tuple[float, float]:
    """Mean and replica standard error of E||Delta||^power (power 2 or 4)."""
    values = []
    for acc in accumulators:
        snap = moment_snapshot(acc, theta_star)
        values.append(snap.m2 if power == 2 else snap.m2n[power])
    values = np.asarray(values)
    se = values.std(ddof=1) / math.sqrt(len(values)) if len(values) > 1 else 0.0
    return float(values.mean()), float(se)


@dataclass(frozen=True)
class ScalingRow:
    alpha: float
    estimate: float
    std_error: float
    n_replicas: int


def norm_row(alpha: float, vector, std_error, n_replicas: int) -> ScalingRow:
    """||vector|| with a delta-method standard error."""
    v = np.asarray(vector, dtype=float)
    se = np.asarray(std_error, dtype=float)
    norm = float(np.linalg.norm(v))
    se_norm = float(np.sqrt(np.sum((v / norm) ** 2 * se**2))) if norm > 0 else float(np.linalg.norm(se))
    return ScalingRow(float(alpha), norm, se_norm, int(n_replicas))


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    slope_stderr: float
    intercept: float
    r2: float


def _as_row(r) -> ScalingRow:
    if isinstance(r, ScalingRow):
        return r
    return ScalingRow(float(r[0]), float(r[1]), float(r[2]), int(r[3]) if len(r) > 3 else 0)


def loglog_slope(rows) -> SlopeFit:
    """Weighted least squares of log(estimate) on log(alpha).

    Weights are inverse squared relative standard errors; rows without a
    positive standard error are fitted unweighted.
    """
    rows = [_as_row(r) for r in rows]
    if len(rows) < 3:
        raise EstimationError("loglog_slope needs at least 3 alphas")
    for r in rows:
        if not r.estimate > 0:
            raise EstimationError(f"estimate at alpha={r.alpha:g} is not positive; the quantity is indistinguishable from 0, add replicas")
    x = np.log([r.alpha for r in rows])
    y = np.log([r.estimate for r in rows])
    rel = np.array([r.std_error / r.estimate for r in rows])
    w = 1.0 / rel**2 if (rel > 0).all() else np.ones(len(rows))
    design = np.column_stack([x, np.ones_like(x)])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    resid = y - design @ coef
    dof = len(rows) - 2
    chi2 = float(np.sum(w * resid**2))
    cov = np.linalg.inv(design.T @ (design * w[:, None])) * (chi2 / dof if dof > 0 else 0.0)
    y_bar = float(np.sum(w * y) / np.sum(w))
    total = float(np.sum(w * (y - y_bar) ** 2))
    r2 = 1.0 - chi2 / total if total > 0 else 1.0
    return SlopeFit(slope, float(math.sqrt(max(cov[0, 0], 0.0))), intercept, r2)


@dataclass(frozen=True)
class ScalingReport:
    quantity: str
    rows: list[ScalingRow]
    fit: SlopeFit | None
    error: str | None = None

    def to_record(self) -> dict:
        fit = asdict(self.fit) if self.fit else {"slope": None, "slope_stderr": None, "intercept": None, "r2": None}
        return {"quantity": self.quantity, "rows": [asdict(r) for r in self.rows], **fit, "error": self.error}


def scaling_report(rows: list[ScalingRow], quantity: str) -> ScalingReport:
    """Rows sorted by decreasing alpha with their log-log fit; a failed fit is recorded, not raised."""
    ordered = sorted(rows, key=lambda r: -r.alpha)
    alphas = [r.alpha for r in ordered]
    if len(set(alphas)) != len(alphas):
        raise ConfigurationError("alphas", "scaling rows need distinct alphas")
    try:
        fit = loglog_slope(ordered)
    except EstimationError as exc:
        logger.warning("%s scaling fit failed: %s", quantity, exc)
        return ScalingReport(quantity, ordered, None, str(exc))
    logger.info("%s scaling slope %.3f +/- %.3f (r2=%.3f)", quantity, fit.slope, fit.slope_stderr, fit.r2)
    return ScalingReport(quantity, ordered, fit)


def rr_extrapolate(mean_at_alpha, mean_at_2alpha) -> np.ndarray:
    """2 m(alpha) - m(2 alpha)."""
    a = np.asarray(mean_at_alpha, dtype=float)
    b = np.asarray(mean_at_2alpha, dtype=float)
    if a.shape != b.shape:
        raise ConfigurationError("mean_at_2alpha", f"dimension mismatch {a.shape} vs {b.shape}")
    return 2.0 * a - b


def rr_scaling_rows(estimates: list[BiasEstimate], rel_tol: float = 1e-9) -> list[tuple[ScalingRow, np.ndarray]]:
    """RR-corrected bias ||2 b(alpha) - b(2 alpha)|| for every alpha whose double is also on the grid."""
    by_alpha = {e.alpha: e for e in estimates}
    out = []
    for est in sorted(estimates, key=lambda e: -e.alpha):
        partner = next((by_alpha[a] for a in by_alpha if math.isclose(a, 2 * est.alpha, rel_tol=rel_tol)), None)
        if partner is None:
            continue
        corrected = rr_extrapolate(est.bias, partner.bias)
        se = np.sqrt(4 * est.std_error**2 + partner.std_error**2)
        out.append((norm_row(est.alpha, corrected, se, min(est.n_replicas, partner.n_replicas)), corrected))
    return out


def cauchy_differences(m_alphas: dict[float, np.ndarray]) -> list[tuple[float, float, float]]:
    """Frobenius gaps between rescaled covariances at consecutive alphas (decreasing)."""
    alphas = sorted(m_alphas, reverse=True)
    return [
        (a, b, float(np.linalg.norm(np.atleast_2d(m_alphas[a]) - np.atleast_2d(m_alphas[b]))))
        for a, b in zip(alphas, alphas[1:])
    ]


# --- Green-Kubo and CLT ----------------------------------------------------------------------


@dataclass
class GreenKuboEstimate:
    variance_term: np.ndarray
    lag_covariances: list[np.ndarray]
    sigma_h: np.ndarray
    truncation_lag: int
    plateau_flag: bool
    batch_means: np.ndarray | None = None
    batch_size: int | None = None

    def to_record(self) -> dict:
        return {
            "variance_term": self.variance_term.tolist(),
            "sigma_h": self.sigma_h.tolist(),
            "truncation_lag": self.truncation_lag,
            "plateau_flag": self.plateau_flag,
            "batch_means": None if self.batch_means is None else self.batch_means.tolist(),
            "batch_size": self.batch_size,
        }


def batch_means_covariance(x: np.ndarray, batch_size: int) -> np.ndarray:
    """Non-overlapping batch-means estimate of the long-run covariance."""
    x = np.asarray(x, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    n_batches = x.shape[0] // batch_size
    if n_batches < 2:
        raise EstimationError("batch means need at least two batches")
    means = x[: n_batches * batch_size].reshape(n_batches, batch_size, -1).mean(axis=1)
    return np.atleast_2d(batch_size * np.cov(means, rowvar=False))


def green_kubo(series, max_lag: int, plateau_tol: float = PLATEAU_TOL, plateau_window: int = PLATEAU_WINDOW) -> GreenKuboEstimate:
    """Var(h) + sum_{k<=L} (Cov(h_0, h_k) + Cov(h_k, h_0)), L the first plateau lag or ``max_lag``."""
    x = np.asarray(series, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    n = x.shape[0]
    if max_lag < 1:
        raise ConfigurationError("max_lag", "must be positive")
    if n < 50 * max_lag:
        raise EstimationError(f"series too short: {n} samples, need at least 50*max_lag = {50 * max_lag}")
    xc = x - x.mean(axis=0)
    var = xc.T @ xc / n
    var = 0.5 * (var + var.T)
    total = var.copy()
    lags: list[np.ndarray] = []
    calm = 0
    plateau = False
    lag = 0
    if np.linalg.norm(var) == 0:
        plateau = True
    else:
        for lag in range(1, max_lag + 1):
            cov = xc[:-lag].T @ xc[lag:] / n
            lags.append(cov)
            previous = total
            total = total + cov + cov.T
            scale = np.linalg.norm(total)
            change = np.linalg.norm(total - previous) / scale if scale > 0 else math.inf
            calm = calm + 1 if change < plateau_tol else 0
            if calm >= plateau_window:
                plateau = True
                break
    total = 0.5 * (total + total.T)
    if not plateau:
        logger.warning("Green-Kubo sum did not plateau before max_lag=%d", max_lag)
    batch = max(1, int(math.isqrt(n)))
    bm = batch_means_covariance(x, batch) if n // batch >= 2 else None
    return GreenKuboEstimate(var, lags, total, lag, plateau, bm, batch)


@dataclass(frozen=True)
class CoverageResult:
    coverage: float
    nominal: float
    threshold: float
    n_replicas: int


def clt_coverage(replica_means, sigma_h, n_steps: int, nominal: float = 0.95, min_replicas: int = 200) -> CoverageResult:
    """Fraction of replicas with n (m_r - m)^T Sigma^{-1} (m_r - m) inside the chi-square quantile at ``nominal``."""
    means = np.asarray(replica_means, dtype=float)
    means = means[:, None] if means.ndim == 1 else means
    if len(means) < min_replicas:
        raise ReplicationError(f"clt_coverage needs at least {min_replicas} replicas, got {len(means)}")
    sigma = np.atleast_2d(np.asarray(sigma_h, dtype=float))
    eig = np.linalg.eigvalsh(0.5 * (sigma + sigma.T))
    if eig.min() <= 1e-12 * max(eig.max(), 1e-300):
        raise EstimationError("sigma_h is singular; use longer runs so the covariance is resolved")
    z = math.sqrt(n_steps) * (means - means.mean(axis=0))
    stat = np.einsum("ri,ij,rj->r", z, np.linalg.inv(sigma), z)
    threshold = float(scipy.stats.chi2.ppf(nominal, df=means.shape[1]))
    return CoverageResult(float(np.mean(stat <= threshold)), nominal, threshold, len(means))


# --- coupling rate ------------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    rate: float
    r2: float
    window: int


def geometric_rate_fit(trace, floor_ratio: float = 0.0, min_length: int = 100) -> RateFit:
    """Slope of log E d^2 against k, fitted until the mean first drops to ``floor_ratio`` * d^2_0 (or to zero)."""
    mean = trace.mean_joint_sq() if isinstance(trace, CoupledTrace) else np.asarray(trace, dtype=float)
    if len(mean) < min_length:
        raise ConfigurationError("trace", f"needs at least {min_length} steps, got {len(mean)}")
    floor = max(floor_ratio * mean[0], 0.0)
    below = np.nonzero(mean <= floor)[0]
    end = int(below[0]) if below.size else len(mean)
    if end < 2:
        raise DegenerateFitError("coupled pair met immediately; no decay to fit")
    k = np.arange(end, dtype=float)
    y = np.log(mean[:end])
    slope, intercept = np.polyfit(k, y, 1)
    resid = y - (slope * k + intercept)
    total = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / total if total > 0 else 1.0
    return RateFit(float(slope), r2, end)


# --- bias-term decomposition ---------------------------------------------------------------------


@dataclass
class BiasTermDecomposition:
    n_samples: int
    bias_hat: np.ndarray
    bias_se: np.ndarray
    term_I: np.ndarray
    term_I_se: np.ndarray
    term_I_direct: np.ndarray
    term_I_direct_se: np.ndarray
    term_I_linear: np.ndarray
    term_I_prime: np.ndarray
    term_I_prime_se: np.ndarray
    wd_remainder_term: np.ndarray
    wd_remainder_se: np.ndarray
    term_II: np.ndarray
    term_II_fluct: np.ndarray
    term_II_fluct_se: np.ndarray
    term_III: np.ndarray
    term_III_se: np.ndarray
    term_IV: np.ndarray
    term_IV_se: np.ndarray
    reconstruction: np.ndarray
    reconstruction_se: np.ndarray
    reconstruction_residual: float
    term_III_predicted: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def balance_ratio(self) -> float:
        """max_i |reconstruction_i| / se_i, the residual in combined standard errors."""
        se = np.where(self.reconstruction_se > 0, self.reconstruction_se, np.inf)
        return float(np.max(np.abs(self.reconstruction) / se))

    def to_record(self) -> dict:
        rec = {}
        for key, value in asdict(self).items():
            rec[key] = value.tolist() if isinstance(value, np.ndarray) else value
        return rec


def _mean_se(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = len(values)
    se = values.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(values.shape[1:])
    return values.mean(axis=0), se


def bias_term_decomposition(
    samples: StationarySamples,
    theta_star,
    g_hat: PoissonSolution,
    lam: GateauxOperator,
    jacobian,
    update: UpdateMap,
    kernel: ControlledKernel,
    alpha: float | None = None,
    m_alpha=None,
) -> BiasTermDecomposition:
    """Monte Carlo terms (I)-(IV) of the stationary Taylor balance from triples (theta_k, X_k, X_{k+1}).

    Term (I) uses the Poisson representation E[(P_theta - P_theta*) g_hat(X_k)];
    (II)-(IV) pair Delta_k with X_{k+1}; (IV) is the per-sample Taylor
    remainder. ``jacobian`` is the frozen-law Jacobian E_pi[g'(theta*, X)].
    """
    if not kernel.is_finite:
        raise UnsupportedOperationError(f"{kernel.name}: the bias-term decomposition needs a finite kernel")
    theta_star = check_theta(theta_star)
    d = theta_star.size
    delta = samples.theta - theta_star
    xs, xn = samples.x, samples.x_next
    n = len(delta)
    if n < 2:
        raise ReplicationError("bias_term_decomposition needs at least 2 samples")
    values = np.asarray(g_hat.values, dtype=float)
    values = values[:, None] if values.ndim == 1 else values
    states = kernel.states()
    if values.shape[1] != d:
        raise ConfigurationError("g_hat", f"values have {values.shape[1]} components, expected {d}")

    p_star = transition_matrix(kernel, theta_star)
    rows = kernel.rows(samples.theta)[np.arange(n), xs]
    term1 = rows @ values - p_star[xs] @ values

    lam_x = lam.lambda_star[xs]
    lam_delta = np.einsum("nij,nj->ni", lam_x, delta)
    term1_lin = delta @ lam.lambda_bar.T
    term1_prime = lam_delta - term1_lin
    wd = term1 - lam_delta

    g_star = update.evaluate(np.tile(theta_star, (kernel.n_states, 1)), states)
    g_prime = map_jacobian(update, theta_star, states)
    g_second = map_hessian(update, theta_star, states)
    jac = np.atleast_2d(np.asarray(jacobian, dtype=float))

    direct = g_star[xn]
    term2 = np.einsum("nij,nj->ni", g_prime[xn], delta)
    term2_fluct = term2 - delta @ jac.T
    term3 = 0.5 * np.einsum("nijk,nj,nk->ni", g_second[xn], delta, delta)
    g_at = update.evaluate(samples.theta, xn)
    term4 = g_at - direct - term2 - term3
    recon = term1 + term2 + term3 + term4

    means = {name: _mean_se(v) for name, v in (
        ("bias", delta), ("I", term1), ("I_direct", direct), ("I_prime", term1_prime), ("wd", wd),
        ("II_fluct", term2_fluct), ("III", term3), ("IV", term4), ("recon", recon),
    )}
    predicted = None
    if alpha is not None and m_alpha is not None:
        h_bar = expected_hessian(update, kernel, theta_star)
        predicted = 0.5 * alpha * np.einsum("ijk,jk->i", h_bar, np.atleast_2d(m_alpha))

    result = BiasTermDecomposition(
        n_samples=n,
        bias_hat=means["bias"][0],
        bias_se=means["bias"][1],
        term_I=means["I"][0],
        term_I_se=means["I"][1],
        term_I_direct=means["I_direct"][0],
        term_I_direct_se=means["I_direct"][1],
        term_I_linear=lam.lambda_bar @ means["bias"][0],
        term_I_prime=means["I_prime"][0],
        term_I_prime_se=means["I_prime"][1],
        wd_remainder_term=means["wd"][0],
        wd_remainder_se=means["wd"][1],
        term_II=term2.mean(axis=0),
        term_II_fluct=means["II_fluct"][0],
        term_II_fluct_se=means["II_fluct"][1],
        term_III=means["III"][0],
        term_III_se=means["III"][1],
        term_IV=means["IV"][0],
        term_IV_se=means["IV"][1],
        reconstruction=means["recon"][0],
        reconstruction_se=means["recon"][1],
        reconstruction_residual=float(np.linalg.norm(means["recon"][0])),
        term_III_predicted=predicted,
    )
    logger.info("decomposition over %d samples: balance %.2f standard errors", n, result.balance_ratio())
    return result
