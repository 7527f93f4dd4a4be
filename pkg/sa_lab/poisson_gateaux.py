"""Poisson equation, kernel images P_theta h, the Gateaux derivative of theta -> P_theta g_hat and its remainder scan.

Finite chains are handled exactly through transition matrices. Continuous
kernels are supported by Monte Carlo with common draws across theta, and
every such result is flagged as an estimate.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from . import rng as lab_rng
from .controlled_kernels import (
    ControlledKernel,
    as_state_batch,
    check_theta,
    estimate_contraction,
    stationary_distribution,
    transition_matrix,
)
from .errors import ConfigurationError, ErgodicityError, UnsupportedOperationError
from .mean_field import UpdateMap, stationary_samples

logger = logging.getLogger(__name__)

DEFAULT_FD_STEPS = (1e-3, 5e-4)
DEFAULT_RADII = tuple(np.geomspace(1e-1, 1e-4, 7).tolist())
WD_VIOLATION_EXPONENT = 1.5
EXACT_ZERO = 1e-300


@dataclass(frozen=True)
class PoissonSolution:
    """g_hat per state (finite) or per query point (continuous).

    ``values`` is (n,) for a scalar right-hand side and (n, d) otherwise.
    """

    values: np.ndarray
    centering_residual: float | None
    equation_residual: float | None
    depth: int | None = None
    tail_bound: float | None = None
    query_points: np.ndarray | None = None
    contracting: bool = True


def _as_columns(f) -> tuple[np.ndarray, bool]:
    arr = np.asarray(f, dtype=float)
    return (arr[:, None], True) if arr.ndim == 1 else (arr, False)


def poisson_solve_exact(P, pi, f) -> PoissonSolution:
    """Fundamental-matrix solve (I - P + 1 pi^T) g_hat = f - pi f, so pi g_hat = 0 as well."""
    P = np.asarray(P, dtype=float)
    pi = np.asarray(pi, dtype=float)
    n = P.shape[0]
    f_cols, scalar = _as_columns(f)
    if f_cols.shape[0] != n or pi.shape != (n,):
        raise ConfigurationError("f", f"expected {n} states, got f {np.shape(f)} and pi {pi.shape}")
    if np.abs(pi @ P - pi).max() > 1e-8:
        raise ConfigurationError("pi", "not stationary for P")
    f_tilde = f_cols - pi @ f_cols
    A = np.eye(n) - P + np.outer(np.ones(n), pi)
    try:
        g_hat = scipy.linalg.solve(A, f_tilde)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise ErgodicityError(f"fundamental matrix is singular ({exc}); P is not ergodic") from exc
    if not np.isfinite(g_hat).all():
        raise ErgodicityError("fundamental matrix solve produced non-finite values; P is not ergodic")
    centering = float(np.abs(pi @ g_hat).max())
    residual = float(np.abs(g_hat - P @ g_hat - f_tilde).max())
    return PoissonSolution(g_hat[:, 0] if scalar else g_hat, centering, residual)


def solve_for_map(update: UpdateMap, kernel: ControlledKernel, theta_star) -> PoissonSolution:
    """g_hat(theta*, .) for the vector field g(theta*, .) on a finite kernel."""
    if not kernel.is_finite:
        raise UnsupportedOperationError(f"{kernel.name}: exact Poisson solve needs a finite kernel")
    theta = check_theta(theta_star)
    P = transition_matrix(kernel, theta)
    pi = stationary_distribution(P)
    table = update.evaluate(np.tile(theta, (kernel.n_states, 1)), kernel.states())
    return poisson_solve_exact(P, pi, table)


def _evaluate_h(h, x: np.ndarray) -> np.ndarray:
    return np.asarray(h(x), dtype=float)


def apply_kernel(
    kernel: ControlledKernel,
    theta,
    h,
    budget: int | None = None,
    query_points=None,
    seed: int = 0,
) -> np.ndarray:
    """P_theta h: a matrix product for finite kernels, a one-step Monte Carlo mean at query points otherwise.

    ``h`` is a per-state table or a callable on a state batch; finite kernels
    evaluate a callable on every state first.

    The Monte Carlo draws depend only on ``seed``, so images at different
    theta share randomness.
    """
    theta = check_theta(theta)
    if kernel.is_finite:
        values = _evaluate_h(h, kernel.states()) if callable(h) else np.asarray(h, dtype=float)
        return transition_matrix(kernel, theta) @ values
    if budget is None or budget <= 0:
        raise ConfigurationError("budget", "budget must be positive")
    if query_points is None:
        raise ConfigurationError("query_points", "continuous kernels need query points")
    q = np.asarray(query_points, dtype=float).reshape(-1, kernel.state_dim)
    gen = lab_rng.generator(seed, 20)
    u = gen.random((budget, kernel.n_uniform))
    z = gen.standard_normal((budget, kernel.n_normal))
    thetas = np.tile(theta, (budget, 1))
    out = []
    for point in q:
        xs = as_state_batch(kernel, point, budget)
        out.append(_evaluate_h(h, kernel.step(thetas, xs, u, z)).mean(axis=0))
    return np.stack(out)


def poisson_solve_series(
    kernel: ControlledKernel,
    theta,
    f,
    depth: int,
    query_points=None,
    budget: int | None = None,
    seed: int = 0,
    rho_hat: float | None = None,
) -> PoissonSolution:
    """Partial sum sum_{t<depth} (P^t f - pi f) with a geometric tail bound from the contraction estimate."""
    if depth < 1:
        raise ConfigurationError("depth", "must be at least 1")
    theta = check_theta(theta)
    if rho_hat is None:
        rho_hat = estimate_contraction(kernel, theta, 2000, seed).rho_hat
    contracting = rho_hat > 0
    if not contracting:
        logger.warning("%s: contraction estimate is not positive; series carries no tail bound", kernel.name)

    if kernel.is_finite:
        P = transition_matrix(kernel, theta)
        pi = stationary_distribution(P)
        f_cols, scalar = _as_columns(f)
        f_tilde = f_cols - pi @ f_cols
        term = f_tilde.copy()
        total = np.zeros_like(f_tilde)
        for _ in range(depth):
            total += term
            term = P @ term
        residual = float(np.abs(term).max())  # (I - P) S_depth - f_tilde = -P^depth f_tilde
        oscillation = float((f_tilde.max(axis=0) - f_tilde.min(axis=0)).max())
        tail = oscillation * (1 - rho_hat) ** depth / rho_hat if contracting else None
        return PoissonSolution(
            total[:, 0] if scalar else total,
            float(np.abs(pi @ total).max()),
            residual,
            depth,
            tail,
            contracting=contracting,
        )

    if budget is None or budget <= 0:
        raise ConfigurationError("budget", "budget must be positive")
    if query_points is None:
        raise ConfigurationError("query_points", "continuous kernels need query points")
    q = np.asarray(query_points, dtype=float).reshape(-1, kernel.state_dim)
    stationary = stationary_samples(kernel, theta, max(budget * len(q), 10_000), seed)
    pi_f = _evaluate_h(f, stationary.reshape((-1,) + stationary.shape[2:])).mean(axis=0)
    gen = lab_rng.generator(seed, 21)
    thetas = np.tile(theta, (budget, 1))
    u = gen.random((depth, budget, kernel.n_uniform))
    z = gen.standard_normal((depth, budget, kernel.n_normal))
    values = []
    for point in q:
        xs = as_state_batch(kernel, point, budget)
        acc = _evaluate_h(f, xs).mean(axis=0) - pi_f
        for t in range(depth - 1):
            xs = kernel.step(thetas, xs, u[t], z[t])
            acc = acc + _evaluate_h(f, xs).mean(axis=0) - pi_f
        values.append(acc)
    values = np.stack(values)
    spread = float(np.ptp(_evaluate_h(f, stationary.reshape((-1,) + stationary.shape[2:])), axis=0).max())
    tail = spread * (1 - rho_hat) ** depth / rho_hat if contracting else None
    return PoissonSolution(values, None, None, depth, tail, q, contracting)


# --- Gateaux derivative --------------------------------------------------------------------


@dataclass
class GateauxOperator:
    """Lambda*[u](x) = lambda_star[x] @ u; lambda_bar = E_pi[lambda_star]."""

    lambda_star: np.ndarray  # (n_points, d_out, d)
    lambda_bar: np.ndarray  # (d_out, d)
    fd_step_used: tuple[float, float]
    richardson_error: float
    estimated: bool = False
    differentiable: bool = True
    warnings: list[str] = field(default_factory=list)

    def apply(self, u) -> np.ndarray:
        return self.lambda_star @ np.asarray(u, dtype=float)


def _image_fn(kernel, g_hat, query_points, budget, seed) -> Callable[[np.ndarray], np.ndarray]:
    if kernel.is_finite:
        values, _ = _as_columns(g_hat.values if isinstance(g_hat, PoissonSolution) else g_hat)
        return lambda th: transition_matrix(kernel, th) @ values
    if not callable(g_hat):
        raise ConfigurationError("g_hat", "continuous kernels need a callable g_hat")

    def image(th):
        out = apply_kernel(kernel, th, g_hat, budget, query_points, seed)
        return out[:, None] if out.ndim == 1 else out

    return image


def gateaux_derivative(
    kernel: ControlledKernel,
    theta_star,
    g_hat,
    fd_steps: tuple[float, float] = DEFAULT_FD_STEPS,
    tol: float = 1e-6,
    query_points=None,
    budget: int | None = None,
    seed: int = 0,
    weights=None,
) -> GateauxOperator:
    """Coordinate-wise central differences of theta -> P_theta g_hat with one Richardson level.

    For finite kernels the average uses pi_{theta*}; for continuous kernels
    it uses ``weights`` over the query points (uniform when omitted).
    """
    theta = check_theta(theta_star)
    t1, t2 = (float(t) for t in fd_steps)
    if not (t1 > 0 and t2 > 0 and t1 != t2):
        raise ConfigurationError("fd_steps", "need two distinct positive steps")
    image = _image_fn(kernel, g_hat, query_points, budget, seed)
    d = theta.size
    cols, worst, warnings = [], 0.0, []
    differentiable = True
    ratio2 = (t1 / t2) ** 2
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        d1 = (image(theta + t1 * e) - image(theta - t1 * e)) / (2 * t1)
        d2 = (image(theta + t2 * e) - image(theta - t2 * e)) / (2 * t2)
        refined = d2 + (d2 - d1) / (ratio2 - 1)
        err = float(np.abs(refined - d2).max())
        worst = max(worst, err)
        if err > 10 * tol:
            differentiable = False
            msg = f"Richardson error {err:.3e} in direction e_{j} exceeds 10x tolerance; P_theta g_hat may not be differentiable"
            logger.warning(msg)
            warnings.append(msg)
        cols.append(refined)
    tensor = np.stack(cols, axis=-1)
    if kernel.is_finite:
        w = stationary_distribution(transition_matrix(kernel, theta))
    else:
        w = np.full(len(tensor), 1.0 / len(tensor)) if weights is None else np.asarray(weights, dtype=float)
    lambda_bar = np.einsum("n,nij->ij", w, tensor)
    return GateauxOperator(tensor, lambda_bar, (t1, t2), worst, not kernel.is_finite, differentiable, warnings)


# --- remainder scan -------------------------------------------------------------------------


@dataclass(frozen=True)
class WDRemainderReport:
    radii: list[float]
    sup_remainders: list[float]
    fitted_exponent: float | None
    c_wd_hat: float
    exact: bool
    violation: bool

    def to_record(self) -> dict:
        return {
            "radii": list(self.radii),
            "sup_remainders": list(self.sup_remainders),
            "fitted_exponent": self.fitted_exponent,
            "c_wd_hat": self.c_wd_hat,
            "exact": self.exact,
            "violation": self.violation,
        }

    def log_rows(self) -> list[tuple[float, float]]:
        return [(math.log(r), math.log(v)) for r, v in zip(self.radii, self.sup_remainders) if v > EXACT_ZERO]


def scan_directions(d: int, n_random: int = 8, seed: int = 0) -> np.ndarray:
    gen = lab_rng.generator(seed, 30)
    rand = gen.standard_normal((n_random, d))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    return np.vstack([rand, np.eye(d)])


def wd_remainder_scan(
    kernel: ControlledKernel,
    theta_star,
    g_hat,
    lam: GateauxOperator,
    radii=DEFAULT_RADII,
    n_directions: int = 8,
    seed: int = 0,
    query_points=None,
    budget: int | None = None,
) -> WDRemainderReport:
    """sup-norm of (P_{theta*+r u} - P_{theta*}) g_hat - Lambda*[r u] over directions u, for each radius r."""
    radii = [float(r) for r in radii]
    if len(radii) < 2 or any(b >= a for a, b in zip(radii, radii[1:])) or radii[-1] <= 0:
        raise ConfigurationError("radii", "need at least two positive, strictly decreasing radii")
    theta = check_theta(theta_star)
    image = _image_fn(kernel, g_hat, query_points, budget, seed)
    base = image(theta)
    dirs = scan_directions(theta.size, n_directions, seed)
    remainders = []
    for r in radii:
        worst = 0.0
        for u in dirs:
            diff = image(theta + r * u) - base - lam.apply(r * u)
            worst = max(worst, float(np.abs(diff).max()))
        remainders.append(worst)

    positive = [(r, v) for r, v in zip(radii, remainders) if v > EXACT_ZERO]
    exact = len(positive) == 0
    exponent = None
    if len(positive) >= 2:
        lr, lv = np.log([p[0] for p in positive]), np.log([p[1] for p in positive])
        exponent = float(np.polyfit(lr, lv, 1)[0])
    violation = exponent is not None and exponent < WD_VIOLATION_EXPONENT
    if violation:
        logger.warning("remainder exponent %.3f below %.1f: local quadratic expansion fails", exponent, WD_VIOLATION_EXPONENT)
    c_wd = max(v / (r * r) for r, v in zip(radii, remainders))
    return WDRemainderReport(radii, remainders, exponent, float(c_wd), exact, violation)


# --- bias-equation operators ------------------------------------------------------------------


@dataclass(frozen=True)
class BiasOperator:
    matrix: np.ndarray
    min_singular_value: float
    invertible: bool


def bias_operator(lambda_bar, jacobian, threshold: float = 1e-8) -> BiasOperator:
    """Lambda_bar + J with its smallest singular value and an invertibility verdict."""
    lb = np.atleast_2d(np.asarray(lambda_bar, dtype=float))
    jac = np.atleast_2d(np.asarray(jacobian, dtype=float))
    if lb.shape != jac.shape or lb.shape[0] != lb.shape[1]:
        raise ConfigurationError("jacobian", f"dimension mismatch {lb.shape} vs {jac.shape}")
    total = lb + jac
    smin = float(np.linalg.svd(total, compute_uv=False).min())
    return BiasOperator(total, smin, smin > threshold)


@dataclass(frozen=True)
class OperatorBounds:
    l_ph0: float
    lipschitz_image: float


def poisson_operator_bounds(kernel: ControlledKernel, theta_star, g_hat, theta_grid) -> OperatorBounds:
    """Empirical sup of ||g_hat|| and ||P_theta g_hat|| over a grid, and the Lipschitz ratio of theta -> P_theta g_hat."""
    if not kernel.is_finite:
        raise UnsupportedOperationError(f"{kernel.name}: operator bounds need a finite kernel")
    values, _ = _as_columns(g_hat.values if isinstance(g_hat, PoissonSolution) else g_hat)
    grid = np.asarray(theta_grid, dtype=float)
    grid = grid[:, None] if grid.ndim == 1 else grid
    images = [transition_matrix(kernel, t) @ values for t in grid]
    l0 = max(float(np.linalg.norm(values, axis=1).max()), *(float(np.linalg.norm(im, axis=1).max()) for im in images))
    lip = 0.0
    for i, j in itertools.combinations(range(len(grid)), 2):
        gap = float(np.linalg.norm(grid[i] - grid[j]))
        if gap > 0:
            lip = max(lip, float(np.linalg.norm(images[i] - images[j], axis=1).max()) / gap)
    return OperatorBounds(l0, lip)
