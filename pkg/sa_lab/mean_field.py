"""Mean field gbar(theta) = E_{pi_theta}[g(theta, X)], its root and Jacobians."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from . import rng as lab_rng
from .compiled import MapCode
from .controlled_kernels import (
    ControlledKernel,
    as_state_batch,
    check_theta,
    stationary_distribution,
    transition_matrix,
)
from .errors import ConfigurationError, ConvergenceError, UnsupportedOperationError

logger = logging.getLogger(__name__)

EXACT_TOL = 1e-10
MC_TOL = 1e-4
MC_CHAINS = 16
MC_BURN_IN = 1000
DEFAULT_MC_BUDGET = 200_000


@dataclass(frozen=True)
class UpdateMap:
    """g(theta, x) evaluated on batches: theta (N, d), x a state batch of length N, result (N, d)."""

    g: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dim: int
    lipschitz_hint: float | None = None
    monotonicity_hint: float | None = None
    name: str = "custom"
    jacobian_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    hessian_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    compiled: MapCode | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if int(self.dim) < 1:
            raise ConfigurationError("dim", "must be a positive integer")
        for hint in ("lipschitz_hint", "monotonicity_hint"):
            value = getattr(self, hint)
            if value is not None and not value > 0:
                raise ConfigurationError(hint, "hint must be positive when given")

    def evaluate(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        out = np.asarray(self.g(theta, x), dtype=float)
        if out.shape != theta.shape:
            raise ConfigurationError("g", f"returned shape {out.shape}, expected {theta.shape}")
        if not np.isfinite(out).all():
            raise ConfigurationError("g", "returned non-finite values")
        return out


@dataclass(frozen=True)
class MeanFieldEstimate:
    value: np.ndarray
    std_error: np.ndarray
    method: Literal["exact_pi", "mc_pi"]
    samples: int


@dataclass(frozen=True)
class JacobianEstimate:
    matrix: np.ndarray
    error: float
    fd_step: float


@dataclass(frozen=True)
class RootCertificate:
    theta_star: np.ndarray
    residual: float
    jacobian: np.ndarray
    method: Literal["exact_pi", "mc_pi"]
    iterations: int
    jacobian_error: float
    monotonicity_ok: bool | None = None


def _tile(theta: np.ndarray, n: int) -> np.ndarray:
    return np.tile(theta, (n, 1))


def stationary_samples(
    kernel: ControlledKernel,
    theta,
    n_samples: int,
    seed: int = 0,
    burn_in: int = MC_BURN_IN,
    chains: int = MC_CHAINS,
) -> np.ndarray:
    """States of ``chains`` frozen-theta chains after burn-in, laid out (per_chain, chains, ...)."""
    if n_samples is None or n_samples <= 0:
        raise ConfigurationError("budget", "budget must be positive")
    theta = check_theta(theta)
    per_chain = math.ceil(n_samples / chains)
    gen = lab_rng.generator(seed, 10)
    thetas = _tile(theta, chains)
    x = kernel.initial_state(chains)
    out = np.empty((per_chain,) + x.shape, dtype=x.dtype)
    for k in range(burn_in + per_chain):
        u = gen.random((chains, kernel.n_uniform))
        z = gen.standard_normal((chains, kernel.n_normal))
        x = kernel.step(thetas, x, u, z)
        if k >= burn_in:
            out[k - burn_in] = x
    return out


def _flatten_states(states: np.ndarray) -> np.ndarray:
    return states.reshape((-1,) + states.shape[2:])


def stationary_law(kernel: ControlledKernel, theta) -> np.ndarray:
    """pi_theta for a finite kernel."""
    if not kernel.is_finite:
        raise UnsupportedOperationError(f"{kernel.name}: exact stationary law needs a finite kernel")
    return stationary_distribution(transition_matrix(kernel, theta))


def mean_field_eval(
    update: UpdateMap,
    kernel: ControlledKernel,
    theta,
    budget: int | None = None,
    seed: int = 0,
) -> MeanFieldEstimate:
    """Exact sum over pi_theta for finite kernels, long-run frozen-theta average otherwise.

    The Monte Carlo path reuses the same draws for every theta, so nearby
    evaluations are positively correlated and finite differences stay usable.
    """
    theta = check_theta(theta)
    if kernel.is_finite:
        pi = stationary_law(kernel, theta)
        table = update.evaluate(_tile(theta, kernel.n_states), kernel.states())
        return MeanFieldEstimate(pi @ table, np.zeros(update.dim), "exact_pi", kernel.n_states)
    if budget is None:
        budget = DEFAULT_MC_BUDGET
    states = stationary_samples(kernel, theta, budget, seed)
    per_chain, chains = states.shape[:2]
    values = update.evaluate(_tile(theta, per_chain * chains), _flatten_states(states))
    chain_means = values.reshape(per_chain, chains, update.dim).mean(axis=0)
    se = chain_means.std(axis=0, ddof=1) / math.sqrt(chains)
    return MeanFieldEstimate(chain_means.mean(axis=0), se, "mc_pi", per_chain * chains)


def _gbar(update, kernel, theta, budget, seed) -> np.ndarray:
    return mean_field_eval(update, kernel, theta, budget, seed).value


def _central_jacobian(fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, h: float) -> np.ndarray:
    d = theta.size
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        cols.append((fn(theta + e) - fn(theta - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def jacobian_at(
    update: UpdateMap,
    kernel: ControlledKernel,
    theta_star,
    fd_step: float | None = None,
    budget: int | None = None,
    seed: int = 0,
) -> JacobianEstimate:
    """Total derivative gbar'(theta) by central differences with one Richardson level.

    The error estimate is the change between the refined value and the
    half-step difference.
    """
    theta = check_theta(theta_star)
    h = 1e-4 * (1 + float(np.linalg.norm(theta))) if fd_step is None else float(fd_step)
    if not h > 0:
        raise ConfigurationError("fd_step", "must be positive")
    fn = lambda t: _gbar(update, kernel, t, budget, seed)  # noqa: E731
    coarse = _central_jacobian(fn, theta, h)
    fine = _central_jacobian(fn, theta, h / 2)
    refined = (4 * fine - coarse) / 3
    error = float(np.abs(refined - fine).max())
    return JacobianEstimate(refined, error, h)


def find_root(
    update: UpdateMap,
    kernel: ControlledKernel,
    theta0,
    tol: float | None = None,
    max_iters: int = 500,
    step: float | None = None,
    budget: int | None = None,
    seed: int = 0,
    fd_step: float | None = None,
) -> RootCertificate:
    """Damped mean-field iteration theta <- theta + eta * gbar(theta).

    With both hints the step is mu / L1**2 and is kept fixed; otherwise the
    step starts at ``step`` (default 1) and is halved until ||gbar|| drops.
    """
    theta = check_theta(theta0).copy()
    method = "exact_pi" if kernel.is_finite else "mc_pi"
    tol = (EXACT_TOL if kernel.is_finite else MC_TOL) if tol is None else float(tol)
    backtrack = True
    if step is None and update.monotonicity_hint and update.lipschitz_hint:
        step = update.monotonicity_hint / update.lipschitz_hint**2
        backtrack = False
    step = 1.0 if step is None else float(step)
    if not step > 0:
        raise ConfigurationError("step", "damped-iteration step must be positive")

    g = _gbar(update, kernel, theta, budget, seed)
    residual = float(np.linalg.norm(g))
    iterations = 0
    while residual > tol:
        if iterations >= max_iters:
            raise ConvergenceError("find_root: max_iters exhausted", residual, iterations)
        eta = step
        candidate = theta + eta * g
        g_c = _gbar(update, kernel, candidate, budget, seed)
        r_c = float(np.linalg.norm(g_c))
        halvings = 0
        while backtrack and not r_c < residual and halvings < 40:
            eta *= 0.5
            candidate = theta + eta * g
            g_c = _gbar(update, kernel, candidate, budget, seed)
            r_c = float(np.linalg.norm(g_c))
            halvings += 1
        if backtrack and not r_c < residual:
            raise ConvergenceError("find_root: backtracking could not reduce the residual", residual, iterations)
        if not np.isfinite(r_c):
            raise ConvergenceError("find_root: iteration diverged", residual, iterations)
        theta, g, residual = candidate, g_c, r_c
        iterations += 1
        logger.debug("find_root iter %d residual %.3e eta %.3g", iterations, residual, eta)

    jac = jacobian_at(update, kernel, theta, fd_step, budget, seed)
    monotone = None
    if update.monotonicity_hint is not None:
        sym = 0.5 * (jac.matrix + jac.matrix.T)
        monotone = bool(np.linalg.eigvalsh(sym).max() <= -update.monotonicity_hint + 1e-6)
        if not monotone:
            logger.warning("root %s: Jacobian symmetric part violates the monotonicity hint %.3g", theta, update.monotonicity_hint)
    logger.info("root found theta*=%s residual=%.3e after %d iterations (%s)", np.array2string(theta, precision=10), residual, iterations, method)
    return RootCertificate(theta, residual, jac.matrix, method, iterations, jac.error, monotone)


# --- per-state derivatives of g --------------------------------------------------------


def map_jacobian(update: UpdateMap, theta, xs: np.ndarray, fd_step: float = 1e-5) -> np.ndarray:
    """g'(theta, x) for each x in ``xs``, shape (N, d, d); central differences unless the map is analytic."""
    theta = check_theta(theta)
    n = len(xs)
    if update.jacobian_fn is not None:
        return np.asarray(update.jacobian_fn(_tile(theta, n), xs), dtype=float).reshape(n, theta.size, theta.size)
    fn = lambda t: update.evaluate(_tile(t, n), xs)  # noqa: E731
    return _central_jacobian(fn, theta, fd_step)


def map_hessian(update: UpdateMap, theta, xs: np.ndarray, fd_step: float | None = None) -> np.ndarray:
    """g''(theta, x) with entry [n, i, j, k] = d^2 g_i / d theta_j d theta_k, shape (N, d, d, d)."""
    theta = check_theta(theta)
    n, d = len(xs), theta.size
    if update.hessian_fn is not None:
        return np.asarray(update.hessian_fn(_tile(theta, n), xs), dtype=float).reshape(n, d, d, d)
    out = np.empty((n, d, d, d))
    h = 1e-3 * (1 + float(np.linalg.norm(theta))) if fd_step is None else float(fd_step)
    f = lambda t: update.evaluate(_tile(t, n), xs)  # noqa: E731
    for j, k in itertools.product(range(d), repeat=2):
        ej = np.zeros(d)
        ek = np.zeros(d)
        ej[j] = h
        ek[k] = h
        out[:, :, j, k] = (f(theta + ej + ek) - f(theta + ej - ek) - f(theta - ej + ek) + f(theta - ej - ek)) / (4 * h * h)
    return out


def local_jacobian(
    update: UpdateMap,
    kernel: ControlledKernel,
    theta,
    budget: int | None = None,
    seed: int = 0,
    fd_step: float = 1e-5,
) -> np.ndarray:
    """E_{pi_theta}[g'(theta, X)] with the law frozen at theta."""
    theta = check_theta(theta)
    if kernel.is_finite:
        pi = stationary_law(kernel, theta)
        return np.einsum("n,nij->ij", pi, map_jacobian(update, theta, kernel.states(), fd_step))
    states = _flatten_states(stationary_samples(kernel, theta, budget or DEFAULT_MC_BUDGET, seed))
    return map_jacobian(update, theta, states, fd_step).mean(axis=0)


def expected_hessian(update: UpdateMap, kernel: ControlledKernel, theta, budget: int | None = None, seed: int = 0) -> np.ndarray:
    theta = check_theta(theta)
    if kernel.is_finite:
        pi = stationary_law(kernel, theta)
        return np.einsum("n,nijk->ijk", pi, map_hessian(update, theta, kernel.states()))
    states = _flatten_states(stationary_samples(kernel, theta, budget or DEFAULT_MC_BUDGET, seed))
    return map_hessian(update, theta, states).mean(axis=0)


# --- monotonicity ------------------------------------------------------------------------


def _grid(theta_grid, dim: int) -> np.ndarray:
    grid = np.asarray(theta_grid, dtype=float)
    if grid.ndim == 1 and dim == 1:
        grid = grid[:, None]
    if grid.ndim != 2 or grid.shape[1] != dim or len(grid) < 2:
        raise ConfigurationError("theta_grid", f"need at least two points of dimension {dim}")
    return grid


def _min_pair_ratio(grid: np.ndarray, values: np.ndarray) -> float:
    worst = math.inf
    for i, j in itertools.combinations(range(len(grid)), 2):
        diff = grid[i] - grid[j]
        norm2 = float(diff @ diff)
        if norm2 == 0:
            continue
        ratio = -float(diff @ (values[i] - values[j])) / norm2
        worst = min(worst, ratio)
    return worst


def monotonicity_constant(update: UpdateMap, kernel: ControlledKernel, theta_grid, budget: int | None = None, seed: int = 0) -> float:
    """Largest mu with <t - t', gbar(t) - gbar(t')> <= -mu ||t - t'||^2 on every grid pair."""
    grid = _grid(theta_grid, update.dim)
    values = np.stack([_gbar(update, kernel, t, budget, seed) for t in grid])
    return _min_pair_ratio(grid, values)


def conditional_monotonicity_constant(
    update: UpdateMap,
    kernel: ControlledKernel,
    theta_grid,
    n_samples: int = 4000,
    seed: int = 0,
    probe_points: int = 8,
) -> float:
    """Same pairwise bound for the one-step conditional mean E_{X ~ P_theta(x,.)}[g(theta, X)], worst over x.

    Finite kernels are enumerated exactly; continuous kernels use common
    draws at a handful of probe states.
    """
    grid = _grid(theta_grid, update.dim)
    if kernel.is_finite:
        table = np.stack([update.evaluate(_tile(t, kernel.n_states), kernel.states()) for t in grid])
        mats = np.stack([transition_matrix(kernel, t) for t in grid])
        cond = np.einsum("gxy,gyd->xgd", mats, table)
        return min(_min_pair_ratio(grid, cond[x]) for x in range(kernel.n_states))
    gen = lab_rng.generator(seed, 11)
    starts = kernel.probe_states(gen, probe_points)
    u = gen.random((n_samples, kernel.n_uniform))
    z = gen.standard_normal((n_samples, kernel.n_normal))
    worst = math.inf
    for s in range(probe_points):
        xs = as_state_batch(kernel, starts[s], n_samples)
        cond = []
        for t in grid:
            thetas = _tile(t, n_samples)
            cond.append(update.evaluate(thetas, kernel.step(thetas, xs, u, z)).mean(axis=0))
        worst = min(worst, _min_pair_ratio(grid, np.stack(cond)))
    return worst
