"""Decision-dependent Markov kernels P_theta behind one sampling interface.

All kernels work on replica batches: ``theta`` is (R, d), a finite-state
batch is an int array (R,), a continuous batch is (R, state_dim). Random
draws are always passed in, so kernels hold no generator state and are safe
to share between threads.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, ClassVar, Protocol

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from . import rng as lab_rng
from .compiled import FINITE2, KernelCode
from .errors import ConfigurationError, ErgodicityError, NumericalError

logger = logging.getLogger(__name__)

ParamVector = NDArray[np.float64]

ROW_TOL = 1e-12
STATIONARY_TOL = 1e-12


@dataclass(frozen=True)
class Draws:
    """Primitive draws for one transition (or a batch of them)."""

    uniform: np.ndarray
    normal: np.ndarray


class ControlledKernel(Protocol):
    name: str
    n_uniform: int
    n_normal: int
    is_finite: bool
    state_dim: int

    def step(self, theta: np.ndarray, x: np.ndarray, uniform: np.ndarray, normal: np.ndarray) -> np.ndarray: ...

    def distance(self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    def probe_states(self, gen: np.random.Generator, n: int) -> np.ndarray: ...

    def initial_state(self, replicas: int) -> np.ndarray: ...

    def diameter(self) -> float: ...


def check_theta(theta, field: str = "theta") -> np.ndarray:
    arr = np.asarray(theta, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if np.isnan(arr).any():
        raise ConfigurationError(field, "contains NaN")
    return arr


def _per_replica(value, n: int, field: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    try:
        return np.broadcast_to(arr, (n,))
    except ValueError as exc:
        raise ConfigurationError(field, f"returned shape {arr.shape}, expected ({n},)") from exc


def _check_rows(rows: np.ndarray, field: str = "row_builder") -> None:
    if (rows < 0).any():
        raise ConfigurationError(field, "transition row has negative entries")
    dev = np.abs(rows.sum(axis=-1) - 1.0)
    if dev.max(initial=0.0) > ROW_TOL:
        raise ConfigurationError(field, f"transition row sums deviate from 1 by {dev.max():.3e}")


def discrete_metric(n_states: int) -> np.ndarray:
    return 1.0 - np.eye(n_states)


# --- finite chains ---------------------------------------------------------------


@dataclass(frozen=True)
class FiniteKernelFamily:
    """P_theta on {0, ..., n_states-1}.

    ``row_builder`` maps theta of shape (..., d) to matrices (..., n, n); a
    builder that ignores the batch axes and returns one (n, n) matrix is
    broadcast.
    """

    n_states: int
    row_builder: Callable[[np.ndarray], np.ndarray]
    state_metric: np.ndarray | None = None
    name: str = "finite"
    compiled: KernelCode | None = field(default=None, compare=False, repr=False)

    n_uniform: ClassVar[int] = 1
    n_normal: ClassVar[int] = 0
    is_finite: ClassVar[bool] = True
    state_dim: ClassVar[int] = 0

    def __post_init__(self) -> None:
        if int(self.n_states) < 1:
            raise ConfigurationError("n_states", "must be a positive integer")
        n = int(self.n_states)
        metric = discrete_metric(n) if self.state_metric is None else np.asarray(self.state_metric, dtype=float)
        if metric.shape != (n, n):
            raise ConfigurationError("state_metric", f"shape {metric.shape}, expected {(n, n)}")
        if not np.allclose(metric, metric.T, atol=1e-12) or np.abs(np.diag(metric)).max() > 0 or (metric < 0).any():
            raise ConfigurationError("state_metric", "must be symmetric, non-negative with zero diagonal")
        if (metric[:, None, :] > metric[:, :, None] + metric[None, :, :] + 1e-12).any():
            raise ConfigurationError("state_metric", "violates the triangle inequality")
        object.__setattr__(self, "state_metric", metric)

    def rows(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        n = self.n_states
        target = theta.shape[:-1] + (n, n)
        out = np.asarray(self.row_builder(theta), dtype=float)
        if out.shape != target:
            if out.shape != (n, n):
                raise ConfigurationError("row_builder", f"returned shape {out.shape}, expected {target}")
            out = np.broadcast_to(out, target)
        return out

    def step(self, theta, x, uniform, normal):
        rows = self.rows(theta)[np.arange(x.shape[0]), x]
        _check_rows(rows)
        cum = np.cumsum(rows, axis=-1)
        nxt = np.count_nonzero(uniform[:, :1] >= cum, axis=-1)
        return np.minimum(nxt, self.n_states - 1)

    def distance(self, x, y):
        return self.state_metric[x, y]

    def probe_states(self, gen, n):
        return gen.integers(0, self.n_states, size=n)

    def initial_state(self, replicas):
        return np.zeros(replicas, dtype=np.int64)

    def diameter(self) -> float:
        return float(self.state_metric.max())

    def states(self) -> np.ndarray:
        return np.arange(self.n_states)


def finite2_family(
    a0: float = 0.5,
    ka: float = 0.2,
    b0: float = 0.5,
    kb: float = 0.2,
    profile: str = "tanh",
    kink_at: float = 0.0,
) -> FiniteKernelFamily:
    """Two-state family with a(theta) = a0 + ka*s(theta), b(theta) = b0 - kb*s(theta).

    ``profile="tanh"`` uses s = tanh(theta_0); ``profile="kink"`` uses
    s = min(|theta_0 - kink_at|, 1), a Lipschitz family with a corner at
    ``kink_at``.
    """
    if profile not in ("tanh", "kink"):
        raise ConfigurationError("profile", f"unknown profile {profile!r}; expected 'tanh' or 'kink'")
    lo = 0.0 if profile == "kink" else -1.0
    for side, base, slope in (("a", a0, ka), ("b", b0, -kb)):
        ends = (base + slope * lo, base + slope)
        if min(ends) < 0 or max(ends) > 1:
            raise ConfigurationError(side, f"{side}(theta) leaves [0, 1] over the profile range")

    def builder(theta: np.ndarray) -> np.ndarray:
        t = np.asarray(theta, dtype=float)[..., 0]
        s = np.tanh(t) if profile == "tanh" else np.minimum(np.abs(t - kink_at), 1.0)
        a = a0 + ka * s
        b = b0 - kb * s
        P = np.empty(t.shape + (2, 2))
        P[..., 0, 0] = 1.0 - a
        P[..., 0, 1] = a
        P[..., 1, 0] = b
        P[..., 1, 1] = 1.0 - b
        return P

    code = KernelCode.build(FINITE2, [a0, ka, b0, kb, 0.0 if profile == "tanh" else 1.0, kink_at])
    return FiniteKernelFamily(2, builder, name="finite2", compiled=code)


def transition_matrix(family: FiniteKernelFamily, theta) -> np.ndarray:
    """Materialize P_theta, renormalizing rows only within ROW_TOL of 1."""
    theta = check_theta(theta)
    P = np.array(family.rows(theta), dtype=float)
    _check_rows(P)
    return P / P.sum(axis=1, keepdims=True)


def _require_primitive(P: np.ndarray) -> None:
    # Wielandt: a primitive n x n matrix has P^k > 0 for every k >= (n-1)^2 + 1.
    n = P.shape[0]
    needed = (n - 1) ** 2 + 1
    pattern = (P > 0).astype(float)
    power = 1
    while power < needed:
        pattern = ((pattern @ pattern) > 0).astype(float)
        power *= 2
    if not (pattern > 0).all():
        raise ErgodicityError("transition matrix is reducible or periodic; no unique invariant law")


def stationary_distribution(P) -> np.ndarray:
    """Solve pi P = pi, sum(pi) = 1 with the normalization row replacing one balance equation."""
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ConfigurationError("P", f"expected a square matrix, got shape {P.shape}")
    _check_rows(P, "P")
    _require_primitive(P)
    n = P.shape[0]
    A = (np.eye(n) - P).T
    A[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        pi = scipy.linalg.solve(A, rhs)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"stationary solve failed: {exc}") from exc
    if not np.isfinite(pi).all() or pi.min() < -1e-10:
        raise NumericalError("stationary solve produced an invalid probability vector")
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    residual = np.abs(pi @ P - pi).max()
    if residual > STATIONARY_TOL:
        raise NumericalError(f"stationary residual {residual:.3e} exceeds {STATIONARY_TOL:g}")
    return pi


# --- continuous-state kernels ------------------------------------------------------


@dataclass(frozen=True)
class ClippedARKernel:
    """x' = clip(rho*x + m(theta) + sigma(theta)*z, -C, C)."""

    rho: float
    m_fn: Callable[[np.ndarray], np.ndarray]
    sigma_fn: Callable[[np.ndarray], np.ndarray]
    clip_bound: float
    name: str = "clipped_ar"
    compiled: KernelCode | None = field(default=None, compare=False, repr=False)

    n_uniform: ClassVar[int] = 0
    n_normal: ClassVar[int] = 1
    is_finite: ClassVar[bool] = False
    state_dim: ClassVar[int] = 1

    def __post_init__(self) -> None:
        if not abs(self.rho) < 1:
            raise ConfigurationError("rho", "must satisfy |rho| < 1")
        if not self.clip_bound > 0:
            raise ConfigurationError("clip_bound", "must be positive")

    def step(self, theta, x, uniform, normal):
        n = x.shape[0]
        m = _per_replica(self.m_fn(theta), n, "m_fn")
        s = _per_replica(self.sigma_fn(theta), n, "sigma_fn")
        if (s < 0).any():
            raise ConfigurationError("sigma_fn", "noise scale must be non-negative")
        y = self.rho * x[:, 0] + m + s * normal[:, 0]
        return np.clip(y, -self.clip_bound, self.clip_bound)[:, None]

    def distance(self, x, y):
        return np.abs(x[..., 0] - y[..., 0])

    def probe_states(self, gen, n):
        return gen.uniform(-self.clip_bound, self.clip_bound, size=(n, 1))

    def initial_state(self, replicas):
        return np.zeros((replicas, 1))

    def diameter(self) -> float:
        return 2.0 * float(self.clip_bound)


@dataclass(frozen=True)
class ProjectedLangevinKernel:
    """x' = Pi_K(x - eta*grad U_theta(x) + sqrt(2 eta) z) on the box K = prod [lower_i, upper_i]."""

    eta: float
    grad_u: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    name: str = "proj_langevin"
    compiled: KernelCode | None = field(default=None, compare=False, repr=False)

    n_uniform: ClassVar[int] = 0
    is_finite: ClassVar[bool] = False

    def __post_init__(self) -> None:
        if not self.eta > 0:
            raise ConfigurationError("eta", "step size must be positive")
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape or not (lo < hi).all():
            raise ConfigurationError("box", "lower must be strictly below upper in every coordinate")
        object.__setattr__(self, "lower", tuple(lo.tolist()))
        object.__setattr__(self, "upper", tuple(hi.tolist()))

    @property
    def state_dim(self) -> int:
        return len(self.lower)

    @property
    def n_normal(self) -> int:
        return len(self.lower)

    def step(self, theta, x, uniform, normal):
        drift = x - self.eta * np.asarray(self.grad_u(theta, x), dtype=float)
        y = drift + math.sqrt(2.0 * self.eta) * normal
        return np.clip(y, self.lower, self.upper)

    def distance(self, x, y):
        return np.linalg.norm(x - y, axis=-1)

    def probe_states(self, gen, n):
        return gen.uniform(self.lower, self.upper, size=(n, self.state_dim))

    def initial_state(self, replicas):
        centre = 0.5 * (np.asarray(self.lower) + np.asarray(self.upper))
        return np.tile(centre, (replicas, 1))

    def diameter(self) -> float:
        return float(np.linalg.norm(np.asarray(self.upper) - np.asarray(self.lower)))


@dataclass(frozen=True)
class MHKernel:
    """Random-walk Metropolis-Hastings targeting exp(-U(x; theta)) with an isotropic Gaussian proposal.

    Every step consumes one uniform and ``dim`` normals whether or not the
    move is accepted, so coupled chains stay aligned on the draw stream.
    """

    potential: Callable[[np.ndarray, np.ndarray], np.ndarray]
    proposal_scale: float
    dim: int = 1
    probe_radius: float = 3.0
    name: str = "rw_mh"
    compiled: KernelCode | None = field(default=None, compare=False, repr=False)

    n_uniform: ClassVar[int] = 1
    is_finite: ClassVar[bool] = False

    def __post_init__(self) -> None:
        if not self.proposal_scale > 0:
            raise ConfigurationError("proposal_scale", "sigma_q must be positive")
        if int(self.dim) < 1:
            raise ConfigurationError("dim", "must be a positive integer")

    @property
    def state_dim(self) -> int:
        return int(self.dim)

    @property
    def n_normal(self) -> int:
        return int(self.dim)

    def acceptance_probability(self, theta, x, y) -> np.ndarray:
        log_ratio = np.asarray(self.potential(x, theta), float) - np.asarray(self.potential(y, theta), float)
        return np.exp(np.minimum(log_ratio, 0.0))

    def step(self, theta, x, uniform, normal):
        y = x + self.proposal_scale * normal
        accept = uniform[:, 0] < self.acceptance_probability(theta, x, y)
        return np.where(accept[:, None], y, x)

    def distance(self, x, y):
        return np.linalg.norm(x - y, axis=-1)

    def probe_states(self, gen, n):
        return gen.uniform(-self.probe_radius, self.probe_radius, size=(n, self.state_dim))

    def initial_state(self, replicas):
        return np.zeros((replicas, self.state_dim))

    def diameter(self) -> float:
        return 2.0 * self.probe_radius * math.sqrt(self.state_dim)


# --- sampling ------------------------------------------------------------------------


def as_state_batch(kernel: ControlledKernel, x, replicas: int) -> np.ndarray:
    if kernel.is_finite:
        arr = np.asarray(x, dtype=np.int64).reshape(-1)
        if arr.size == 1:
            arr = np.repeat(arr, replicas)
        if arr.shape != (replicas,) or arr.min() < 0 or arr.max() >= kernel.n_states:
            raise ConfigurationError("x", f"state outside 0..{kernel.n_states - 1} or wrong batch size")
        return arr
    arr = np.asarray(x, dtype=float)
    if arr.ndim <= 1 and arr.size == kernel.state_dim:
        arr = np.tile(arr.reshape(1, -1), (replicas, 1))
    if arr.shape != (replicas, kernel.state_dim):
        raise ConfigurationError("x", f"state batch shape {arr.shape}, expected {(replicas, kernel.state_dim)}")
    return arr


def _draw_block(values, rows: int, width: int, field: str) -> np.ndarray:
    arr = np.asarray(values if values is not None else np.empty(0), dtype=float)
    if arr.size != rows * width:
        raise ConfigurationError(field, f"expected {rows * width} primitive draws, got {arr.size}")
    return arr.reshape(rows, width)


def sample_next(kernel: ControlledKernel, theta, x, draw: Draws):
    """One transition X' ~ P_theta(x, .) driven by the supplied draws.

    A 1-D ``theta`` means a single chain; a 2-D ``theta`` is a replica batch.
    """
    theta = check_theta(theta)
    single = theta.ndim == 1
    theta_b = theta[None, :] if single else theta
    replicas = theta_b.shape[0]
    x_b = as_state_batch(kernel, x, replicas)
    u = _draw_block(draw.uniform, replicas, kernel.n_uniform, "draw.uniform")
    z = _draw_block(draw.normal, replicas, kernel.n_normal, "draw.normal")
    out = kernel.step(theta_b, x_b, u, z)
    if not single:
        return out
    if kernel.is_finite:
        return int(out[0])
    return float(out[0, 0]) if kernel.state_dim == 1 else out[0]


# --- diagnostics -----------------------------------------------------------------------


@dataclass(frozen=True)
class KernelDiagnostics:
    rho_hat: float
    lp_hat: float | None
    n_pairs: int
    ci_width: float
    diameter: float
    degenerate: bool = False
    contracting: bool = True


def _probe_pairs(kernel: ControlledKernel, gen: np.random.Generator, max_pairs: int):
    if kernel.is_finite:
        i, j = np.triu_indices(kernel.n_states, k=1)
        keep = kernel.state_metric[i, j] > 0
        i, j = i[keep], j[keep]
        if i.size > max_pairs:
            pick = np.sort(gen.choice(i.size, size=max_pairs, replace=False))
            i, j = i[pick], j[pick]
        return i, j
    xs = kernel.probe_states(gen, 2 * max_pairs)
    a, b = xs[:max_pairs], xs[max_pairs:]
    keep = kernel.distance(a, b) > 0
    return a[keep], b[keep]


def estimate_contraction(kernel: ControlledKernel, theta, n_pairs: int, rng_seed: int, max_pairs: int = 16) -> KernelDiagnostics:
    """rho_hat = 1 - max over probe pairs of the mean synchronously coupled one-step distance ratio."""
    if n_pairs < 100:
        raise ConfigurationError("n_pairs", "must be at least 100")
    theta = check_theta(theta)
    gen = lab_rng.generator(rng_seed, 1)
    xa, xb = _probe_pairs(kernel, gen, max_pairs)
    if len(xa) == 0:
        logger.warning("%s: state space is a single point; contraction is trivial", kernel.name)
        return KernelDiagnostics(1.0, None, 0, 0.0, kernel.diameter(), degenerate=True)

    k = len(xa)
    per_pair = math.ceil(n_pairs / k)
    idx = np.repeat(np.arange(k), per_pair)
    thetas = np.tile(theta, (idx.size, 1))
    u = gen.random((idx.size, kernel.n_uniform))
    z = gen.standard_normal((idx.size, kernel.n_normal))
    na = kernel.step(thetas, xa[idx], u, z)
    nb = kernel.step(thetas, xb[idx], u, z)
    ratios = (kernel.distance(na, nb) / kernel.distance(xa, xb)[idx]).reshape(k, per_pair)
    mean_ratio = ratios.mean(axis=1)
    worst = int(np.argmax(mean_ratio))
    se = ratios[worst].std(ddof=1) / math.sqrt(per_pair) if per_pair > 1 else 0.0
    rho_hat = 1.0 - float(mean_ratio[worst])
    contracting = rho_hat > 0
    if not contracting:
        logger.warning("%s: coupled distances expand (ratio %.3f); no contraction certificate", kernel.name, 1 - rho_hat)
    return KernelDiagnostics(
        rho_hat=max(rho_hat, 0.0),
        lp_hat=None,
        n_pairs=int(idx.size),
        ci_width=float(2 * 1.96 * se),
        diameter=kernel.diameter(),
        contracting=contracting,
    )


def estimate_sensitivity(kernel: ControlledKernel, x, theta, theta_prime, n_samples: int = 2000, rng_seed: int = 0) -> float:
    """Mean common-draw coupled distance between P_theta(x,.) and P_theta'(x,.) per unit ||theta - theta'||."""
    theta = check_theta(theta)
    theta_prime = check_theta(theta_prime, "theta_prime")
    gap = float(np.linalg.norm(theta - theta_prime))
    if gap == 0:
        raise ConfigurationError("theta_prime", "must differ from theta")
    if n_samples < 1:
        raise ConfigurationError("n_samples", "must be positive")
    gen = lab_rng.generator(rng_seed, 2)
    xs = as_state_batch(kernel, x, n_samples)
    u = gen.random((n_samples, kernel.n_uniform))
    z = gen.standard_normal((n_samples, kernel.n_normal))
    a = kernel.step(np.tile(theta, (n_samples, 1)), xs, u, z)
    b = kernel.step(np.tile(theta_prime, (n_samples, 1)), xs, u, z)
    return float(kernel.distance(a, b).mean() / gap)


def diagnose_kernel(
    kernel: ControlledKernel,
    theta,
    theta_prime=None,
    n_pairs: int = 2000,
    rng_seed: int = 0,
    probe_points: int = 8,
) -> KernelDiagnostics:
    """Contraction plus the worst sensitivity ratio over a few probe states."""
    theta = check_theta(theta)
    diag = estimate_contraction(kernel, theta, n_pairs, rng_seed)
    if theta_prime is None:
        theta_prime = theta + 1e-1
    gen = lab_rng.generator(rng_seed, 3)
    starts = kernel.states() if kernel.is_finite else kernel.probe_states(gen, probe_points)
    lp = max(
        estimate_sensitivity(kernel, starts[i], theta, theta_prime, n_samples=max(n_pairs // 4, 100), rng_seed=rng_seed + i)
        for i in range(len(starts))
    )
    return replace(diag, lp_hat=lp)
