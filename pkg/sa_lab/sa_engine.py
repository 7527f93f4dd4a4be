"""Constant-stepsize SA on a decision-dependent chain, moment accumulation and coupled pairs.

One step is ``X_{k+1} ~ P_{theta_k}(X_k, .)`` followed by
``theta_{k+1} = theta_k + alpha * (g(theta_k, X_{k+1}) + xi_{k+1})``.

Replicas are simulated in fixed-size blocks. Built-in kernels and maps run
each chunk of steps in compiled code (see ``compiled``); anything else takes
the numpy step with the time loop in Python. Every replica draws from its own
splittable streams, so block scheduling and thread count never change a
result.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import compiled
from . import rng as lab_rng
from .controlled_kernels import ControlledKernel, as_state_batch, check_theta
from .errors import ConfigurationError, DivergenceError, EmptyAccumulatorError
from .mean_field import UpdateMap

logger = logging.getLogger(__name__)

CHUNK_STEPS = 2048
DIVERGENCE_FACTOR = 1e6
DEFAULT_BURN_IN_SAFETY = 20 * math.log(10)


class NoiseSpec(BaseModel):
    """Additive martingale noise xi: none, isotropic Gaussian, or Gaussian scaled by (1 + ||theta||)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["none", "gaussian", "theta_scaled"] = "none"
    scale: float = Field(default=0.0, ge=0.0)

    def apply(self, theta: np.ndarray, z: np.ndarray) -> np.ndarray:
        if self.kind == "none" or self.scale == 0.0:
            return np.zeros_like(theta)
        if self.kind == "gaussian":
            return self.scale * z
        return self.scale * (1.0 + np.linalg.norm(theta, axis=-1, keepdims=True)) * z


class SAConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    alpha: float = Field(gt=0.0, le=1.0)
    n_steps: int = Field(gt=0)
    burn_in: int = Field(default=0, ge=0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    noise: NoiseSpec = NoiseSpec()
    replica_count: int = Field(default=1, ge=1)
    thin: int = Field(default=0, ge=0)
    moment_order: int = Field(default=2, ge=1, le=8)
    record_series: int = Field(default=0, ge=0)
    block_size: int = Field(default=16, ge=1)
    stream_id: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _burn_in_below_horizon(self) -> "SAConfig":
        if self.burn_in >= self.n_steps:
            raise ValueError(f"burn_in ({self.burn_in}) must be smaller than n_steps ({self.n_steps})")
        return self

    @property
    def n_post(self) -> int:
        return self.n_steps - self.burn_in


def default_threads() -> int:
    return max(1, int(os.getenv("SA_LAB_THREADS", "1")))


# --- forgetting-rate helpers -----------------------------------------------------------


def forgetting_rate(alpha: float, mu_bar_g: float, rho: float) -> float:
    """tau(alpha) = min(mu_bar_g * alpha / 8, rho / 4)."""
    if not (alpha > 0 and mu_bar_g > 0 and rho > 0):
        raise ConfigurationError("forgetting_rate", "alpha, mu_bar_g and rho must be positive")
    return min(mu_bar_g * alpha / 8.0, rho / 4.0)


def recommended_burn_in(alpha: float, mu_bar_g: float, rho: float, safety: float = DEFAULT_BURN_IN_SAFETY) -> int:
    return math.ceil(safety / forgetting_rate(alpha, mu_bar_g, rho))


@dataclass(frozen=True)
class SensitivityCheck:
    lp: float
    bound: float
    satisfied: bool


def sensitivity_condition(lp: float, rho: float, mu_bar_g: float, l1: float) -> SensitivityCheck:
    """L_P <= rho^2 mu_bar_g^2 / (128 L1^2 (2 - rho)), the coupling condition for joint-chain forgetting."""
    if not (0 < rho <= 1 and mu_bar_g > 0 and l1 > 0):
        raise ConfigurationError("sensitivity_condition", "need 0 < rho <= 1 and positive mu_bar_g, L1")
    bound = rho**2 * mu_bar_g**2 / (128.0 * l1**2 * (2.0 - rho))
    ok = lp <= bound
    if not ok:
        logger.warning("kernel sensitivity %.4g exceeds the coupling bound %.4g", lp, bound)
    return SensitivityCheck(float(lp), float(bound), bool(ok))


# --- moments -----------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentAccumulator:
    """Running sums of Delta = theta - reference; merging adds sums, so it is associative."""

    alpha: float
    reference: np.ndarray
    count: int
    sum_delta: np.ndarray
    sum_outer: np.ndarray
    power_sums: np.ndarray  # sum ||Delta||^(2j), j = 1..order

    @property
    def order(self) -> int:
        return len(self.power_sums)

    @classmethod
    def empty(cls, alpha: float, reference, order: int = 2) -> "MomentAccumulator":
        ref = np.asarray(reference, dtype=float).reshape(-1)
        d = ref.size
        return cls(float(alpha), ref, 0, np.zeros(d), np.zeros((d, d)), np.zeros(order))

    @classmethod
    def from_deltas(cls, deltas, alpha: float, reference, order: int = 2) -> "MomentAccumulator":
        ref = np.asarray(reference, dtype=float).reshape(-1)
        deltas = np.asarray(deltas, dtype=float).reshape(-1, ref.size)
        sq = np.einsum("ni,ni->n", deltas, deltas)
        powers = np.array([np.sum(sq**j) for j in range(1, order + 1)])
        return cls(float(alpha), ref, len(deltas), deltas.sum(axis=0), deltas.T @ deltas, powers)

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if self.alpha != other.alpha or self.order != other.order or not np.array_equal(self.reference, other.reference):
            raise ConfigurationError("accumulator", "cannot merge accumulators with different alpha, order or reference")
        return MomentAccumulator(
            self.alpha,
            self.reference,
            self.count + other.count,
            self.sum_delta + other.sum_delta,
            self.sum_outer + other.sum_outer,
            self.power_sums + other.power_sums,
        )

    def to_record(self) -> dict:
        return {
            "alpha": self.alpha,
            "count": int(self.count),
            "reference": self.reference.tolist(),
            "sum_delta": self.sum_delta.tolist(),
            "sum_outer": self.sum_outer.tolist(),
            "power_sums": self.power_sums.tolist(),
        }


def merge_all(accumulators: list[MomentAccumulator]) -> MomentAccumulator:
    total = accumulators[0]
    for acc in accumulators[1:]:
        total = total.merge(acc)
    return total


@dataclass(frozen=True)
class MomentSnapshot:
    count: int
    mean_delta: np.ndarray
    m2: float
    m4: float | None
    m2n: dict[int, float] | None
    m2_matrix: np.ndarray
    m_alpha: np.ndarray


def moment_snapshot(acc: MomentAccumulator, theta_star=None) -> MomentSnapshot:
    """Moments of Delta = theta - theta_star and M_alpha = E[Delta Delta^T] / alpha.

    When ``theta_star`` differs from the accumulator's reference the first
    two moments are shifted exactly; powers beyond the second are then
    unavailable and reported as None.
    """
    if acc.count == 0:
        raise EmptyAccumulatorError("moment_snapshot: accumulator holds no samples")
    n = acc.count
    mean = acc.sum_delta / n
    second = acc.sum_outer / n
    higher: dict[int, float] | None = {2 * j: float(acc.power_sums[j - 1] / n) for j in range(1, acc.order + 1)}
    if theta_star is not None:
        shift = acc.reference - np.asarray(theta_star, dtype=float).reshape(-1)
        if np.any(shift != 0):
            second = second + np.outer(mean, shift) + np.outer(shift, mean) + np.outer(shift, shift)
            mean = mean + shift
            higher = None
    second = 0.5 * (second + second.T)
    m2 = float(np.trace(second))
    m4 = higher.get(4) if higher else None
    return MomentSnapshot(n, mean, m2, m4, higher, second, second / acc.alpha)


# --- stepping ----------------------------------------------------------------------------


@dataclass(frozen=True)
class StepDraws:
    uniform: np.ndarray
    normal: np.ndarray
    xi: np.ndarray


def _advance(theta, x, alpha, update: UpdateMap, kernel: ControlledKernel, u, z, xi):
    x_next = kernel.step(theta, x, u, z)
    theta_next = theta + alpha * (np.asarray(update.g(theta, x_next), dtype=float) + xi)
    return theta_next, x_next


def sa_step(theta, x, alpha: float, update: UpdateMap, kernel: ControlledKernel, draws: StepDraws, step_index: int = 0):
    """One SA step for a single chain; ``draws.xi`` is the realised noise, not a standard normal."""
    theta = check_theta(theta)
    if alpha < 0:
        raise ConfigurationError("alpha", "must be non-negative")
    single = theta.ndim == 1
    theta_b = theta[None, :] if single else theta
    replicas = theta_b.shape[0]
    x_b = as_state_batch(kernel, x, replicas)
    u = np.asarray(draws.uniform, dtype=float).reshape(replicas, kernel.n_uniform)
    z = np.asarray(draws.normal, dtype=float).reshape(replicas, kernel.n_normal)
    xi = np.asarray(draws.xi, dtype=float).reshape(theta_b.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        theta_next, x_next = _advance(theta_b, x_b, alpha, update, kernel, u, z, xi)
    if not np.isfinite(theta_next).all():
        raise DivergenceError(step_index, "non-finite value in the SA update")
    if single:
        return theta_next[0], (int(x_next[0]) if kernel.is_finite else x_next[0])
    return theta_next, x_next


@dataclass
class _Chunk:
    """Rows 0..m hold (theta_k, X_k) for k = start .. start + m."""

    start: int
    theta: np.ndarray
    x: np.ndarray


def _iterate_chunks(
    config: SAConfig,
    update: UpdateMap,
    kernel: ControlledKernel,
    theta0: np.ndarray,
    x0,
    replicas: list[int],
    n_steps: int,
) -> Iterator[_Chunk]:
    streams = lab_rng.replica_streams(config.seed, config.stream_id, replicas)
    r = len(replicas)
    theta = np.tile(theta0, (r, 1))
    x = as_state_batch(kernel, x0, r)
    guard = DIVERGENCE_FACTOR * (1.0 + float(np.linalg.norm(theta0)))
    alpha = config.alpha
    codes = compiled.codes_for(kernel, update)
    k = 0
    while k < n_steps:
        m = min(CHUNK_STEPS, n_steps - k)
        u, z, xi_raw = lab_rng.stacked_draws(streams, m, kernel.n_uniform, kernel.n_normal, update.dim)
        if codes is not None:
            thetas, xs, failed = compiled.run_chunk(codes, config.noise, alpha, guard, theta, x, u, z, xi_raw)
            if failed >= 0:
                raise DivergenceError(k + failed, f"||theta|| left the guard 1e6*(1+||theta0||) = {guard:.3g}")
            theta, x = thetas[-1], xs[-1]
            yield _Chunk(k, thetas, xs)
            k += m
            continue
        thetas = np.empty((m + 1,) + theta.shape)
        xs = np.empty((m + 1,) + x.shape, dtype=x.dtype)
        thetas[0], xs[0] = theta, x
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(m):
                xi = config.noise.apply(theta, xi_raw[i])
                theta, x = _advance(theta, x, alpha, update, kernel, u[i], z[i], xi)
                norms = np.sqrt(np.einsum("ri,ri->r", theta, theta))
                if not (norms <= guard).all():
                    raise DivergenceError(k + i + 1, f"||theta|| left the guard 1e6*(1+||theta0||) = {guard:.3g}")
                thetas[i + 1], xs[i + 1] = theta, x
        yield _Chunk(k, thetas, xs)
        k += m


def _blocks(config: SAConfig) -> list[list[int]]:
    ids = list(range(config.replica_count))
    return [ids[i : i + config.block_size] for i in range(0, len(ids), config.block_size)]


def _map_blocks(fn, blocks, threads: int | None):
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(blocks) == 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, blocks))


def _state_columns(x: np.ndarray) -> np.ndarray:
    return x[..., None].astype(float) if x.ndim == 2 else x.astype(float)


# --- run_sa ------------------------------------------------------------------------------


@dataclass
class SARunResult:
    config: SAConfig
    accumulator: MomentAccumulator
    replica_accumulators: list[MomentAccumulator]
    replica_halves: list[tuple[MomentAccumulator, MomentAccumulator]]
    final_theta: np.ndarray
    final_x: np.ndarray
    series: np.ndarray | None = None
    trajectory: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)


@dataclass
class _BlockSums:
    counts: np.ndarray
    sums: np.ndarray
    outers: np.ndarray
    powers: np.ndarray

    @classmethod
    def zeros(cls, r: int, d: int, order: int) -> "_BlockSums":
        return cls(np.zeros(2, dtype=np.int64), np.zeros((2, r, d)), np.zeros((2, r, d, d)), np.zeros((2, r, order)))

    def add(self, half: int, deltas: np.ndarray) -> None:
        if len(deltas) == 0:
            return
        sq = np.einsum("kri,kri->kr", deltas, deltas)
        self.counts[half] += len(deltas)
        self.sums[half] += deltas.sum(axis=0)
        self.outers[half] += np.einsum("kri,krj->rij", deltas, deltas)
        for j in range(self.powers.shape[-1]):
            self.powers[half, :, j] += np.sum(sq ** (j + 1), axis=0)


def _run_block(config, update, kernel, theta0, x0, reference, replicas):
    r, d = len(replicas), update.dim
    sums = _BlockSums.zeros(r, d, config.moment_order)
    split = config.burn_in + config.n_post // 2
    keep_series = [i for i, rep in enumerate(replicas) if rep < config.record_series]
    series = np.empty((config.n_post, len(keep_series), d))
    traj_rows = []
    rep_col = np.asarray(replicas, dtype=float)[:, None]
    last = None
    for chunk in _iterate_chunks(config, update, kernel, theta0, x0, replicas, config.n_steps):
        idx = np.arange(chunk.start + 1, chunk.start + len(chunk.theta))
        new = chunk.theta[1:]
        deltas = new - reference
        sums.add(0, deltas[(idx > config.burn_in) & (idx <= split)])
        sums.add(1, deltas[idx > split])
        if keep_series:
            post = idx > config.burn_in
            series[idx[post] - config.burn_in - 1] = new[post][:, keep_series]
        if config.thin:
            states = _state_columns(chunk.x[1:])
            for row in np.nonzero(idx % config.thin == 0)[0]:
                k_col = np.full((r, 1), float(idx[row]))
                traj_rows.extend(np.hstack([rep_col, k_col, new[row], states[row]]))
        last = chunk
    halves = []
    for i in range(r):
        pair = tuple(
            MomentAccumulator(config.alpha, reference, int(sums.counts[h]), sums.sums[h, i], sums.outers[h, i], sums.powers[h, i])
            for h in (0, 1)
        )
        halves.append(pair)
    return halves, last.theta[-1], last.x[-1], series, traj_rows


def run_sa(
    config: SAConfig,
    update: UpdateMap,
    kernel: ControlledKernel,
    theta0,
    x0=0,
    theta_star=None,
    recommended: int | None = None,
    threads: int | None = None,
) -> SARunResult:
    """Run ``config.replica_count`` independent replicas and accumulate post-burn-in moments.

    Moments are taken around ``theta_star`` when known, around zero otherwise.
    Replica accumulators are merged in replica order.
    """
    theta0 = check_theta(theta0, "theta0")
    if theta0.shape != (update.dim,):
        raise ConfigurationError("theta0", f"expected dimension {update.dim}, got shape {theta0.shape}")
    reference = np.zeros(update.dim) if theta_star is None else check_theta(theta_star, "theta_star").reshape(update.dim)
    warnings = []
    if recommended is not None and config.burn_in < recommended:
        msg = f"burn_in {config.burn_in} is below the forgetting recommendation {recommended} at alpha={config.alpha:g}"
        logger.warning(msg)
        warnings.append(msg)

    blocks = _blocks(config)
    results = _map_blocks(lambda b: _run_block(config, update, kernel, theta0, x0, reference, b), blocks, threads)

    halves = [pair for res in results for pair in res[0]]
    per_replica = [first.merge(second) for first, second in halves]
    final_theta = np.concatenate([res[1] for res in results])
    final_x = np.concatenate([res[2] for res in results])
    series = np.concatenate([res[3] for res in results], axis=1).transpose(1, 0, 2) if config.record_series else None
    trajectory = None
    if config.thin:
        rows = [row for res in results for row in res[4]]
        trajectory = np.array(rows) if rows else np.empty((0, 2 + update.dim + max(kernel.state_dim, 1)))
        trajectory = trajectory[np.lexsort((trajectory[:, 1], trajectory[:, 0]))] if len(trajectory) else trajectory
    logger.debug("run_sa alpha=%g replicas=%d steps=%d done", config.alpha, config.replica_count, config.n_steps)
    return SARunResult(
        config=config,
        accumulator=merge_all(per_replica),
        replica_accumulators=per_replica,
        replica_halves=halves,
        final_theta=final_theta,
        final_x=final_x,
        series=series,
        trajectory=trajectory,
        warnings=warnings,
    )


# --- stationary triples ------------------------------------------------------------------


@dataclass(frozen=True)
class StationarySamples:
    """Triples (theta_k, X_k, X_{k+1}) taken every ``gap`` steps after burn-in."""

    theta: np.ndarray
    x: np.ndarray
    x_next: np.ndarray
    gap: int


def sample_stationary(
    config: SAConfig,
    update: UpdateMap,
    kernel: ControlledKernel,
    theta0,
    x0,
    gap: int,
    n_samples: int,
    threads: int | None = None,
) -> StationarySamples:
    """Thinned samples of the joint chain spread evenly over ``config.replica_count`` replicas."""
    if gap < 1 or n_samples < 1:
        raise ConfigurationError("gap" if gap < 1 else "n_samples", "must be positive")
    theta0 = check_theta(theta0, "theta0")
    per_replica = math.ceil(n_samples / config.replica_count)
    horizon = config.burn_in + per_replica * gap

    def block(replicas):
        thetas, xs, xns = [], [], []
        for chunk in _iterate_chunks(config, update, kernel, theta0, x0, replicas, horizon):
            ks = np.arange(chunk.start, chunk.start + len(chunk.theta) - 1)
            rows = np.nonzero((ks >= config.burn_in) & ((ks - config.burn_in) % gap == gap - 1))[0]
            thetas.append(chunk.theta[rows])
            xs.append(chunk.x[rows])
            xns.append(chunk.x[rows + 1])
        # (samples, replicas, ...) -> replica-major
        return [np.swapaxes(np.concatenate(a), 0, 1) for a in (thetas, xs, xns)]

    parts = _map_blocks(block, _blocks(config), threads)
    theta = np.concatenate([p[0] for p in parts]).reshape(-1, update.dim)[:n_samples]
    x = np.concatenate([p[1] for p in parts])
    x_next = np.concatenate([p[2] for p in parts])
    tail = x.shape[2:]
    x = x.reshape((-1,) + tail)[:n_samples]
    x_next = x_next.reshape((-1,) + tail)[:n_samples]
    return StationarySamples(theta, x, x_next, gap)


# --- coupled pairs -----------------------------------------------------------------------


@dataclass(frozen=True)
class CoupledTrace:
    """Squared distances for k = 0..n_steps, laid out (n_steps + 1, replicas)."""

    theta_sq: np.ndarray
    x_sq: np.ndarray
    meeting_times: np.ndarray  # -1 where the pair never met

    @property
    def joint_sq(self) -> np.ndarray:
        return self.theta_sq + self.x_sq

    def mean_joint_sq(self) -> np.ndarray:
        return self.joint_sq.mean(axis=1)


def run_coupled(
    config: SAConfig,
    update: UpdateMap,
    kernel: ControlledKernel,
    z0: tuple,
    z0_prime: tuple,
    threads: int | None = None,
) -> CoupledTrace:
    """Two joint chains fed the same kernel primitives and the same xi on every step."""
    theta_a = check_theta(z0[0], "z0")
    theta_b = check_theta(z0_prime[0], "z0_prime")

    def block(replicas):
        a = _iterate_chunks(config, update, kernel, theta_a, z0[1], replicas, config.n_steps)
        b = _iterate_chunks(config, update, kernel, theta_b, z0_prime[1], replicas, config.n_steps)
        th, xx = [], []
        for i, (ca, cb) in enumerate(zip(a, b)):
            lo = 0 if i == 0 else 1
            diff = ca.theta[lo:] - cb.theta[lo:]
            th.append(np.einsum("kri,kri->kr", diff, diff))
            dx = kernel.distance(ca.x[lo:], cb.x[lo:])
            xx.append(dx * dx)
        return np.concatenate(th), np.concatenate(xx)

    parts = _map_blocks(block, _blocks(config), threads)
    theta_sq = np.concatenate([p[0] for p in parts], axis=1)
    x_sq = np.concatenate([p[1] for p in parts], axis=1)
    met = (theta_sq + x_sq) == 0
    meeting = np.where(met.any(axis=0), met.argmax(axis=0), -1)
    return CoupledTrace(theta_sq, x_sq, meeting)
