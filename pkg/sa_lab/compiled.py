"""Compiled SA inner loop for the built-in kernels and update maps.

Registry builders attach a ``KernelCode`` or ``MapCode`` to what they build.
When both the kernel and the map of a run carry one, ``run_chunk`` advances
a whole replica block through a chunk of steps in one numba call that
releases the GIL. The random draws still come from the replica streams in
``rng``, so a run sees the same primitives on either path.

Kernels and maps built by hand (custom ``row_builder``, ``g`` callables)
carry no code and take the numpy step in ``sa_engine``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

# kernel kinds
FINITE2 = 0
CLIPPED_AR = 1
PROJ_LANGEVIN = 2
RW_MH = 3

# map kinds
LINEAR_HX = 0
TANH_MIX = 1
FINITE_TABLE = 2

NOISE_KINDS = {"none": 0, "gaussian": 1, "theta_scaled": 2}


def _vector(values) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(values, dtype=np.float64).reshape(-1))


def _matrix(values, cols: int = 0) -> np.ndarray:
    if values is None:
        return np.empty((0, cols))
    arr = np.asarray(values, dtype=np.float64)
    return np.ascontiguousarray(arr[:, None] if arr.ndim == 1 else arr)


@dataclass(frozen=True, eq=False)
class KernelCode:
    """``params`` layout per kind:

    finite2: a0, ka, b0, kb, profile (0 tanh, 1 kink), kink_at
    clipped_ar: rho, m_offset, m_slope, sigma0, sigma_slope, clip_bound
    proj_langevin: eta, kappa, shift (``box`` rows are lower and upper)
    rw_mh: proposal_scale, kappa, shift
    """

    kind: int
    params: np.ndarray
    box: np.ndarray

    @classmethod
    def build(cls, kind: int, params, box=None) -> "KernelCode":
        return cls(kind, _vector(params), _matrix(box))


@dataclass(frozen=True, eq=False)
class MapCode:
    """``params`` layout per kind:

    linear_hx: coef, finite flag (``table`` is the (n_states, d) h table)
    scalar_tanh_mix: kappa, finite flag (``table`` columns are h and w)
    finite_table: unused (``table`` is values per grid point, ``grid`` the theta grid)
    """

    kind: int
    params: np.ndarray
    table: np.ndarray
    grid: np.ndarray

    @classmethod
    def build(cls, kind: int, params=(), table=None, grid=None) -> "MapCode":
        return cls(kind, _vector(params), _matrix(table), _vector(() if grid is None else grid))


def codes_for(kernel, update) -> tuple[KernelCode, MapCode] | None:
    kcode = getattr(kernel, "compiled", None)
    mcode = getattr(update, "compiled", None)
    if kcode is None or mcode is None:
        return None
    return kcode, mcode


@njit(cache=True, nogil=True)
def _kernel_step(kind, kp, box, t0, x, u, z, out):
    if kind == FINITE2:
        if kp[4] == 0.0:
            s = np.tanh(t0)
        else:
            s = min(abs(t0 - kp[5]), 1.0)
        # row 0 is (1 - a, a), row 1 is (b, 1 - b); move to state 1 when u passes the first entry
        if x[0] == 0.0:
            first = 1.0 - (kp[0] + kp[1] * s)
        else:
            first = kp[2] - kp[3] * s
        out[0] = 1.0 if u[0] >= first else 0.0
    elif kind == CLIPPED_AR:
        th = np.tanh(t0)
        m = kp[1] + kp[2] * t0
        sig = kp[3] + kp[4] * (th * th)
        y = kp[0] * x[0] + m + sig * z[0]
        out[0] = min(max(y, -kp[5]), kp[5])
    elif kind == PROJ_LANGEVIN:
        root = np.sqrt(2.0 * kp[0])
        for i in range(x.shape[0]):
            drift = x[i] - kp[0] * (kp[1] * (x[i] - kp[2] * t0))
            out[i] = min(max(drift + root * z[i], box[0, i]), box[1, i])
    else:
        ux = 0.0
        uy = 0.0
        for i in range(x.shape[0]):
            out[i] = x[i] + kp[0] * z[i]
            dx = x[i] - kp[2] * t0
            dy = out[i] - kp[2] * t0
            ux += dx * dx
            uy += dy * dy
        log_ratio = 0.5 * kp[1] * ux - 0.5 * kp[1] * uy
        if not u[0] < np.exp(min(log_ratio, 0.0)):
            for i in range(x.shape[0]):
                out[i] = x[i]


@njit(cache=True, nogil=True)
def _map_eval(kind, mp, table, grid, theta, x, out):
    if kind == LINEAR_HX:
        for i in range(theta.shape[0]):
            h = table[int(x[0]), i] if mp[1] != 0.0 else mp[0] * x[0]
            out[i] = -theta[i] + h
    elif kind == TANH_MIX:
        if mp[1] != 0.0:
            h = table[int(x[0]), 0]
            w = table[int(x[0]), 1]
        else:
            h = x[0]
            w = 1.0
        out[0] = -theta[0] + h + mp[0] * w * np.tanh(theta[0])
    else:
        t = theta[0]
        i = min(max(np.searchsorted(grid, t) - 1, 0), grid.shape[0] - 2)
        w = (t - grid[i]) / (grid[i + 1] - grid[i])
        s = int(x[0])
        out[0] = (1.0 - w) * table[i, s] + w * table[i + 1, s]


@njit(cache=True, nogil=True)
def advance_chunk(kkind, kp, box, mkind, mp, table, grid, noise_kind, noise_scale, alpha, guard, thetas, xs, u, z, xi):
    """Fill rows 1..m of ``thetas`` (m+1, R, d) and ``xs`` (m+1, R, state width) from row 0.

    Returns the first row whose ||theta|| leaves ``guard`` (or is not finite), -1 otherwise.
    """
    m = u.shape[0]
    r = thetas.shape[1]
    d = thetas.shape[2]
    g = np.empty(d)
    for k in range(m):
        for j in range(r):
            theta = thetas[k, j]
            _kernel_step(kkind, kp, box, theta[0], xs[k, j], u[k, j], z[k, j], xs[k + 1, j])
            _map_eval(mkind, mp, table, grid, theta, xs[k + 1, j], g)
            scale = noise_scale
            if noise_kind == 2:
                sq = 0.0
                for i in range(d):
                    sq += theta[i] * theta[i]
                scale = noise_scale * (1.0 + np.sqrt(sq))
            norm2 = 0.0
            for i in range(d):
                noise = scale * xi[k, j, i] if noise_kind != 0 else 0.0
                v = theta[i] + alpha * (g[i] + noise)
                thetas[k + 1, j, i] = v
                norm2 += v * v
            if not np.sqrt(norm2) <= guard:
                return k + 1
    return -1


def run_chunk(codes: tuple[KernelCode, MapCode], noise, alpha: float, guard: float, theta, x, u, z, xi):
    """One chunk for a replica block; returns (thetas, xs, failed_row) shaped like the numpy path."""
    kcode, mcode = codes
    m = u.shape[0]
    finite = x.ndim == 1
    rows = x.reshape(len(x), -1).astype(np.float64)
    thetas = np.empty((m + 1,) + theta.shape)
    xs = np.empty((m + 1,) + rows.shape)
    thetas[0], xs[0] = theta, rows
    scale = 0.0 if noise.kind == "none" else float(noise.scale)
    failed = advance_chunk(
        kcode.kind, kcode.params, kcode.box,
        mcode.kind, mcode.params, mcode.table, mcode.grid,
        NOISE_KINDS[noise.kind], scale, float(alpha), float(guard),
        thetas, xs,
        np.ascontiguousarray(u, dtype=np.float64),
        np.ascontiguousarray(z, dtype=np.float64),
        np.ascontiguousarray(xi, dtype=np.float64),
    )
    if finite:
        return thetas, xs[..., 0].astype(np.int64), int(failed)
    return thetas, xs, int(failed)
