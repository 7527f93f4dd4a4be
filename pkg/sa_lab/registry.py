"""Built-in kernel families and update maps, selected by name from experiment configs."""
from __future__ import annotations

from dataclasses import replace
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .compiled import CLIPPED_AR, FINITE_TABLE, LINEAR_HX, PROJ_LANGEVIN, RW_MH, TANH_MIX, KernelCode, MapCode
from .controlled_kernels import (
    ClippedARKernel,
    ControlledKernel,
    MHKernel,
    ProjectedLangevinKernel,
    finite2_family,
)
from .errors import ConfigurationError
from .mean_field import UpdateMap


class _Params(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# --- kernels ---------------------------------------------------------------------------------


class Finite2Params(_Params):
    a0: float = Field(default=0.5, ge=0.0, le=1.0)
    ka: float = 0.2
    b0: float = Field(default=0.5, ge=0.0, le=1.0)
    kb: float = 0.2
    profile: Literal["tanh", "kink"] = "tanh"
    kink_at: float = 0.0


class ClippedARParams(_Params):
    """m(theta) = m_offset + m_slope*theta_0, sigma(theta) = sigma0 + sigma_slope*tanh(theta_0)^2."""

    rho: float = Field(default=0.5, gt=-1.0, lt=1.0)
    m_offset: float = 0.0
    m_slope: float = 1.0
    sigma0: float = Field(default=1.0, ge=0.0)
    sigma_slope: float = 0.0
    clip_bound: float = Field(default=10.0, gt=0.0)

    @model_validator(mode="after")
    def _scale_non_negative(self) -> "ClippedARParams":
        if self.sigma0 + min(self.sigma_slope, 0.0) < 0:
            raise ValueError("sigma0 + sigma_slope must be non-negative")
        return self


class LangevinParams(_Params):
    """U_theta(x) = kappa/2 * ||x - shift*theta_0||^2 on a box."""

    eta: float = Field(default=0.1, gt=0.0)
    lower: list[float] = Field(default_factory=lambda: [-3.0])
    upper: list[float] = Field(default_factory=lambda: [3.0])
    kappa: float = Field(default=1.0, gt=0.0)
    shift: float = 0.5


class MHParams(_Params):
    """Target exp(-kappa/2 * ||x - shift*theta_0||^2)."""

    proposal_scale: float = Field(default=1.0, gt=0.0)
    dim: int = Field(default=1, ge=1)
    kappa: float = Field(default=1.0, gt=0.0)
    shift: float = 0.5
    probe_radius: float = Field(default=3.0, gt=0.0)


def _build_finite2(p: Finite2Params) -> ControlledKernel:
    return finite2_family(p.a0, p.ka, p.b0, p.kb, p.profile, p.kink_at)


def _build_clipped_ar(p: ClippedARParams) -> ControlledKernel:
    return ClippedARKernel(
        rho=p.rho,
        m_fn=lambda th: p.m_offset + p.m_slope * th[..., 0],
        sigma_fn=lambda th: p.sigma0 + p.sigma_slope * np.tanh(th[..., 0]) ** 2,
        clip_bound=p.clip_bound,
        compiled=KernelCode.build(CLIPPED_AR, [p.rho, p.m_offset, p.m_slope, p.sigma0, p.sigma_slope, p.clip_bound]),
    )


def _build_langevin(p: LangevinParams) -> ControlledKernel:
    def grad_u(theta, x):
        return p.kappa * (x - p.shift * theta[..., :1])

    kernel = ProjectedLangevinKernel(p.eta, grad_u, tuple(p.lower), tuple(p.upper))
    code = KernelCode.build(PROJ_LANGEVIN, [p.eta, p.kappa, p.shift], [kernel.lower, kernel.upper])
    return replace(kernel, compiled=code)


def _build_mh(p: MHParams) -> ControlledKernel:
    def potential(x, theta):
        diff = x - p.shift * theta[..., :1]
        return 0.5 * p.kappa * np.einsum("ri,ri->r", diff, diff)

    code = KernelCode.build(RW_MH, [p.proposal_scale, p.kappa, p.shift])
    return MHKernel(potential, p.proposal_scale, p.dim, p.probe_radius, compiled=code)


KERNELS: dict[str, tuple[type[_Params], Callable]] = {
    "finite2": (Finite2Params, _build_finite2),
    "clipped_ar": (ClippedARParams, _build_clipped_ar),
    "proj_langevin": (LangevinParams, _build_langevin),
    "rw_mh": (MHParams, _build_mh),
}


# --- update maps -------------------------------------------------------------------------------


class LinearHxParams(_Params):
    """g(theta, x) = -theta + h(x); ``h`` is a per-state table (rows are states) or, for continuous kernels, coef * x."""

    h: list[float] | list[list[float]] | None = None
    coef: float = 1.0
    dim: int = Field(default=1, ge=1)
    lipschitz_hint: float | None = Field(default=None, gt=0.0)
    monotonicity_hint: float | None = Field(default=None, gt=0.0)


class TanhMixParams(_Params):
    """Scalar g(theta, x) = -theta + h(x) + kappa * w(x) * tanh(theta)."""

    h: list[float] | None = None
    w: list[float] | None = None
    kappa: float = 0.3
    lipschitz_hint: float | None = Field(default=None, gt=0.0)
    monotonicity_hint: float | None = Field(default=None, gt=0.0)


class FiniteTableParams(_Params):
    """Scalar g(theta_grid[i], x) = values[i][x], linear in theta between grid points and beyond the ends."""

    theta_grid: list[float] = Field(min_length=2)
    values: list[list[float]]

    @model_validator(mode="after")
    def _grid_shape(self) -> "FiniteTableParams":
        if any(b <= a for a, b in zip(self.theta_grid, self.theta_grid[1:])):
            raise ValueError("theta_grid must be strictly increasing")
        if len(self.values) != len(self.theta_grid) or len({len(row) for row in self.values}) != 1:
            raise ValueError("values needs one row per grid point, all of equal length")
        return self


def _state_table(table, n_states: int, dim: int, field: str) -> np.ndarray:
    arr = np.asarray(table, dtype=float)
    arr = arr[:, None] if arr.ndim == 1 else arr
    if arr.shape != (n_states, dim):
        raise ConfigurationError(field, f"table shape {arr.shape}, expected ({n_states}, {dim})")
    return arr


def _linear_state_term(kernel: ControlledKernel, table, coef: float, dim: int, field: str) -> Callable:
    if kernel.is_finite:
        if table is None:
            raise ConfigurationError(field, "finite kernels need a per-state table")
        values = _state_table(table, kernel.n_states, dim, field)
        return lambda x: values[x]
    if table is not None:
        raise ConfigurationError(field, "per-state tables apply to finite kernels only")
    return lambda x: coef * np.broadcast_to(x[:, :1], (len(x), dim))


def _build_linear_hx(p: LinearHxParams, kernel: ControlledKernel) -> UpdateMap:
    h = _linear_state_term(kernel, p.h, p.coef, p.dim, "h")
    eye = np.eye(p.dim)
    table = _state_table(p.h, kernel.n_states, p.dim, "h") if kernel.is_finite else None

    return UpdateMap(
        g=lambda theta, x: -theta + h(x),
        dim=p.dim,
        lipschitz_hint=p.lipschitz_hint,
        monotonicity_hint=p.monotonicity_hint,
        name="linear_hx",
        jacobian_fn=lambda theta, x: np.broadcast_to(-eye, (len(theta), p.dim, p.dim)),
        hessian_fn=lambda theta, x: np.zeros((len(theta), p.dim, p.dim, p.dim)),
        compiled=MapCode.build(LINEAR_HX, [p.coef, float(kernel.is_finite)], table),
    )


def _build_tanh_mix(p: TanhMixParams, kernel: ControlledKernel) -> UpdateMap:
    if kernel.is_finite:
        h = _state_table(p.h if p.h is not None else np.zeros(kernel.n_states), kernel.n_states, 1, "h")
        w = _state_table(p.w if p.w is not None else np.ones(kernel.n_states), kernel.n_states, 1, "w")
        h_of, w_of = (lambda x: h[x]), (lambda x: w[x])
        code = MapCode.build(TANH_MIX, [p.kappa, 1.0], np.hstack([h, w]))
    else:
        if p.h is not None or p.w is not None:
            raise ConfigurationError("h", "per-state tables apply to finite kernels only")
        h_of, w_of = (lambda x: x[:, :1]), (lambda x: np.ones((len(x), 1)))
        code = MapCode.build(TANH_MIX, [p.kappa, 0.0])
    k = p.kappa

    def jac(theta, x):
        return (-1.0 + k * w_of(x) / np.cosh(theta) ** 2)[:, :, None]

    def hess(theta, x):
        t = np.tanh(theta)
        return (-2.0 * k * w_of(x) * t * (1 - t * t))[:, :, None, None]

    return UpdateMap(
        g=lambda theta, x: -theta + h_of(x) + k * w_of(x) * np.tanh(theta),
        dim=1,
        lipschitz_hint=p.lipschitz_hint,
        monotonicity_hint=p.monotonicity_hint,
        name="scalar_tanh_mix",
        jacobian_fn=jac,
        hessian_fn=hess,
        compiled=code,
    )


def _build_finite_table(p: FiniteTableParams, kernel: ControlledKernel) -> UpdateMap:
    if not kernel.is_finite:
        raise ConfigurationError("map", "finite_table needs a finite kernel")
    grid = np.asarray(p.theta_grid)
    values = np.asarray(p.values)
    if values.shape[1] != kernel.n_states:
        raise ConfigurationError("values", f"rows have {values.shape[1]} entries, kernel has {kernel.n_states} states")

    def g(theta, x):
        t = theta[:, 0]
        i = np.clip(np.searchsorted(grid, t) - 1, 0, len(grid) - 2)
        w = (t - grid[i]) / (grid[i + 1] - grid[i])
        return ((1 - w) * values[i, x] + w * values[i + 1, x])[:, None]

    return UpdateMap(g=g, dim=1, name="finite_table", compiled=MapCode.build(FINITE_TABLE, table=values, grid=grid))


MAPS: dict[str, tuple[type[_Params], Callable]] = {
    "linear_hx": (LinearHxParams, _build_linear_hx),
    "scalar_tanh_mix": (TanhMixParams, _build_tanh_mix),
    "finite_table": (FiniteTableParams, _build_finite_table),
}


def _validated(table: dict, name: str, params: dict | None, kind: str) -> tuple[_Params, Callable]:
    if name not in table:
        raise ConfigurationError(f"{kind}.name", f"unknown {kind} {name!r}; built-ins: {', '.join(table)}")
    model, builder = table[name]
    try:
        return model.model_validate(params or {}), builder
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(part) for part in first["loc"])
        raise ConfigurationError(f"{kind}.params.{loc}" if loc else f"{kind}.params", first["msg"]) from exc


def build_kernel(name: str, params: dict | None = None) -> ControlledKernel:
    model, builder = _validated(KERNELS, name, params, "kernel")
    return builder(model)


def build_map(name: str, params: dict | None, kernel: ControlledKernel) -> UpdateMap:
    model, builder = _validated(MAPS, name, params, "map")
    return builder(model, kernel)
