"""Experiment configuration: TOML (or a previous run's manifest.json) validated into pydantic models."""
from __future__ import annotations

import hashlib
import json
import math
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError
from .poisson_gateaux import DEFAULT_FD_STEPS, DEFAULT_RADII
from .sa_engine import DEFAULT_BURN_IN_SAFETY, NoiseSpec

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

ANALYSES = ("bias", "moments", "rr", "clt", "coupling", "wd_scan", "decomposition")
FINITE_KERNELS = frozenset({"finite2"})
DEFAULT_ALPHAS = [0.04, 0.02, 0.01, 0.005]
CLT_MIN_REPLICAS = 200


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class KernelSection(_Section):
    name: str
    params: dict = Field(default_factory=dict)


class MapSection(_Section):
    name: str
    params: dict = Field(default_factory=dict)


class ProblemSection(_Section):
    kernel: KernelSection
    map: MapSection
    noise: NoiseSpec = NoiseSpec()
    theta0: list[float] | None = None
    x0: int | list[float] | None = None


def _decreasing_alphas(alphas: list[float]) -> list[float]:
    if not alphas:
        raise ValueError("alphas must not be empty")
    if any(not 0 < a <= 1 for a in alphas):
        raise ValueError("alphas must lie in (0, 1]")
    if any(b >= a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alphas must be strictly decreasing")
    return alphas


class SweepSection(_Section):
    alphas: list[float] = Field(default_factory=lambda: list(DEFAULT_ALPHAS))
    steps_per_unit_alpha: int = Field(default=200_000, gt=0)
    replicas: int = Field(default=64, ge=1)
    burn_in: int | None = Field(default=None, ge=0)
    burn_in_safety: float = Field(default=DEFAULT_BURN_IN_SAFETY, gt=0.0)
    moment_order: int = Field(default=2, ge=2, le=8)
    thin: int = Field(default=0, ge=0)
    block_size: int = Field(default=16, ge=1)

    @field_validator("alphas")
    @classmethod
    def _decreasing(cls, alphas: list[float]) -> list[float]:
        return _decreasing_alphas(alphas)


class RootSection(_Section):
    theta0: list[float] | None = None
    tol: float | None = Field(default=None, gt=0.0)
    max_iters: int = Field(default=500, ge=1)
    step: float | None = Field(default=None, gt=0.0)
    budget: int | None = Field(default=None, gt=0)


class DiagnosticsSection(_Section):
    n_pairs: int = Field(default=2000, ge=100)
    grid_radius: float = Field(default=1.0, gt=0.0)
    grid_points: int = Field(default=9, ge=2)


class CouplingSection(_Section):
    alpha: float | None = Field(default=None, gt=0.0, le=1.0)
    n_steps: int = Field(default=2000, ge=100)
    replicas: int = Field(default=256, ge=1)
    offset: float = Field(default=1.0, gt=0.0)
    floor_ratio: float = Field(default=1e-2, ge=0.0, lt=1.0)


class CLTSection(_Section):
    alpha: float = Field(default=0.02, gt=0.0, le=1.0)
    n_steps: int = Field(default=100_000, gt=0)
    replicas: int = Field(default=500, ge=1)
    burn_in: int | None = Field(default=None, ge=0)
    series_replicas: int = Field(default=4, ge=1)
    max_lag: int = Field(default=2000, ge=1)
    nominal: float = Field(default=0.95, gt=0.0, lt=1.0)


class WDScanSection(_Section):
    radii: list[float] = Field(default_factory=lambda: list(DEFAULT_RADII))
    n_directions: int = Field(default=8, ge=1)
    fd_steps: tuple[float, float] = DEFAULT_FD_STEPS


class DecompositionSection(_Section):
    alphas: list[float] = Field(default_factory=lambda: [0.01])
    n_samples: int = Field(default=20_000, ge=2)
    gap: int | None = Field(default=None, ge=1)
    replicas: int = Field(default=16, ge=1)

    @field_validator("alphas")
    @classmethod
    def _decreasing(cls, alphas: list[float]) -> list[float]:
        return _decreasing_alphas(alphas)


class ExperimentConfig(_Section):
    seed: int = Field(default=0, ge=0, lt=2**64)
    output_dir: str = "out"
    analyses: list[Literal["bias", "moments", "rr", "clt", "coupling", "wd_scan", "decomposition"]] = Field(default_factory=list)
    problem: ProblemSection
    sweep: SweepSection = SweepSection()
    root: RootSection = RootSection()
    diagnostics: DiagnosticsSection = DiagnosticsSection()
    coupling: CouplingSection = CouplingSection()
    clt: CLTSection = CLTSection()
    wd_scan: WDScanSection = WDScanSection()
    decomposition: DecompositionSection = DecompositionSection()

    @model_validator(mode="after")
    def _analysis_requirements(self) -> "ExperimentConfig":
        wanted = set(self.analyses)
        if wanted & {"bias", "rr"} and self.sweep.replicas < 2:
            raise ValueError("bias requires replicas >= 2")
        if "clt" in wanted and self.clt.replicas < CLT_MIN_REPLICAS:
            raise ValueError(f"clt requires clt.replicas >= {CLT_MIN_REPLICAS}")
        finite_only = sorted(wanted & {"wd_scan", "decomposition"})
        if finite_only and self.problem.kernel.name not in FINITE_KERNELS:
            raise ValueError(f"{', '.join(finite_only)} require a finite kernel ({', '.join(sorted(FINITE_KERNELS))})")
        return self

    @property
    def uses_sweep(self) -> bool:
        return bool(set(self.analyses) & {"bias", "moments", "rr"})

    def reproducible_dump(self) -> dict:
        """Everything that determines outputs; ``output_dir`` is excluded so reruns elsewhere match byte for byte."""
        return self.model_dump(mode="json", exclude={"output_dir"})

    def config_hash(self) -> str:
        blob = json.dumps(self.reproducible_dump(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class FieldError:
    field: str
    message: str
    line: int | None = None

    def __str__(self) -> str:
        where = f" (line {self.line})" if self.line else ""
        return f"{self.field}: {self.message}{where}"


_TOML_LINE = re.compile(r"line (\d+)")
_HEADER = re.compile(r"^\s*\[+\s*([A-Za-z0-9_.\-\s]+?)\s*\]+\s*(#.*)?$")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")


def locate(source: str, loc: tuple) -> int | None:
    """Best-effort source line for a pydantic error location inside a TOML document."""
    lines = source.splitlines()
    sections: list[tuple[str, int]] = [("", 0)]
    for i, text in enumerate(lines):
        m = _HEADER.match(text)
        if m:
            sections.append((m.group(1).replace(" ", ""), i + 1))
    parts = [str(p) for p in loc if not isinstance(p, int)]
    for cut in range(len(parts), -1, -1):
        section = ".".join(parts[:cut])
        match = next(((name, start) for name, start in sections if name == section), None)
        if match is None:
            continue
        start = match[1]
        if cut == len(parts):
            return start or None
        key = parts[cut]
        for i in range(start, len(lines)):
            if _HEADER.match(lines[i]):
                break
            m = _KEY.match(lines[i])
            if m and m.group(1) == key:
                return i + 1
        return start or None
    return None


def _pydantic_errors(exc: ValidationError, source: str | None) -> list[FieldError]:
    out = []
    for err in exc.errors():
        loc = tuple(err["loc"])
        field = ".".join(str(p) for p in loc) or "config"
        message = err["msg"].removeprefix("Value error, ")
        out.append(FieldError(field, message, locate(source, loc) if source else None))
    return out


def parse_config(text: str, suffix: str = ".toml") -> tuple[ExperimentConfig | None, list[FieldError]]:
    if suffix == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            return None, [FieldError("manifest", exc.msg, exc.lineno)]
        raw = raw.get("config", raw)
        source = None
    else:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            m = _TOML_LINE.search(str(exc))
            return None, [FieldError("toml", str(exc), int(m.group(1)) if m else None)]
        source = text
    try:
        return ExperimentConfig.model_validate(raw), []
    except ValidationError as exc:
        return None, _pydantic_errors(exc, source)


def problem_errors(config: ExperimentConfig, source: str | None = None) -> list[FieldError]:
    """Build kernel and map once to surface registry-level errors (unknown names, bad params)."""
    from .registry import build_kernel, build_map

    try:
        kernel = build_kernel(config.problem.kernel.name, config.problem.kernel.params)
        build_map(config.problem.map.name, config.problem.map.params, kernel)
    except ConfigurationError as exc:
        section = "problem.kernel" if exc.field.startswith("kernel") else "problem.map"
        field = f"problem.{exc.field}" if "." in exc.field else f"{section}.{exc.field}"
        loc = tuple(field.split("."))
        return [FieldError(field, str(exc).split(": ", 1)[-1], locate(source, loc) if source else None)]
    return []


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and validate; raises ConfigurationError carrying every field error."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    config, errors = parse_config(text, path.suffix.lower())
    if config is not None:
        errors = problem_errors(config, text if path.suffix.lower() != ".json" else None)
    if errors:
        raise ConfigurationError(errors[0].field, "; ".join(str(e) for e in errors))
    return config


def default_burn_in(n_post: int) -> int:
    return max(1, math.ceil(0.1 * n_post))
