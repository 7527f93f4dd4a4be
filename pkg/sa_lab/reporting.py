"""Result writers: CSV tables, schema-checked JSON records and small log-log SVG plots.

Everything written here is a pure function of the numbers passed in, so two
runs with the same manifest produce identical files.
"""
from __future__ import annotations

import csv
import html
import json
import logging
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from jsonschema import ValidationError, validate

from .errors import LabError

logger = logging.getLogger(__name__)

_NUM = {"type": ["number", "null"]}
_VEC = {"type": "array", "items": _NUM}

SCALING_SCHEMA = {
    "type": "object",
    "required": ["quantity", "rows", "slope", "slope_stderr", "intercept", "r2", "error"],
    "properties": {
        "quantity": {"type": "string"},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["alpha", "estimate", "std_error", "n_replicas"],
                "properties": {"alpha": {"type": "number", "exclusiveMinimum": 0}, "n_replicas": {"type": "integer"}},
            },
        },
        "slope": _NUM,
        "slope_stderr": _NUM,
        "r2": _NUM,
        "error": {"type": ["string", "null"]},
    },
}

MOMENTS_SCHEMA = {
    "type": "object",
    "required": ["m2", "m4", "m_alpha", "cauchy", "halves"],
    "properties": {
        "m2": SCALING_SCHEMA,
        "m4": SCALING_SCHEMA,
        "m_alpha": {"type": "object"},
        "cauchy": {"type": "array", "items": {"type": "object", "required": ["alpha", "alpha_next", "gap"]}},
        "halves": {"type": "array", "items": {"type": "object", "required": ["alpha", "mean_difference", "z"]}},
    },
}

RR_SCHEMA = {
    "type": "object",
    "required": ["rr", "raw", "slope_gain", "corrected"],
    "properties": {"rr": SCALING_SCHEMA, "raw": SCALING_SCHEMA, "slope_gain": _NUM},
}

CLT_SCHEMA = {
    "type": "object",
    "required": ["alpha", "n_steps", "n_replicas", "sigma_h", "green_kubo", "coverage", "nominal"],
    "properties": {
        "alpha": {"type": "number"},
        "n_steps": {"type": "integer", "minimum": 1},
        "sigma_h": {"type": "array", "items": _VEC},
        "green_kubo": {"type": "array", "items": {"type": "object", "required": ["sigma_h", "truncation_lag", "plateau_flag"]}},
        "coverage": _NUM,
        "nominal": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    },
}

COUPLING_SCHEMA = {
    "type": "object",
    "required": ["alpha", "rate", "r2", "window", "tau", "within_bound", "meeting_fraction"],
    "properties": {
        "rate": _NUM,
        "tau": _NUM,
        "within_bound": {"type": ["boolean", "null"]},
        "meeting_fraction": {"type": "number", "minimum": 0, "maximum": 1},
    },
}

WD_SCAN_SCHEMA = {
    "type": "object",
    "required": ["radii", "sup_remainders", "fitted_exponent", "c_wd_hat", "exact", "violation", "lambda_bar"],
    "properties": {
        "radii": _VEC,
        "sup_remainders": _VEC,
        "fitted_exponent": _NUM,
        "exact": {"type": "boolean"},
        "violation": {"type": "boolean"},
        "lambda_bar": {"type": "array", "items": _VEC},
    },
}

DECOMPOSITION_SCHEMA = {
    "type": "object",
    "required": ["theta_star", "entries"],
    "properties": {
        "theta_star": _VEC,
        "entries": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["alpha", "gap", "n_samples", "bias_hat", "term_I", "term_II", "term_III", "term_IV", "reconstruction", "balance_ratio"],
            },
        },
    },
}

ACCUMULATOR_SCHEMA = {
    "type": "object",
    "required": ["analysis", "alpha", "replica", "count", "reference", "sum_delta", "sum_outer", "power_sums"],
    "properties": {
        "replica": {"type": "integer", "minimum": 0},
        "count": {"type": "integer", "minimum": 0},
        "sum_delta": _VEC,
        "power_sums": _VEC,
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "config", "config_hash", "seed", "streams", "analyses", "warnings", "artifacts"],
    "properties": {
        "version": {"type": "string"},
        "config": {"type": "object", "required": ["seed", "problem"]},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "seed": {"type": "integer", "minimum": 0},
        "streams": {"type": "object"},
        "analyses": {"type": "object", "additionalProperties": {"enum": ["ok", "failed", "skipped"]}},
        "warnings": {"type": "array", "items": {"type": "string"}},
        "artifacts": {"type": "array", "items": {"type": "string"}},
    },
}

SCHEMAS = {
    "scaling": SCALING_SCHEMA,
    "moments": MOMENTS_SCHEMA,
    "rr": RR_SCHEMA,
    "clt": CLT_SCHEMA,
    "coupling": COUPLING_SCHEMA,
    "wd_scan": WD_SCAN_SCHEMA,
    "decomposition": DECOMPOSITION_SCHEMA,
    "accumulator": ACCUMULATOR_SCHEMA,
    "manifest": MANIFEST_SCHEMA,
}


def clean(value):
    """JSON-ready copy: arrays to lists, numpy scalars to Python, non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return clean(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


def check_record(record: dict, schema: str) -> dict:
    rec = clean(record)
    try:
        validate(instance=rec, schema=SCHEMAS[schema])
    except ValidationError as exc:
        raise LabError(f"{schema} record failed schema validation: {exc.message}") from exc
    return rec


def dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, indent=2) + "\n"


def write_json(path: Path, record: dict, schema: str | None = None) -> Path:
    rec = check_record(record, schema) if schema else clean(record)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(rec), encoding="utf-8")
    logger.debug("wrote %s", path)
    return path


def write_jsonl(path: Path, records: Iterable[dict], schema: str | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            rec = check_record(record, schema) if schema else clean(record)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def fmt(value) -> str:
    """Round-trip text for one CSV cell (17 significant digits for floats)."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise LabError(f"{path.name}: row of length {len(row)} under a header of {len(header)}")
            writer.writerow([fmt(v) for v in row])
    logger.debug("wrote %s", path)
    return path


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# --- plots ---------------------------------------------------------------------------------

_W, _H, _PAD = 480, 320, 48
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _scale(values: np.ndarray, lo: float, hi: float, a: float, b: float) -> np.ndarray:
    span = hi - lo if hi > lo else 1.0
    return a + (values - lo) / span * (b - a)


def svg_plot(
    path: Path,
    title: str,
    series: dict[str, Sequence[tuple[float, float]]],
    xlabel: str,
    ylabel: str,
    log_x: bool = True,
    log_y: bool = True,
    fit: tuple[float, float] | None = None,
) -> Path:
    """Line plot of one or more (x, y) series on log or linear axes.

    ``fit`` is (slope, intercept) of log y on log x and is drawn dashed.
    Non-positive values are dropped on log axes.
    """
    tx = np.log10 if log_x else (lambda v: np.asarray(v, dtype=float))
    ty = np.log10 if log_y else (lambda v: np.asarray(v, dtype=float))
    cleaned = {}
    for name, pts in series.items():
        arr = np.asarray([(x, y) for x, y in pts if (x > 0 or not log_x) and (y > 0 or not log_y)], dtype=float)
        if len(arr):
            cleaned[name] = np.column_stack([tx(arr[:, 0]), ty(arr[:, 1])])
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{html.escape(title)}</text>',
        f'<text x="{_W / 2:.1f}" y="{_H - 8}" text-anchor="middle" font-size="12">{html.escape(xlabel)}</text>',
        f'<text x="14" y="{_H / 2:.1f}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {_H / 2:.1f})">{html.escape(ylabel)}</text>',
        f'<rect x="{_PAD}" y="{_PAD}" width="{_W - 2 * _PAD}" height="{_H - 2 * _PAD}" fill="none" stroke="black"/>',
    ]
    if cleaned:
        allpts = np.vstack(list(cleaned.values()))
        x_lo, x_hi = float(allpts[:, 0].min()), float(allpts[:, 0].max())
        y_lo, y_hi = float(allpts[:, 1].min()), float(allpts[:, 1].max())

        def to_px(pts):
            px = _scale(pts[:, 0], x_lo, x_hi, _PAD, _W - _PAD)
            py = _scale(pts[:, 1], y_lo, y_hi, _H - _PAD, _PAD)
            return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))

        for i, (name, pts) in enumerate(sorted(cleaned.items())):
            color = _COLORS[i % len(_COLORS)]
            order = pts[np.argsort(pts[:, 0])]
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{to_px(order)}"/>')
            if len(order) <= 64:
                for pair in to_px(order).split(" "):
                    cx, cy = pair.split(",")
                    parts.append(f'<circle cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>')
            parts.append(f'<text x="{_W - _PAD - 4}" y="{_PAD + 14 * (i + 1)}" text-anchor="end" font-size="11" fill="{color}">{html.escape(name)}</text>')
        if fit is not None and log_x and log_y:
            slope, intercept = fit
            xs = np.array([x_lo, x_hi])
            line = np.column_stack([xs, (slope * xs * math.log(10) + intercept) / math.log(10)])
            parts.append(f'<polyline fill="none" stroke="gray" stroke-dasharray="4 3" points="{to_px(line)}"/>')
            parts.append(f'<text x="{_PAD + 4}" y="{_PAD + 14}" font-size="11" fill="gray">slope {slope:.3f}</text>')
    parts.append("</svg>")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return path
