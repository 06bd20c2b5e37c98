"""Render convergence figures from simulator trace CSVs.

Consumes the documented trace schema (fixed 15-column header) produced by
the simulator's experiment runner; one curve per trace, residual vs
iteration or vs transmitted bits. Rendering never mutates the inputs and
is byte-deterministic given the same inputs and library pin.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "TRACE_COLUMNS",
    "SchemaMismatch",
    "EmptyTrace",
    "PlotSpec",
    "load_trace",
    "render",
]

# documented trace schema: do not reorder
TRACE_COLUMNS = [
    "k",
    "consensus_error",
    "residual",
    "grad_norm_sq_at_mean",
    "f_gap",
    "bits_cumulative",
    "v1",
    "v2",
    "v3",
    "v4",
    "v5",
    "u",
    "eta",
    "gamma",
    "omega",
]

X_AXIS_COLUMNS = {"round": "k", "bits": "bits_cumulative"}

DOWNSAMPLE_THRESHOLD = 100_000


class SchemaMismatch(ValueError):
    """Trace file does not match the documented schema or invariants."""


class EmptyTrace(ValueError):
    """Trace file has a header but no data rows."""


@dataclass(frozen=True)
class PlotSpec:
    """One figure: several traces over a shared axis pair."""

    traces: tuple[tuple[str, str], ...]  # (csv path, legend label)
    out_path: str
    x_axis: str = "round"  # round | bits
    y_column: str = "residual"
    logy: bool = True
    logx: bool = False
    title: str | None = None
    downsample: bool = True

    def __post_init__(self) -> None:
        if not self.traces:
            raise ValueError("at least one trace is required")
        if self.x_axis not in X_AXIS_COLUMNS:
            raise ValueError(f"x_axis must be one of {sorted(X_AXIS_COLUMNS)}")
        if self.y_column not in TRACE_COLUMNS:
            raise ValueError(f"unknown y column {self.y_column!r}")


def load_trace(path: str) -> dict[str, np.ndarray]:
    """Read one CSV and validate it against the documented schema."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header != TRACE_COLUMNS:
            raise SchemaMismatch(
                f"{path}: header {header[:3]}... does not match the trace schema"
            )
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(TRACE_COLUMNS):
                raise SchemaMismatch(f"{path}: row with {len(parts)} fields")
            rows.append([float(tok) for tok in parts])
    if not rows:
        raise EmptyTrace(f"{path}: no data rows")
    data = np.asarray(rows)
    return {name: data[:, i] for i, name in enumerate(TRACE_COLUMNS)}


def _validate_curve(path: str, columns: dict[str, np.ndarray], y_column: str) -> None:
    if y_column == "residual":
        res = columns["residual"]
        finite = res[np.isfinite(res)]
        if finite.size == 0:
            raise SchemaMismatch(f"{path}: residual column is all-NaN")
        if np.any(np.diff(finite) > 0):
            raise SchemaMismatch(
                f"{path}: residual must be non-increasing (it is a running minimum)"
            )
    bits = columns["bits_cumulative"]
    if np.any(np.diff(bits) < 0):
        raise SchemaMismatch(f"{path}: bits_cumulative must be non-decreasing")


def _downsample(x: np.ndarray, y: np.ndarray, enabled: bool):
    if not enabled or x.size <= DOWNSAMPLE_THRESHOLD:
        return x, y
    stride = math.ceil(x.size / DOWNSAMPLE_THRESHOLD)
    # always keep the final point so curves end where the run ended
    idx = np.unique(np.r_[np.arange(0, x.size, stride), x.size - 1])
    return x[idx], y[idx]


def render(spec: PlotSpec) -> str:
    """Draw every listed trace into one image; returns the output path."""
    x_name = X_AXIS_COLUMNS[spec.x_axis]
    fig, ax = plt.subplots(figsize=(7.0, 4.5), dpi=150)
    try:
        for path, label in spec.traces:
            columns = load_trace(path)
            _validate_curve(path, columns, spec.y_column)
            x = columns[x_name]
            y = columns[spec.y_column]
            keep = np.isfinite(y)
            x, y = _downsample(x[keep], y[keep], spec.downsample)
            if x.size == 0:
                raise EmptyTrace(f"{path}: no finite {spec.y_column} values")
            ax.plot(x, y, label=label, linewidth=1.2)
        if spec.logy:
            ax.set_yscale("log")
        if spec.logx:
            ax.set_xscale("log")
        ax.set_xlabel("iteration k" if spec.x_axis == "round" else "transmitted bits")
        ax.set_ylabel(spec.y_column.replace("_", " "))
        if spec.title:
            ax.set_title(spec.title)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend()
        fig.tight_layout()
        out_dir = os.path.dirname(os.path.abspath(spec.out_path))
        os.makedirs(out_dir, exist_ok=True)
        # strip the library-version metadata so re-renders are byte-identical
        fig.savefig(spec.out_path, metadata=_stable_metadata(spec.out_path))
    finally:
        plt.close(fig)
    return spec.out_path


def _stable_metadata(out_path: str) -> dict | None:
    ext = os.path.splitext(out_path)[1].lower()
    if ext == ".png":
        return {"Software": None}
    if ext == ".svg":
        return {"Date": None, "Creator": None}
    if ext == ".pdf":
        return {"CreationDate": None, "Producer": None, "Creator": None}
    return None
