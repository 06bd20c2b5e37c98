"""Per-round metrics and trace persistence.

A Trace is a fixed-schema table (one row per recorded round) plus a JSON
metadata sidecar. The CSV column order below is the stable interface
consumed by external plot tooling; do not reorder.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .topology import SpectralData

__all__ = [
    "TRACE_COLUMNS",
    "MissingFStar",
    "Trace",
    "residual_update",
    "atomic_write_text",
    "LyapunovValues",
    "lyapunov_components",
]

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


class MissingFStar(ValueError):
    """Lyapunov components need a reference optimum value."""


def _format_value(col: str, value: float) -> str:
    if col == "k":
        return str(int(value))
    if col == "bits_cumulative" and np.isfinite(value):
        return str(int(value))
    return repr(float(value))


@dataclass
class Trace:
    """Rows in TRACE_COLUMNS order plus run metadata."""

    data: np.ndarray  # (rows, len(TRACE_COLUMNS))
    metadata: dict

    def column(self, name: str) -> np.ndarray:
        return self.data[:, TRACE_COLUMNS.index(name)]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    def validate(self) -> None:
        res = self.column("residual")
        finite = res[np.isfinite(res)]
        if finite.size and np.any(np.diff(finite) > 0):
            raise ValueError("residual column must be non-increasing")
        bits = self.column("bits_cumulative")
        if np.any(np.diff(bits) < 0):
            raise ValueError("bits_cumulative column must be non-decreasing")

    def to_csv_text(self) -> str:
        lines = [",".join(TRACE_COLUMNS)]
        for row in self.data:
            lines.append(
                ",".join(_format_value(c, v) for c, v in zip(TRACE_COLUMNS, row))
            )
        return "\n".join(lines) + "\n"

    def write(self, csv_path: str, metadata_path: str | None = None) -> None:
        """Atomically write the CSV body and its JSON metadata sidecar."""
        atomic_write_text(csv_path, self.to_csv_text())
        if metadata_path is None:
            metadata_path = os.path.splitext(csv_path)[0] + ".json"
        atomic_write_text(
            metadata_path, json.dumps(self.metadata, indent=2, sort_keys=True) + "\n"
        )

    @staticmethod
    def read_csv(path: str) -> "Trace":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            if header != TRACE_COLUMNS:
                raise ValueError(f"unexpected trace header {header}")
            body = np.array(
                [
                    [float(tok) for tok in line.strip().split(",")]
                    for line in fh
                    if line.strip()
                ]
            )
        meta_path = os.path.splitext(path)[0] + ".json"
        metadata = {}
        if os.path.exists(meta_path):
            with open(meta_path, "r", encoding="utf-8") as fh:
                metadata = json.load(fh)
        return Trace(data=body.reshape(-1, len(TRACE_COLUMNS)), metadata=metadata)


def atomic_write_text(path: str, text: str) -> None:
    """Write via temp file + rename so partial output never lands."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def residual_update(
    prev: float | None, x_stack: np.ndarray, x_star: np.ndarray
) -> float:
    """Running minimum of the squared stacked distance to the reference point."""
    dev = np.asarray(x_stack) - np.asarray(x_star)[None, :]
    current = float((dev * dev).sum())
    return current if prev is None else min(float(prev), current)


@dataclass(frozen=True)
class LyapunovValues:
    v1: float
    v2: float
    v3: float
    v4: float
    v5: float
    u: float

    @property
    def total(self) -> float:
        return self.v1 + self.v2 + self.v3 + self.v4 + self.v5


def lyapunov_components(
    x: np.ndarray,
    v: np.ndarray,
    xc: np.ndarray,
    problem,
    spectral: SpectralData | None,
    omega: float,
    beta1: float,
    f_star: float | None,
    gb_stack: np.ndarray | None = None,
    value_at_mean: float | None = None,
) -> LyapunovValues:
    """Energy components of the convergence analysis, evaluated at a state.

    v1: consensus energy 0.5 ||x||^2_K with K the centering projector.
    v2: dual tracking error 0.5 (1+beta1) ||v + g_bar/omega||^2_P.
    v3: cross term x^T K P (v + g_bar/omega); may be negative.
    v4: optimality gap n (f(x_mean) - f_star).
    v5: compression error ||x - x_ref||^2.
    u:  the unweighted combination 2 v1 + ||.||^2_P + v5 + v4.

    g_bar stacks every local gradient evaluated at the mean iterate.
    """
    if f_star is None:
        raise MissingFStar("reference optimum value required")
    if omega <= 0:
        raise ValueError(f"omega must be positive, got {omega}")
    n = x.shape[0]
    x_mean = x.mean(axis=0)
    if value_at_mean is None:
        value_at_mean = problem.value(x_mean)
    v4 = n * (value_at_mean - f_star)
    if n == 1:
        return LyapunovValues(0.0, 0.0, 0.0, float(v4), 0.0, float(v4))
    if spectral is None:
        raise ValueError("spectral data required for n >= 2")
    if gb_stack is None:
        gb_stack = problem.grad_stack(x_mean)
    dev = x - x_mean[None, :]
    v1 = 0.5 * float((dev * dev).sum())
    w = v + gb_stack / omega
    pw = spectral.projector_p @ w
    w_p_sq = float((w * pw).sum())
    v2 = 0.5 * (1.0 + beta1) * w_p_sq
    v3 = float((dev * pw).sum())
    diff = x - xc
    v5 = float((diff * diff).sum())
    u = 2.0 * v1 + w_p_sq + v5 + v4
    return LyapunovValues(v1, v2, v3, float(v4), v5, float(u))
