import numpy as np
import pytest

from cpsgd import build_topology

BENCH_EDGES = [(1, 2), (1, 4), (1, 6), (2, 3), (2, 5), (3, 4), (4, 5), (5, 6)]


@pytest.fixture(scope="session")
def bench_topology():
    """The 6-agent benchmark graph, degree vector (3,3,2,3,3,2)."""
    return build_topology(6, BENCH_EDGES)


def linear_fit_r2(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Least-squares line fit; returns (slope, intercept, r_squared)."""
    design = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    pred = design @ coef
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return float(coef[0]), float(coef[1]), 1.0 - ss_res / ss_tot
