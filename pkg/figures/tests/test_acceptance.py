"""Figure-generation acceptance: render both comparison-figure styles from
traces produced by the simulator CLI (its external interface), with the
residual curves validated non-increasing on load."""

import json
import os
import subprocess
import sys

import pytest

from cpsgd_figures.plotting import PlotSpec, load_trace, render

RUN_CONFIG = {
    "problem": {
        "kind": "classification",
        "n": 6,
        "m": 200,
        "d": 10,
        "lambda": 0.001,
        "alpha": 1.0,
        "noise_var": 0.5,
    },
    "topology": {
        "n": 6,
        "edges": [[1, 2], [1, 4], [1, 6], [2, 3], [2, 5], [3, 4], [4, 5], [5, 6]],
    },
    "algorithms": [
        {"name": "DSGD", "kind": "dsgd", "eta": 0.05},
        {
            "name": "Choco-SGD-C1",
            "kind": "choco_sgd",
            "compressor": {"kind": "top_k", "k": 2},
            "gamma": 0.2,
            "eta": 0.05,
        },
        {
            "name": "CP-SGD-F-C1",
            "kind": "cp_sgd",
            "compressor": {"kind": "top_k", "k": 2},
            "schedule": {
                "kind": "constant",
                "eta": 0.05,
                "gamma": 4.0,
                "omega": 0.5,
                "alpha_x": 0.2,
            },
        },
        {
            "name": "CP-SGD-F-C2",
            "kind": "cp_sgd",
            "compressor": {"kind": "b_bits", "b": 2},
            "schedule": {
                "kind": "constant",
                "eta": 0.05,
                "gamma": 4.0,
                "omega": 0.5,
                "alpha_x": 0.2,
            },
        },
        {
            "name": "CP-SGD-T-C1",
            "kind": "cp_sgd",
            "compressor": {"kind": "top_k", "k": 2},
            "schedule": {"kind": "time_varying"},
        },
    ],
    "rounds": 400,
    "seeds": [1],
}


@pytest.fixture(scope="module")
def trace_dir(tmp_path_factory):
    """Short benchmark-comparison run through the simulator CLI."""
    root = tmp_path_factory.mktemp("a12")
    config_path = root / "config.json"
    config_path.write_text(json.dumps(RUN_CONFIG))
    out = root / "traces"
    proc = subprocess.run(
        [sys.executable, "-m", "cpsgd.cli", "run", "--config", str(config_path),
         "--out", str(out)],
        capture_output=True,
        text=True,
        timeout=600,
    )
    assert proc.returncode == 0, proc.stderr
    return out


def _trace_args(trace_dir):
    return tuple(
        (str(trace_dir / f"{name}_seed1.csv"), name)
        for name in ("DSGD", "Choco-SGD-C1", "CP-SGD-F-C1", "CP-SGD-F-C2",
                     "CP-SGD-T-C1")
    )


def test_a12_residual_vs_iteration_figure(trace_dir, tmp_path):
    traces = _trace_args(trace_dir)
    for path, _ in traces:
        assert os.path.exists(path)
        load_trace(path)  # validates schema and the running-minimum residual
    out = render(PlotSpec(traces=traces, out_path=str(tmp_path / "fig2.png"),
                          x_axis="round", y_column="residual", logy=True))
    ok = os.path.getsize(out) > 0
    print(f"A12 {'PASS' if ok else 'FAIL'} - iteration-axis figure with "
          f"{len(traces)} validated non-increasing residual curves")
    assert ok


def test_a12_residual_vs_bits_figure(trace_dir, tmp_path):
    traces = _trace_args(trace_dir)
    out = render(PlotSpec(traces=traces, out_path=str(tmp_path / "fig3.png"),
                          x_axis="bits", y_column="residual", logy=True))
    ok = os.path.getsize(out) > 0
    print(f"A12 {'PASS' if ok else 'FAIL'} - bits-axis figure rendered")
    assert ok
