"""Config-driven experiment runner.

Loads a strict JSON config (unknown keys rejected, errors carry the field
path), fans runs out over (algorithm, seed) with a shared dataset and
initial iterate per seed, persists one CSV + JSON-metadata pair per run,
and aggregates final residuals across seeds. Reference optima are computed
once per seed and cached next to the traces.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .compression import CompressionError, make_compressor
from .diagnostics import atomic_write_text
from .optimizers import (
    ChocoParams,
    ConstantSchedule,
    CoupledSchedule,
    DsgdParams,
    InvalidSchedule,
    SpeedupSchedule,
    TimeVaryingSchedule,
    run,
)
from .problems import (
    QuadraticProblem,
    make_classification_problem,
    make_quadratic_problem,
    solve_reference_optimum,
)
from .rng import substream
from .topology import TopologyError, Topology, ring_with_chords, single_agent_topology, topology_from_json

__all__ = [
    "ParseError",
    "ValidationError",
    "AlgorithmSpec",
    "ExperimentConfig",
    "bundled_config_path",
    "load_config",
    "parse_config",
    "config_to_dict",
    "build_problem",
    "compute_reference",
    "run_experiment",
    "ExperimentResult",
    "speedup_sweep",
    "OUTPUT_DIR_ENV",
]

OUTPUT_DIR_ENV = "CPSGD_OUT"


def bundled_config_path(name: str = "paper_fig2") -> str:
    """Filesystem path of a config shipped with the package."""
    from importlib import resources

    ref = resources.files("cpsgd").joinpath("configs", f"{name}.json")
    return str(ref)


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


def _check_keys(obj: dict, path: str, required: set[str], optional: set[str]) -> None:
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: expected an object")
    unknown = set(obj) - required - optional
    if unknown:
        raise ValidationError(f"{path}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ValidationError(f"{path}: missing keys {sorted(missing)}")


@dataclass(frozen=True)
class AlgorithmSpec:
    name: str
    kind: str  # cp_sgd | dsgd | choco_sgd
    compressor_spec: dict | None
    schedule_spec: dict

    def build_compressor(self):
        if self.compressor_spec is None:
            return None
        return make_compressor(self.compressor_spec)

    def build_schedule(self):
        return _build_schedule(self.kind, self.schedule_spec)


@dataclass(frozen=True)
class ExperimentConfig:
    problem: dict
    topology: Topology
    topology_spec: dict
    algorithms: tuple[AlgorithmSpec, ...]
    rounds: int
    seeds: tuple[int, ...]
    output_dir: str | None
    lyapunov: bool


_SCHEDULE_FIELDS = {
    "constant": ({"eta", "gamma", "omega", "alpha_x"}, set()),
    "coupled": ({"beta1", "beta2", "omega", "alpha_x"}, set()),
    "speedup": ({"beta1", "beta2", "alpha_x"}, {"rounds", "n_agents"}),
    "time_varying": (
        set(),
        {"gamma_coeff", "omega_coeff", "eta_coeff", "alpha_x"},
    ),
}


def _build_schedule(kind: str, spec: dict):
    try:
        if kind == "dsgd":
            return DsgdParams(eta=float(spec["eta"]))
        if kind == "choco_sgd":
            return ChocoParams(gamma=float(spec["gamma"]), eta=float(spec["eta"]))
        sched_kind = spec["kind"]
        args = {k: v for k, v in spec.items() if k != "kind"}
        if sched_kind == "constant":
            return ConstantSchedule(**args)
        if sched_kind == "coupled":
            return CoupledSchedule(**args)
        if sched_kind == "speedup":
            return SpeedupSchedule(**args)
        if sched_kind == "time_varying":
            return TimeVaryingSchedule(**args)
        raise ValidationError(f"unknown schedule kind {sched_kind!r}")
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"bad schedule spec {spec}: {exc}") from exc


def _validate_problem(spec: dict) -> dict:
    path = "problem"
    kind = spec.get("kind")
    if kind == "classification":
        _check_keys(
            spec, path,
            {"kind", "n", "m", "d"},
            {"lambda", "alpha", "noise_var", "bias"},
        )
        out = {
            "kind": kind,
            "n": int(spec["n"]),
            "m": int(spec["m"]),
            "d": int(spec["d"]),
            "lambda": float(spec.get("lambda", 0.0)),
            "alpha": float(spec.get("alpha", 0.0)),
            "noise_var": float(spec.get("noise_var", 0.0)),
            "bias": float(spec.get("bias", 0.0)),
        }
        if min(out["n"], out["m"], out["d"]) < 1:
            raise ValidationError(f"{path}: n, m, d must be >= 1")
        if out["lambda"] < 0 or out["alpha"] < 0:
            raise ValidationError(f"{path}: lambda and alpha must be >= 0")
    elif kind == "quadratic":
        _check_keys(
            spec, path,
            {"kind", "n", "d"},
            {"spectrum", "heterogeneity", "noise_var", "bias", "center_optimum"},
        )
        spectrum = spec.get("spectrum", [0.5, 2.0])
        if not (isinstance(spectrum, (list, tuple)) and len(spectrum) == 2):
            raise ValidationError(f"{path}.spectrum: expected [lo, hi]")
        out = {
            "kind": kind,
            "n": int(spec["n"]),
            "d": int(spec["d"]),
            "spectrum": [float(spectrum[0]), float(spectrum[1])],
            "heterogeneity": float(spec.get("heterogeneity", 1.0)),
            "noise_var": float(spec.get("noise_var", 0.0)),
            "bias": float(spec.get("bias", 0.0)),
            "center_optimum": bool(spec.get("center_optimum", False)),
        }
        if not (0 < out["spectrum"][0] <= out["spectrum"][1]):
            raise ValidationError(f"{path}.spectrum: must be positive and ordered")
        if min(out["n"], out["d"]) < 1:
            raise ValidationError(f"{path}: n and d must be >= 1")
    else:
        raise ValidationError(f"{path}.kind: unknown problem kind {kind!r}")
    if out["noise_var"] < 0:
        raise ValidationError(f"{path}.noise_var: must be >= 0")
    return out


def _validate_algorithm(spec: dict, index: int, d: int) -> AlgorithmSpec:
    path = f"algorithms[{index}]"
    kind = spec.get("kind")
    if kind == "dsgd":
        _check_keys(spec, path, {"name", "kind", "eta"}, set())
        schedule_spec = {"eta": float(spec["eta"])}
        comp_spec = None
    elif kind == "choco_sgd":
        _check_keys(spec, path, {"name", "kind", "eta", "gamma", "compressor"}, set())
        schedule_spec = {"eta": float(spec["eta"]), "gamma": float(spec["gamma"])}
        comp_spec = spec["compressor"]
    elif kind == "cp_sgd":
        _check_keys(spec, path, {"name", "kind", "compressor", "schedule"}, set())
        sched = spec["schedule"]
        if not isinstance(sched, dict) or "kind" not in sched:
            raise ValidationError(f"{path}.schedule: expected object with 'kind'")
        if sched["kind"] not in _SCHEDULE_FIELDS:
            raise ValidationError(
                f"{path}.schedule.kind: unknown kind {sched['kind']!r}"
            )
        required, optional = _SCHEDULE_FIELDS[sched["kind"]]
        _check_keys(sched, f"{path}.schedule", required | {"kind"}, optional)
        schedule_spec = dict(sched)
        comp_spec = spec["compressor"]
    else:
        raise ValidationError(f"{path}.kind: unknown algorithm kind {kind!r}")

    algo = AlgorithmSpec(
        name=str(spec["name"]),
        kind=kind,
        compressor_spec=dict(comp_spec) if comp_spec is not None else None,
        schedule_spec=schedule_spec,
    )
    # construct now so bad specs fail before any run starts
    try:
        compressor = algo.build_compressor()
        schedule = algo.build_schedule()
    except (CompressionError, InvalidSchedule) as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    if compressor is not None and hasattr(compressor, "k"):
        if compressor.k > d:
            raise ValidationError(f"{path}.compressor: k={compressor.k} > d={d}")
    if kind == "cp_sgd":
        alpha_x = schedule.at(0).alpha_x
        if not 0 < alpha_x < 1.0 / compressor.r:
            raise ValidationError(
                f"{path}: alpha_x={alpha_x} outside (0, 1/r) for r={compressor.r}"
            )
    return algo


def parse_config(obj: dict, base_dir: str = ".") -> ExperimentConfig:
    _check_keys(
        obj, "config",
        {"problem", "topology", "algorithms", "rounds", "seeds"},
        {"output_dir", "lyapunov"},
    )
    problem = _validate_problem(obj["problem"])

    topo_spec = obj["topology"]
    if not isinstance(topo_spec, dict):
        raise ValidationError("topology: expected an object")
    try:
        if "file" in topo_spec:
            _check_keys(topo_spec, "topology", {"file"}, set())
            with open(os.path.join(base_dir, topo_spec["file"]), encoding="utf-8") as fh:
                topology = topology_from_json(fh.read())
        else:
            topology = topology_from_json(topo_spec)
    except TopologyError as exc:
        raise ValidationError(f"topology: {exc}") from exc
    except OSError as exc:
        raise ValidationError(f"topology.file: {exc}") from exc
    if topology.n != problem["n"]:
        raise ValidationError(
            f"topology has n={topology.n} but problem has n={problem['n']}"
        )

    if not isinstance(obj["algorithms"], list) or not obj["algorithms"]:
        raise ValidationError("algorithms: expected a non-empty list")
    algorithms = tuple(
        _validate_algorithm(spec, i, problem["d"])
        for i, spec in enumerate(obj["algorithms"])
    )
    names = [a.name for a in algorithms]
    if len(set(names)) != len(names):
        raise ValidationError("algorithms: names must be unique")

    rounds = obj["rounds"]
    if not isinstance(rounds, int) or rounds < 1:
        raise ValidationError(f"rounds: must be a positive integer, got {rounds!r}")

    seeds = obj["seeds"]
    if not isinstance(seeds, list) or not seeds:
        raise ValidationError("seeds: expected a non-empty list of integers")
    if not all(isinstance(s, int) for s in seeds):
        raise ValidationError("seeds: entries must be integers")

    lyapunov = obj.get("lyapunov", False)
    if not isinstance(lyapunov, bool):
        raise ValidationError("lyapunov: expected a boolean")

    return ExperimentConfig(
        problem=problem,
        topology=topology,
        topology_spec={
            "n": topology.n,
            "edges": [list(e) for e in topology.edges],
            "weights": list(topology.weights),
        },
        algorithms=algorithms,
        rounds=rounds,
        seeds=tuple(int(s) for s in seeds),
        output_dir=obj.get("output_dir"),
        lyapunov=lyapunov,
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(obj, base_dir=os.path.dirname(os.path.abspath(path)))


def config_to_dict(config: ExperimentConfig) -> dict:
    """Normalized dict form; parse(config_to_dict(c)) == c."""
    out = {
        "problem": dict(config.problem),
        "topology": dict(config.topology_spec),
        "algorithms": [],
        "rounds": config.rounds,
        "seeds": list(config.seeds),
    }
    for algo in config.algorithms:
        entry: dict = {"name": algo.name, "kind": algo.kind}
        if algo.kind == "dsgd":
            entry["eta"] = algo.schedule_spec["eta"]
        elif algo.kind == "choco_sgd":
            entry["eta"] = algo.schedule_spec["eta"]
            entry["gamma"] = algo.schedule_spec["gamma"]
            entry["compressor"] = dict(algo.compressor_spec)
        else:
            entry["schedule"] = dict(algo.schedule_spec)
            entry["compressor"] = dict(algo.compressor_spec)
        out["algorithms"].append(entry)
    if config.output_dir is not None:
        out["output_dir"] = config.output_dir
    if config.lyapunov:
        out["lyapunov"] = config.lyapunov
    return out


def build_problem(config: ExperimentConfig, seed: int):
    """Instantiate the seed's dataset; shared by every algorithm row."""
    spec = config.problem
    rng = substream(seed, "data")
    if spec["kind"] == "classification":
        return make_classification_problem(
            spec["n"], spec["m"], spec["d"], spec["lambda"], spec["alpha"], rng
        )
    return make_quadratic_problem(
        spec["n"],
        spec["d"],
        tuple(spec["spectrum"]),
        spec["heterogeneity"],
        rng,
        center_optimum=spec["center_optimum"],
    )


def compute_reference(
    problem, cache_path: str | None = None
) -> tuple[np.ndarray, float]:
    """Reference optimum (closed form for quadratics, solver otherwise)."""
    if cache_path and os.path.exists(cache_path):
        with open(cache_path, encoding="utf-8") as fh:
            cached = json.load(fh)
        if cached.get("fingerprint") == problem.fingerprint():
            return np.asarray(cached["x_star"], dtype=float), float(cached["f_star"])
    if isinstance(problem, QuadraticProblem):
        x_star, f_star = problem.optimum()
    else:
        x_star, f_star = solve_reference_optimum(problem, tol=1e-8)
    if cache_path:
        payload = {
            "fingerprint": problem.fingerprint(),
            "x_star": x_star.tolist(),
            "f_star": f_star,
            "grad_norm": float(np.linalg.norm(problem.grad(x_star))),
        }
        atomic_write_text(cache_path, json.dumps(payload, indent=2) + "\n")
    return x_star, f_star


def _resolve_out_dir(config: ExperimentConfig, out_dir: str | None) -> str:
    if out_dir:
        return out_dir
    if config.output_dir:
        return config.output_dir
    return os.environ.get(OUTPUT_DIR_ENV, "cpsgd_out")


@dataclass
class ExperimentResult:
    out_dir: str
    trace_paths: list[str] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    summary: dict | None = None

    @property
    def all_failed(self) -> bool:
        return bool(self.failures) and not self.trace_paths


def run_experiment(
    config: ExperimentConfig,
    out_dir: str | None = None,
    seeds: tuple[int, ...] | None = None,
    lyapunov: bool | None = None,
) -> ExperimentResult:
    """Run every (algorithm, seed) pair and persist traces.

    A failing run is recorded in failures.json and does not stop the
    others. Identical config and seeds reproduce byte-identical CSVs.
    """
    seeds = tuple(seeds) if seeds else config.seeds
    lyapunov = config.lyapunov if lyapunov is None else lyapunov
    out = _resolve_out_dir(config, out_dir)
    os.makedirs(out, exist_ok=True)
    result = ExperimentResult(out_dir=out)
    finals: dict[str, list[float]] = {a.name: [] for a in config.algorithms}

    for seed in seeds:
        problem = build_problem(config, seed)
        ref_path = os.path.join(out, f"reference_seed{seed}.json")
        x_star, f_star = compute_reference(problem, cache_path=ref_path)
        sigma = math.sqrt(config.problem["noise_var"])
        for algo in config.algorithms:
            try:
                trace = run(
                    algorithm=algo.kind,
                    problem=problem,
                    topology=config.topology,
                    compressor=algo.build_compressor(),
                    schedule=algo.build_schedule(),
                    rounds=config.rounds,
                    seed=seed,
                    noise_sigma=sigma,
                    bias=config.problem["bias"],
                    lyapunov=lyapunov,
                    reference=(x_star, f_star),
                    algo_tag=algo.name,
                )
            except Exception as exc:  # noqa: BLE001 - isolate per-run failures
                result.failures.append(
                    {"algorithm": algo.name, "seed": seed, "error": str(exc)}
                )
                continue
            csv_path = os.path.join(out, f"{algo.name}_seed{seed}.csv")
            trace.write(csv_path)
            result.trace_paths.append(csv_path)
            finals[algo.name].append(float(trace.column("residual")[-1]))

    summary = {
        "rounds": config.rounds,
        "seeds": list(seeds),
        "final_residual": {
            name: {
                "mean": float(np.mean(vals)),
                "min": float(np.min(vals)),
                "max": float(np.max(vals)),
            }
            for name, vals in finals.items()
            if vals
        },
    }
    result.summary = summary
    atomic_write_text(
        os.path.join(out, "summary.json"),
        json.dumps(summary, indent=2, sort_keys=True) + "\n",
    )
    if result.failures:
        atomic_write_text(
            os.path.join(out, "failures.json"),
            json.dumps(result.failures, indent=2, sort_keys=True) + "\n",
        )
    return result


def speedup_sweep(
    config: ExperimentConfig,
    agent_counts: list[int],
    rounds: int,
    beta2: float,
    beta1: float = 1.0,
    alpha_x: float = 0.2,
    compressor_spec: dict | None = None,
    out_dir: str | None = None,
    beta3_proxy: float = 1.0,
) -> dict:
    """Rerun the config's problem family across agent counts with the
    agent-count-scaled schedule and report the time-averaged squared
    gradient norm at the mean iterate.

    The threshold guard rounds > n * (beta3_proxy / beta2)^2 uses a proxy
    constant, so it can only warn, never enforce the exact requirement.
    """
    if not agent_counts:
        raise ValidationError("agent_counts must be non-empty")
    out = _resolve_out_dir(config, out_dir)
    os.makedirs(out, exist_ok=True)
    sigma = math.sqrt(config.problem["noise_var"])
    if compressor_spec is None:
        compressor_spec = {"kind": "top_k", "k": max(1, config.problem["d"] // 2)}
    warnings: list[str] = []
    rows = []
    for n in sorted(agent_counts):
        if rounds <= n * (beta3_proxy / beta2) ** 2:
            warnings.append(
                f"n={n}: rounds={rounds} below the heuristic threshold "
                f"n*(beta3/beta2)^2={n * (beta3_proxy / beta2) ** 2:.1f}"
            )
        topology = single_agent_topology() if n == 1 else ring_with_chords(n)
        schedule = SpeedupSchedule(
            beta1=beta1, beta2=beta2, rounds=rounds, n_agents=n, alpha_x=alpha_x
        )
        spec = dict(config.problem)
        spec["n"] = n
        sub_config = ExperimentConfig(
            problem=spec,
            topology=topology,
            topology_spec={},
            algorithms=(),
            rounds=rounds,
            seeds=config.seeds,
            output_dir=None,
            lyapunov=False,
        )
        per_seed = []
        for seed in config.seeds:
            problem = build_problem(sub_config, seed)
            trace = run(
                algorithm="cp_sgd",
                problem=problem,
                topology=topology,
                compressor=make_compressor(compressor_spec),
                schedule=schedule,
                rounds=rounds,
                seed=seed,
                noise_sigma=sigma,
                bias=config.problem["bias"],
                algo_tag=f"sweep_n{n}",
            )
            grad_col = trace.column("grad_norm_sq_at_mean")[:rounds]
            per_seed.append(float(grad_col.mean()))
        rows.append(
            {
                "n": n,
                "omega": schedule.omega,
                "mean_grad_norm_sq": float(np.mean(per_seed)),
                "per_seed": per_seed,
            }
        )
    summary = {
        "rounds": rounds,
        "beta1": beta1,
        "beta2": beta2,
        "alpha_x": alpha_x,
        "compressor": compressor_spec,
        "rows": rows,
        "warnings": warnings,
    }
    atomic_write_text(
        os.path.join(out, "sweep_summary.json"),
        json.dumps(summary, indent=2, sort_keys=True) + "\n",
    )
    return summary
