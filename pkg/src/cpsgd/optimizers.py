"""Synchronous-round optimizers: the compressed primal-dual method plus
decentralized-SGD and compressed-gossip baselines.

One round of the primal-dual update, for every agent i over Laplacian L:

    xhat_j   = x_ref_j + C(x_j - x_ref_j)                (shared broadcast)
    x_i'     = x_i - eta * (gamma * sum_j L_ij xhat_j + omega * v_i + g_i)
    v_i'     = v_i + eta * omega * sum_j L_ij xhat_j
    x_ref_j' = (1 - alpha_x) * x_ref_j + alpha_x * xhat_j

with v(0) = x_ref(0) = 0. Each agent compresses once per round and all
receivers apply the identical message, so replicated references never
drift. The dual stacks sum to zero at every round, and the iterate mean
follows plain SGD on the average cost regardless of compression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .compression import Compressor
from .diagnostics import Trace, TRACE_COLUMNS, lyapunov_components, residual_update
from .problems import NoisyOracle, Problem
from .rng import substream
from .topology import Topology, consensus_error, spectral

__all__ = [
    "InvalidSchedule",
    "BadMixingMatrix",
    "NonFiniteIterate",
    "ScheduleValues",
    "ConstantSchedule",
    "CoupledSchedule",
    "SpeedupSchedule",
    "TimeVaryingSchedule",
    "DsgdParams",
    "ChocoParams",
    "schedule_eval",
    "SwarmState",
    "RoundStats",
    "initial_state",
    "metropolis_weights",
    "cp_sgd_round",
    "dsgd_round",
    "choco_sgd_round",
    "run",
]


class InvalidSchedule(ValueError):
    pass


class BadMixingMatrix(ValueError):
    pass


class NonFiniteIterate(RuntimeError):
    """NaN or Inf showed up in an iterate; the run is aborted."""


# ---------------------------------------------------------------------------
# parameter schedules


@dataclass(frozen=True)
class ScheduleValues:
    eta: float
    gamma: float
    omega: float
    alpha_x: float


@dataclass(frozen=True)
class ConstantSchedule:
    """Fixed (eta, gamma, omega, alpha_x) for every round."""

    eta: float
    gamma: float
    omega: float
    alpha_x: float
    kind: str = "constant"

    def __post_init__(self) -> None:
        _check_positive(eta=self.eta, gamma=self.gamma, omega=self.omega,
                        alpha_x=self.alpha_x)

    @property
    def beta1(self) -> float:
        return self.gamma / self.omega

    @property
    def beta2(self) -> float:
        return self.eta * self.omega

    def at(self, k: int) -> ScheduleValues:
        return ScheduleValues(self.eta, self.gamma, self.omega, self.alpha_x)

    def describe(self) -> dict:
        return {"kind": self.kind, "eta": self.eta, "gamma": self.gamma,
                "omega": self.omega, "alpha_x": self.alpha_x}


@dataclass(frozen=True)
class CoupledSchedule:
    """gamma = beta1 * omega and eta = beta2 / omega at a fixed omega."""

    beta1: float
    beta2: float
    omega: float
    alpha_x: float
    kind: str = "coupled"

    def __post_init__(self) -> None:
        _check_positive(beta1=self.beta1, beta2=self.beta2, omega=self.omega,
                        alpha_x=self.alpha_x)

    def at(self, k: int) -> ScheduleValues:
        return ScheduleValues(
            self.beta2 / self.omega, self.beta1 * self.omega, self.omega,
            self.alpha_x,
        )

    def describe(self) -> dict:
        return {"kind": self.kind, "beta1": self.beta1, "beta2": self.beta2,
                "omega": self.omega, "alpha_x": self.alpha_x}


@dataclass(frozen=True)
class SpeedupSchedule:
    """Agent-count-scaled coupling: omega = beta2 * sqrt(T) / sqrt(n)."""

    beta1: float
    beta2: float
    rounds: int
    n_agents: int
    alpha_x: float
    kind: str = "speedup"

    def __post_init__(self) -> None:
        _check_positive(beta1=self.beta1, beta2=self.beta2, alpha_x=self.alpha_x)
        if self.rounds < 1 or self.n_agents < 1:
            raise InvalidSchedule("rounds and n_agents must be >= 1")

    @property
    def omega(self) -> float:
        return self.beta2 * math.sqrt(self.rounds) / math.sqrt(self.n_agents)

    def at(self, k: int) -> ScheduleValues:
        omega = self.omega
        return ScheduleValues(self.beta2 / omega, self.beta1 * omega, omega,
                              self.alpha_x)

    def describe(self) -> dict:
        return {"kind": self.kind, "beta1": self.beta1, "beta2": self.beta2,
                "rounds": self.rounds, "n_agents": self.n_agents,
                "alpha_x": self.alpha_x}


@dataclass(frozen=True)
class TimeVaryingSchedule:
    """Growing gains with a vanishing step: gamma_k = gc*(k+1),
    omega_k = oc*(k+1), eta_k = ec/(k+1).

    The k+1 shift keeps round zero finite while preserving the asymptotic
    rates; omega_k stays non-decreasing as the analysis requires.
    """

    gamma_coeff: float = 45.0
    omega_coeff: float = 5.0
    eta_coeff: float = 1e-4
    alpha_x: float = 0.2
    kind: str = "time_varying"

    def __post_init__(self) -> None:
        _check_positive(gamma_coeff=self.gamma_coeff, omega_coeff=self.omega_coeff,
                        eta_coeff=self.eta_coeff, alpha_x=self.alpha_x)

    def at(self, k: int) -> ScheduleValues:
        shifted = k + 1
        return ScheduleValues(
            self.eta_coeff / shifted,
            self.gamma_coeff * shifted,
            self.omega_coeff * shifted,
            self.alpha_x,
        )

    def describe(self) -> dict:
        return {"kind": self.kind, "gamma_coeff": self.gamma_coeff,
                "omega_coeff": self.omega_coeff, "eta_coeff": self.eta_coeff,
                "alpha_x": self.alpha_x}


Schedule = ConstantSchedule | CoupledSchedule | SpeedupSchedule | TimeVaryingSchedule


@dataclass(frozen=True)
class DsgdParams:
    eta: float
    kind: str = "dsgd"

    def __post_init__(self) -> None:
        _check_positive(eta=self.eta)

    def describe(self) -> dict:
        return {"kind": self.kind, "eta": self.eta}


@dataclass(frozen=True)
class ChocoParams:
    gamma: float
    eta: float
    kind: str = "choco"

    def __post_init__(self) -> None:
        _check_positive(eta=self.eta)
        if self.gamma < 0:
            raise InvalidSchedule("gamma must be >= 0")

    def describe(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma, "eta": self.eta}


def _check_positive(**values: float) -> None:
    for name, value in values.items():
        if not (value > 0) or not np.isfinite(value):
            raise InvalidSchedule(f"{name} must be positive, got {value}")


def schedule_eval(schedule: Schedule, k: int) -> ScheduleValues:
    """(eta_k, gamma_k, omega_k, alpha_x) for round k >= 0."""
    if k < 0:
        raise InvalidSchedule(f"round index k={k} must be >= 0")
    return schedule.at(k)


# ---------------------------------------------------------------------------
# state and round updates


@dataclass
class SwarmState:
    """Per-agent stacks: primal x, dual v, compression reference xc."""

    x: np.ndarray  # (n, d)
    v: np.ndarray  # (n, d)
    xc: np.ndarray  # (n, d)
    round: int = 0


@dataclass(frozen=True)
class RoundStats:
    bits_sent_total: int
    grad_calls: int
    mean_stoch_grad: np.ndarray  # (d,)


def initial_state(n: int, d: int, seed: int) -> SwarmState:
    """Primal entries uniform on [0, 1]; dual and reference start at zero."""
    x0 = substream(seed, "init").random((n, d))
    return SwarmState(x=x0, v=np.zeros((n, d)), xc=np.zeros((n, d)), round=0)


def metropolis_weights(topology: Topology) -> np.ndarray:
    """Doubly stochastic mixing matrix: w_ij = 1/(1 + max(deg_i, deg_j))."""
    n = topology.n
    deg = [len(topology.neighbors(i)) for i in range(1, n + 1)]
    w = np.zeros((n, n))
    for i, j in topology.edges:
        val = 1.0 / (1.0 + max(deg[i - 1], deg[j - 1]))
        w[i - 1, j - 1] = val
        w[j - 1, i - 1] = val
    for i in range(n):
        w[i, i] = 1.0 - w[i].sum()
    return w


def _check_dims(state: SwarmState, topology: Topology, oracle: NoisyOracle) -> None:
    n, d = state.x.shape
    if n != topology.n:
        raise ValueError(f"state has {n} agents but topology has {topology.n}")
    if d != oracle.problem.d or n != oracle.problem.n:
        raise ValueError(
            f"state is {n}x{d} but problem is "
            f"{oracle.problem.n}x{oracle.problem.d}"
        )


def _compress_stack(
    compressor: Compressor,
    targets: np.ndarray,
    references: np.ndarray,
    dither_rngs: Sequence[np.random.Generator] | None,
) -> tuple[np.ndarray, int]:
    n = targets.shape[0]
    if compressor.stochastic and dither_rngs is None:
        raise ValueError("stochastic compressor needs one dither stream per agent")
    xhat = np.empty_like(targets)
    bits = 0
    for i in range(n):
        rng_i = dither_rngs[i] if dither_rngs is not None else None
        xhat[i], row_bits = compressor.estimate(targets[i], references[i], rng_i)
        bits += row_bits
    return xhat, bits


def cp_sgd_round(
    state: SwarmState,
    topology: Topology,
    compressor: Compressor,
    oracle: NoisyOracle,
    schedule: Schedule,
    dither_rngs: Sequence[np.random.Generator] | None = None,
) -> tuple[SwarmState, RoundStats]:
    """One synchronous compressed primal-dual round."""
    _check_dims(state, topology, oracle)
    vals = schedule_eval(schedule, state.round)
    xhat, bits = _compress_stack(compressor, state.x, state.xc, dither_rngs)
    grads = oracle.gradient_stack(state.x, state.round)
    lap = topology.laplacian
    lap_mix = lap @ xhat
    x_new = state.x - vals.eta * (vals.gamma * lap_mix + vals.omega * state.v + grads)
    v_new = state.v + (vals.eta * vals.omega) * lap_mix
    xc_new = (1.0 - vals.alpha_x) * state.xc + vals.alpha_x * xhat
    stats = RoundStats(
        bits_sent_total=bits,
        grad_calls=state.x.shape[0],
        mean_stoch_grad=grads.mean(axis=0),
    )
    return SwarmState(x=x_new, v=v_new, xc=xc_new, round=state.round + 1), stats


def dsgd_round(
    state: SwarmState,
    topology: Topology,
    mixing: np.ndarray,
    oracle: NoisyOracle,
    step: float,
) -> tuple[SwarmState, RoundStats]:
    """Gossip average with a doubly stochastic matrix, then a local SGD step."""
    _check_dims(state, topology, oracle)
    n, d = state.x.shape
    if mixing.shape != (n, n):
        raise BadMixingMatrix(f"mixing is {mixing.shape}, expected {(n, n)}")
    if (
        np.abs(mixing.sum(axis=1) - 1.0).max() > 1e-10
        or np.abs(mixing.sum(axis=0) - 1.0).max() > 1e-10
    ):
        raise BadMixingMatrix("mixing rows/columns must sum to 1 within 1e-10")
    grads = oracle.gradient_stack(state.x, state.round)
    x_new = mixing @ state.x - step * grads
    stats = RoundStats(
        bits_sent_total=n * 32 * d,
        grad_calls=n,
        mean_stoch_grad=grads.mean(axis=0),
    )
    return (
        SwarmState(x=x_new, v=state.v, xc=state.xc, round=state.round + 1),
        stats,
    )


def choco_sgd_round(
    state: SwarmState,
    topology: Topology,
    compressor: Compressor,
    oracle: NoisyOracle,
    consensus_step: float,
    step: float,
    dither_rngs: Sequence[np.random.Generator] | None = None,
    mixing: np.ndarray | None = None,
) -> tuple[SwarmState, RoundStats]:
    """Compressed-gossip SGD baseline.

    The reference stack holds the shared estimates of every agent's iterate:
    after the local SGD half-step, each agent broadcasts the compressed
    difference to its estimate, everyone applies it, and the gossip term
    mixes the updated estimates over a doubly stochastic matrix W:
    x' = half + consensus_step * (W - I) @ estimates. The raw coupling
    weights are not usable here: consensus_step times the Laplacian's
    spectral radius exceeds 1 at the benchmark parameters and the
    compressed feedback loop diverges. Metropolis weights are the default.
    """
    _check_dims(state, topology, oracle)
    if mixing is None:
        mixing = metropolis_weights(topology)
    grads = oracle.gradient_stack(state.x, state.round)
    half = state.x - step * grads
    estimates, bits = _compress_stack(compressor, half, state.xc, dither_rngs)
    x_new = half + consensus_step * (mixing @ estimates - estimates)
    stats = RoundStats(
        bits_sent_total=bits,
        grad_calls=state.x.shape[0],
        mean_stoch_grad=grads.mean(axis=0),
    )
    return (
        SwarmState(x=x_new, v=state.v, xc=estimates, round=state.round + 1),
        stats,
    )


# ---------------------------------------------------------------------------
# full runs


def run(
    algorithm: str,
    problem: Problem,
    topology: Topology,
    compressor: Compressor | None,
    schedule: Schedule | DsgdParams | ChocoParams,
    rounds: int,
    seed: int,
    noise_sigma: float = 0.0,
    bias: float | np.ndarray = 0.0,
    lyapunov: bool = False,
    reference: tuple[np.ndarray, float] | None = None,
    algo_tag: str | None = None,
) -> Trace:
    """Execute `rounds` synchronous rounds and record per-round diagnostics.

    The trace has rounds+1 rows: row k holds the metrics of iterate x_k and
    the bits transmitted to reach it (so row 0 logs zero bits). Fully
    deterministic given the seed; per-algorithm streams are separated by
    `algo_tag` so baselines sharing a seed draw independent noise.
    """
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    if algorithm not in ("cp_sgd", "dsgd", "choco_sgd"):
        raise ValueError(f"unknown algorithm {algorithm!r}")
    tag = algo_tag if algo_tag is not None else algorithm
    oracle = NoisyOracle(
        problem=problem, noise_sigma=noise_sigma, seed=seed, tag=tag, bias=bias
    )
    n, d = problem.n, problem.d
    state = initial_state(n, d, seed)

    if algorithm == "cp_sgd":
        if compressor is None:
            raise ValueError("cp_sgd requires a compressor")
        if not isinstance(schedule, (ConstantSchedule, CoupledSchedule,
                                     SpeedupSchedule, TimeVaryingSchedule)):
            raise InvalidSchedule(f"cp_sgd cannot use {type(schedule).__name__}")
        vals0 = schedule_eval(schedule, 0)
        if not 0 < vals0.alpha_x < 1.0 / compressor.r:
            raise InvalidSchedule(
                f"alpha_x={vals0.alpha_x} outside (0, 1/r) for r={compressor.r}"
            )
    if algorithm == "choco_sgd":
        if compressor is None:
            raise ValueError("choco_sgd requires a compressor")
        if not isinstance(schedule, ChocoParams):
            raise InvalidSchedule("choco_sgd takes ChocoParams")
    if algorithm == "dsgd" and not isinstance(schedule, DsgdParams):
        raise InvalidSchedule("dsgd takes DsgdParams")
    mixing = (
        metropolis_weights(topology) if algorithm in ("dsgd", "choco_sgd") else None
    )

    spec_data = None
    if lyapunov and algorithm == "cp_sgd" and n >= 2:
        spec_data = spectral(topology)

    x_star = f_star = None
    if reference is not None:
        x_star = np.asarray(reference[0], dtype=float)
        f_star = float(reference[1])

    needs_dither = compressor is not None and compressor.stochastic
    use_compressor = algorithm in ("cp_sgd", "choco_sgd")

    table = np.full((rounds + 1, len(TRACE_COLUMNS)), np.nan)
    bits_cumulative = 0
    residual = None
    max_dual_sum = 0.0

    for k in range(rounds + 1):
        if not np.isfinite(state.x).all() or not np.isfinite(state.v).all():
            raise NonFiniteIterate(f"non-finite iterate at round {k}")
        # metrics of a still-finite but diverging iterate may overflow; the
        # guard above aborts the run one round later
        with np.errstate(over="ignore", invalid="ignore"):
            x_mean = state.x.mean(axis=0)
            gb_stack = problem.grad_stack(x_mean)
            grad_mean = gb_stack.mean(axis=0)
            value_mean = problem.value(x_mean)
            grad_norm_sq = float(grad_mean @ grad_mean)
            cons_err = consensus_error(state.x)
            if x_star is not None:
                residual = residual_update(residual, state.x, x_star)
        vals = schedule_eval(schedule, k) if algorithm == "cp_sgd" else None
        row = {
            "k": k,
            "consensus_error": cons_err,
            "residual": np.nan if residual is None else residual,
            "grad_norm_sq_at_mean": grad_norm_sq,
            "f_gap": np.nan if f_star is None else value_mean - f_star,
            "bits_cumulative": bits_cumulative,
            "eta": vals.eta if vals else schedule.eta,
            "gamma": vals.gamma if vals else getattr(schedule, "gamma", np.nan),
            "omega": vals.omega if vals else np.nan,
        }
        if spec_data is not None or (lyapunov and n == 1 and algorithm == "cp_sgd"):
            ly = lyapunov_components(
                state.x,
                state.v,
                state.xc,
                problem,
                spec_data,
                omega=vals.omega,
                beta1=vals.gamma / vals.omega,
                f_star=f_star,
                gb_stack=gb_stack,
                value_at_mean=value_mean,
            )
            row.update(v1=ly.v1, v2=ly.v2, v3=ly.v3, v4=ly.v4, v5=ly.v5, u=ly.u)
        for name, value in row.items():
            table[k, TRACE_COLUMNS.index(name)] = value
        if k == rounds:
            break

        dither = None
        if use_compressor and needs_dither:
            dither = [substream(seed, tag, "dither", i + 1, k) for i in range(n)]
        # a diverging run overflows before the guard trips; the guard is the
        # intended handler, so the transient warnings are suppressed
        with np.errstate(over="ignore", invalid="ignore"):
            if algorithm == "cp_sgd":
                state, stats = cp_sgd_round(
                    state, topology, compressor, oracle, schedule, dither
                )
                dual_sum = np.abs(state.v.sum(axis=0)).max()
                max_dual_sum = max(max_dual_sum, float(dual_sum))
            elif algorithm == "dsgd":
                state, stats = dsgd_round(
                    state, topology, mixing, oracle, schedule.eta
                )
            else:
                state, stats = choco_sgd_round(
                    state,
                    topology,
                    compressor,
                    oracle,
                    schedule.gamma,
                    schedule.eta,
                    dither,
                    mixing,
                )
        bits_cumulative += stats.bits_sent_total

    metadata = {
        "algorithm": algorithm,
        "algo_tag": tag,
        "seed": seed,
        "rounds": rounds,
        "noise_sigma": noise_sigma,
        "bias": np.asarray(bias).tolist() if np.ndim(bias) else float(bias),
        "compressor": compressor.describe() if use_compressor else None,
        "schedule": schedule.describe(),
        "problem": problem.fingerprint(),
        "lyapunov": bool(spec_data is not None or (lyapunov and n == 1)),
        "max_dual_sum_inf": max_dual_sum,
        "f_star": f_star,
    }
    if use_compressor and compressor is not None:
        metadata["compressor_phi"] = compressor.phi(d)
    trace = Trace(data=table, metadata=metadata)
    trace.validate()
    return trace
