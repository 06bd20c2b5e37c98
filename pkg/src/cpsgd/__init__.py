"""Simulator for compressed primal-dual stochastic gradient descent over
undirected graphs, with pluggable compressors, gossip baselines, and
convergence diagnostics."""

from .compression import (
    BBitsCompressor,
    CompressedMessage,
    IdentityCompressor,
    TopKCompressor,
    compress_b_bits,
    compress_identity,
    compress_top_k,
    estimate_contraction,
    make_compressor,
)
from .diagnostics import Trace, TRACE_COLUMNS, lyapunov_components, residual_update
from .harness import (
    ExperimentConfig,
    load_config,
    parse_config,
    run_experiment,
    speedup_sweep,
)
from .optimizers import (
    ChocoParams,
    ConstantSchedule,
    CoupledSchedule,
    DsgdParams,
    SpeedupSchedule,
    SwarmState,
    TimeVaryingSchedule,
    choco_sgd_round,
    cp_sgd_round,
    dsgd_round,
    initial_state,
    metropolis_weights,
    run,
    schedule_eval,
)
from .rng import substream
from .problems import (
    ClassificationProblem,
    NoisyOracle,
    QuadraticProblem,
    make_classification_problem,
    make_quadratic_problem,
    solve_reference_optimum,
    stochastic_gradient,
)
from .topology import (
    SpectralData,
    Topology,
    build_topology,
    consensus_error,
    ring_with_chords,
    single_agent_topology,
    spectral,
    topology_from_json,
)

__version__ = "0.1.0"
