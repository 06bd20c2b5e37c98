import numpy as np
import pytest

from cpsgd.compression import BBitsCompressor, IdentityCompressor, TopKCompressor
from cpsgd.optimizers import (
    BadMixingMatrix,
    ChocoParams,
    ConstantSchedule,
    CoupledSchedule,
    DsgdParams,
    InvalidSchedule,
    NonFiniteIterate,
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
from cpsgd.problems import NoisyOracle, QuadraticProblem, make_quadratic_problem
from cpsgd.rng import substream
from cpsgd.topology import build_topology, single_agent_topology

from conftest import BENCH_EDGES


def uncompressed_primal_dual(x0, laplacian, oracle, eta, gamma, omega, rounds):
    """Independent oracle: the raw primal-dual recursion without any
    compression estimate (neighbors exchange x directly)."""
    x = x0.copy()
    v = np.zeros_like(x0)
    history = [x.copy()]
    for k in range(rounds):
        grads = oracle.gradient_stack(x, k)
        lap_mix = laplacian @ x
        x_new = x - eta * (gamma * lap_mix + omega * v + grads)
        v_new = v + (eta * omega) * lap_mix
        x, v = x_new, v_new
        history.append(x.copy())
    return history


@pytest.fixture(scope="module")
def quad6():
    return make_quadratic_problem(6, 4, (0.5, 2.0), 1.0, substream(1, "data"))


@pytest.fixture(scope="module")
def topo6(bench_topology):
    return bench_topology


class TestSchedules:
    def test_constant_is_constant(self):
        sched = ConstantSchedule(eta=0.05, gamma=4.0, omega=0.5, alpha_x=0.2)
        for k in (0, 1, 999):
            vals = schedule_eval(sched, k)
            assert (vals.eta, vals.gamma, vals.omega, vals.alpha_x) == (
                0.05, 4.0, 0.5, 0.2,
            )
        assert sched.beta1 == pytest.approx(8.0)
        assert sched.beta2 == pytest.approx(0.025)

    def test_speedup_arithmetic(self):
        sched = SpeedupSchedule(beta1=1.0, beta2=1.0, rounds=100, n_agents=4,
                                alpha_x=0.2)
        vals = schedule_eval(sched, 0)
        assert vals.omega == pytest.approx(5.0)
        assert vals.eta == pytest.approx(0.2)
        assert vals.gamma == pytest.approx(5.0)

    def test_time_varying_first_round(self):
        sched = TimeVaryingSchedule()
        vals = schedule_eval(sched, 0)
        assert (vals.eta, vals.gamma, vals.omega, vals.alpha_x) == (
            1e-4, 45.0, 5.0, 0.2,
        )
        # omega_k must be non-decreasing
        omegas = [schedule_eval(sched, k).omega for k in range(10)]
        assert all(b >= a for a, b in zip(omegas, omegas[1:]))

    def test_coupled_relations(self):
        sched = CoupledSchedule(beta1=2.0, beta2=0.1, omega=2.0, alpha_x=0.2)
        vals = schedule_eval(sched, 3)
        assert vals.gamma == pytest.approx(sched.beta1 * vals.omega)
        assert vals.eta == pytest.approx(sched.beta2 / vals.omega)

    def test_invalid_parameters(self):
        with pytest.raises(InvalidSchedule):
            ConstantSchedule(eta=-0.1, gamma=1.0, omega=1.0, alpha_x=0.2)
        with pytest.raises(InvalidSchedule):
            CoupledSchedule(beta1=1.0, beta2=0.0, omega=1.0, alpha_x=0.2)
        with pytest.raises(InvalidSchedule):
            schedule_eval(TimeVaryingSchedule(), -1)


class TestCpSgdRound:
    def test_single_agent_reduces_to_centralized_gd(self):
        prob = QuadraticProblem(
            hessians=np.stack([np.diag([1.0, 2.0])]),
            offsets=np.array([[1.0, -1.0]]),
        )
        oracle = NoisyOracle(prob, 0.0, seed=1)
        topo = single_agent_topology()
        sched = ConstantSchedule(eta=0.1, gamma=1.0, omega=1.0, alpha_x=0.2)
        state = SwarmState(
            x=np.array([[2.0, 2.0]]), v=np.zeros((1, 2)), xc=np.zeros((1, 2))
        )
        expect = state.x[0].copy()
        for _ in range(20):
            state, _ = cp_sgd_round(state, topo, IdentityCompressor(), oracle, sched)
            expect = expect - 0.1 * prob.local_grad(1, expect)
            np.testing.assert_array_equal(state.x[0], expect)
        assert np.all(state.v == 0.0)

    def test_mean_iterate_follows_recorded_mean_gradient(self, quad6, topo6):
        sched = ConstantSchedule(eta=0.05, gamma=4.0, omega=0.5, alpha_x=0.2)
        oracle = NoisyOracle(quad6, np.sqrt(0.5), seed=3, tag="meantest")
        state = initial_state(6, 4, seed=3)
        for k in range(200):
            mean_before = state.x.mean(axis=0)
            dither = [substream(3, "dither", i, k) for i in range(6)]
            state, stats = cp_sgd_round(
                state, topo6, BBitsCompressor(2), oracle, sched, dither
            )
            predicted = mean_before - 0.05 * stats.mean_stoch_grad
            assert np.linalg.norm(state.x.mean(axis=0) - predicted) <= 1e-10

    def test_identity_compressor_matches_uncompressed_recursion(self, quad6, topo6):
        eta, gamma, omega = 0.05, 4.0, 0.5
        sched = ConstantSchedule(eta=eta, gamma=gamma, omega=omega, alpha_x=0.2)
        oracle = NoisyOracle(quad6, np.sqrt(0.5), seed=11, tag="equiv")
        state = initial_state(6, 4, seed=11)
        expected = uncompressed_primal_dual(
            state.x, topo6.laplacian,
            NoisyOracle(quad6, np.sqrt(0.5), seed=11, tag="equiv"),
            eta, gamma, omega, rounds=100,
        )
        for k in range(100):
            state, _ = cp_sgd_round(state, topo6, IdentityCompressor(), oracle, sched)
            assert state.x.tobytes() == expected[k + 1].tobytes()

    def test_dual_sum_stays_zero(self, quad6, topo6):
        sched = ConstantSchedule(eta=0.05, gamma=4.0, omega=0.5, alpha_x=0.2)
        oracle = NoisyOracle(quad6, np.sqrt(0.5), seed=5, tag="dual")
        state = initial_state(6, 4, seed=5)
        for k in range(200):
            state, _ = cp_sgd_round(state, topo6, TopKCompressor(2), oracle, sched)
            assert np.abs(state.v.sum(axis=0)).max() <= 1e-9

    def test_consensus_fixed_point_is_noop(self, topo6):
        # all agents share the optimum of a homogeneous ensemble: every
        # local gradient vanishes at the consensus point
        target = np.array([0.5, -0.25, 1.0, 0.0])
        prob = QuadraticProblem(
            hessians=np.stack([np.eye(4)] * 6),
            offsets=np.tile(target, (6, 1)),
        )
        oracle = NoisyOracle(prob, 0.0, seed=1)
        sched = ConstantSchedule(eta=0.05, gamma=4.0, omega=0.5, alpha_x=0.2)
        x = np.tile(target, (6, 1))
        state = SwarmState(x=x.copy(), v=np.zeros((6, 4)), xc=x.copy())
        for comp in (TopKCompressor(2), IdentityCompressor(), BBitsCompressor(2)):
            dither = [substream(0, "d", i) for i in range(6)]
            new_state, _ = cp_sgd_round(state, topo6, comp, oracle, sched, dither)
            assert np.abs(new_state.x - x).max() <= 1e-12
            assert np.abs(new_state.v).max() <= 1e-12
            assert np.abs(new_state.xc - x).max() <= 1e-12

    def test_agent_relabeling_permutes_trajectory(self, quad6):
        perm = np.array([2, 0, 4, 1, 5, 3])  # new row i holds old row perm[i]
        topo = build_topology(6, BENCH_EDGES)
        inv = np.argsort(perm)
        permuted_edges = [
            tuple(sorted((int(inv[i - 1]) + 1, int(inv[j - 1]) + 1)))
            for i, j in BENCH_EDGES
        ]
        topo_p = build_topology(6, permuted_edges)
        prob_p = QuadraticProblem(
            hessians=quad6.hessians[perm], offsets=quad6.offsets[perm]
        )
        sched = ConstantSchedule(eta=0.05, gamma=4.0, omega=0.5, alpha_x=0.2)
        x0 = substream(42, "init").random((6, 4))
        state_a = SwarmState(x=x0.copy(), v=np.zeros((6, 4)), xc=np.zeros((6, 4)))
        state_b = SwarmState(x=x0[perm].copy(), v=np.zeros((6, 4)), xc=np.zeros((6, 4)))
        oracle_a = NoisyOracle(quad6, 0.0, seed=1)
        oracle_b = NoisyOracle(prob_p, 0.0, seed=1)
        for _ in range(100):
            state_a, _ = cp_sgd_round(state_a, topo, TopKCompressor(2), oracle_a, sched)
            state_b, _ = cp_sgd_round(state_b, topo_p, TopKCompressor(2), oracle_b, sched)
        # reordered Laplacian row sums shift the float rounding, so exact
        # equivariance is checked at the accumulation-noise scale
        np.testing.assert_allclose(state_b.x, state_a.x[perm], rtol=0, atol=1e-12)
        np.testing.assert_allclose(state_b.v, state_a.v[perm], rtol=0, atol=1e-12)

    def test_dimension_mismatch_rejected(self, quad6, topo6):
        sched = ConstantSchedule(eta=0.05, gamma=4.0, omega=0.5, alpha_x=0.2)
        oracle = NoisyOracle(quad6, 0.0, seed=1)
        bad = SwarmState(x=np.zeros((5, 4)), v=np.zeros((5, 4)), xc=np.zeros((5, 4)))
        with pytest.raises(ValueError):
            cp_sgd_round(bad, topo6, IdentityCompressor(), oracle, sched)


class TestDsgd:
    def test_homogeneous_complete_graph_is_centralized_gd(self):
        target = np.array([1.0, -2.0])
        prob = QuadraticProblem(
            hessians=np.stack([np.eye(2)] * 4),
            offsets=np.tile(target, (4, 1)),
        )
        topo = build_topology(4, [(i, j) for i in range(1, 5) for j in range(i + 1, 5)])
        mixing = metropolis_weights(topo)
        np.testing.assert_allclose(mixing, np.full((4, 4), 0.25))
        oracle = NoisyOracle(prob, 0.0, seed=1)
        x = np.tile([3.0, 3.0], (4, 1))
        state = SwarmState(x=x.copy(), v=np.zeros((4, 2)), xc=np.zeros((4, 2)))
        centralized = x[0].copy()
        for _ in range(30):
            state, _ = dsgd_round(state, topo, mixing, oracle, step=0.1)
            centralized = centralized - 0.1 * (centralized - target)
            np.testing.assert_allclose(state.x, np.tile(centralized, (4, 1)),
                                       atol=1e-12)

    def test_one_round_hand_computation(self):
        prob = QuadraticProblem(
            hessians=np.stack([np.eye(1), 2 * np.eye(1)]),
            offsets=np.array([[1.0], [-1.0]]),
        )
        topo = build_topology(2, [(1, 2)])
        mixing = metropolis_weights(topo)
        np.testing.assert_allclose(mixing, [[0.5, 0.5], [0.5, 0.5]])
        oracle = NoisyOracle(prob, 0.0, seed=1)
        state = SwarmState(
            x=np.array([[2.0], [0.0]]), v=np.zeros((2, 1)), xc=np.zeros((2, 1))
        )
        new_state, stats = dsgd_round(state, topo, mixing, oracle, step=0.1)
        # by hand, gradients taken at the pre-mixing iterates:
        # agent1: mix 0.5*2+0.5*0 = 1, grad at 2 is 1*(2-1) = 1 -> 1 - 0.1 = 0.9
        # agent2: mix 1, grad at 0 is 2*(0+1) = 2 -> 1 - 0.2 = 0.8
        np.testing.assert_allclose(new_state.x, [[0.9], [0.8]], atol=1e-12)
        assert stats.bits_sent_total == 2 * 32 * 1

    def test_bad_mixing_rejected(self, quad6, topo6):
        oracle = NoisyOracle(quad6, 0.0, seed=1)
        state = initial_state(6, 4, seed=1)
        bad = np.full((6, 6), 1.0)
        with pytest.raises(BadMixingMatrix):
            dsgd_round(state, topo6, bad, oracle, step=0.1)


class TestChocoSgd:
    def test_identity_compressor_is_exact_gossip_sgd(self, quad6, topo6):
        oracle = NoisyOracle(quad6, 0.0, seed=2)
        state = initial_state(6, 4, seed=2)
        x = state.x.copy()
        mixing = metropolis_weights(topo6)
        for k in range(50):
            state, _ = choco_sgd_round(
                state, topo6, IdentityCompressor(), oracle, 0.2, 0.05
            )
            grads = np.stack([quad6.local_grad(i + 1, x[i]) for i in range(6)])
            half = x - 0.05 * grads
            x = half + 0.2 * (mixing @ half - half)
            np.testing.assert_array_equal(state.x, x)
            np.testing.assert_array_equal(state.xc, half)

    def test_zero_gossip_decouples_agents(self, quad6, topo6):
        oracle = NoisyOracle(quad6, 0.0, seed=4)
        state = initial_state(6, 4, seed=4)
        isolated = state.x.copy()
        for k in range(50):
            state, _ = choco_sgd_round(
                state, topo6, IdentityCompressor(), oracle, 0.0, 0.05
            )
        # isolated per-agent descent oracle
        for _ in range(50):
            for i in range(6):
                isolated[i] = isolated[i] - 0.05 * quad6.local_grad(i + 1, isolated[i])
        np.testing.assert_allclose(state.x, isolated, atol=1e-12)

    def test_bench_parameters_stable(self, quad6, topo6):
        trace = run(
            "choco_sgd", quad6, topo6, TopKCompressor(2),
            ChocoParams(gamma=0.2, eta=0.05), rounds=300, seed=1,
            noise_sigma=np.sqrt(0.5),
        )
        assert np.isfinite(trace.column("consensus_error")).all()

    def test_baselines_run_on_classification_instance(self, topo6):
        from cpsgd.problems import make_classification_problem

        prob = make_classification_problem(6, 200, 10, 0.001, 1.0,
                                           substream(1, "data"))
        for algo, sched, comp in (
            ("dsgd", DsgdParams(eta=0.05), None),
            ("choco_sgd", ChocoParams(gamma=0.2, eta=0.05), TopKCompressor(2)),
        ):
            trace = run(algo, prob, topo6, comp, sched, rounds=300, seed=1,
                        noise_sigma=np.sqrt(0.5))
            for col in ("consensus_error", "grad_norm_sq_at_mean",
                        "bits_cumulative"):
                assert np.isfinite(trace.column(col)).all()
            assert trace.column("consensus_error")[-1] < trace.column(
                "consensus_error")[0]


class TestRun:
    def test_zero_rounds_rejected(self, quad6, topo6):
        with pytest.raises(ValueError):
            run("cp_sgd", quad6, topo6, TopKCompressor(2),
                ConstantSchedule(eta=0.05, gamma=4.0, omega=0.5, alpha_x=0.2),
                rounds=0, seed=1)

    def test_same_seed_bit_identical_traces(self, quad6, topo6):
        kwargs = dict(
            algorithm="cp_sgd", problem=quad6, topology=topo6,
            compressor=BBitsCompressor(2),
            schedule=ConstantSchedule(eta=0.05, gamma=4.0, omega=0.5, alpha_x=0.2),
            rounds=120, seed=9, noise_sigma=np.sqrt(0.5),
            reference=quad6.optimum(),
        )
        a = run(**kwargs)
        b = run(**kwargs)
        assert a.to_csv_text() == b.to_csv_text()

    def test_nonfinite_iterate_aborts(self, quad6, topo6):
        with pytest.raises(NonFiniteIterate):
            run("cp_sgd", quad6, topo6, TopKCompressor(2),
                ConstantSchedule(eta=100.0, gamma=50.0, omega=10.0, alpha_x=0.2),
                rounds=3000, seed=1)

    def test_schedule_kind_enforced(self, quad6, topo6):
        with pytest.raises(InvalidSchedule):
            run("dsgd", quad6, topo6, None,
                ConstantSchedule(eta=0.05, gamma=4.0, omega=0.5, alpha_x=0.2),
                rounds=10, seed=1)

    def test_alpha_x_contract_guard(self, quad6, topo6):
        with pytest.raises(InvalidSchedule):
            run("cp_sgd", quad6, topo6, TopKCompressor(2),
                ConstantSchedule(eta=0.05, gamma=4.0, omega=0.5, alpha_x=1.5),
                rounds=10, seed=1)

    def test_trace_rows_and_monotone_columns(self, quad6, topo6):
        trace = run(
            "cp_sgd", quad6, topo6, TopKCompressor(2),
            ConstantSchedule(eta=0.05, gamma=4.0, omega=0.5, alpha_x=0.2),
            rounds=150, seed=2, noise_sigma=np.sqrt(0.5),
            reference=quad6.optimum(),
        )
        assert trace.rows == 151
        res = trace.column("residual")
        assert np.all(np.diff(res) <= 0 + 1e-15)
        bits = trace.column("bits_cumulative")
        assert np.all(np.diff(bits) >= 0)
        # top-2 on d=4: 2 * (32 + 2) = 68 bits per agent, 6 agents per round
        assert bits[1] - bits[0] == 6 * 68

    def test_time_varying_schedule_runs(self, quad6, topo6):
        trace = run(
            "cp_sgd", quad6, topo6, TopKCompressor(2), TimeVaryingSchedule(),
            rounds=200, seed=3, noise_sigma=np.sqrt(0.5),
        )
        assert trace.column("omega")[0] == 5.0
        assert trace.column("omega")[100] == 5.0 * 101
