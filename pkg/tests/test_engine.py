from decimal import Decimal, getcontext
from math import sqrt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qclt.chain import build_joint_chain
from qclt.engine import (SandwichState, StepsizeSchedule, async_q_step, replica_rng,
                         run_trajectory, sampled_noise, sandwich_step, stepsize_at,
                         stepsize_vector, zeta_indices)
from qclt.exceptions import ConfigError
from qclt.mdp import MdpModel, behavior_state_distribution
from qclt.oracle import build_oracle

from conftest import make_mdp

SCHED = StepsizeSchedule(alpha=5, b=12, beta=2 / 3)


def reference_phi(m, sched, K, seed, replica=0):
    """Oracle: plain loop over the documented stream layout.

    One uniform picks ``s_0`` from the behavior state law, then one uniform
    per step picks ``(a, s')`` by inversion over the lexicographic
    ``(a, s')`` list of state ``s``. Partial sums use Neumaier compensation.
    """
    rng = replica_rng(seed, replica)
    mu = np.cumsum(behavior_state_distribution(m))
    mu[-1] = 1.0
    s = int(np.searchsorted(mu, rng.random(), side="right"))
    u = rng.random(K)
    tables = {}
    for x in range(m.n_states):
        pairs = [(a, t) for a in range(m.n_actions) for t in range(m.n_states)
                 if m.behavior_policy[x, a] > 0 and m.transition[x, a, t] > 0]
        c = np.cumsum([m.behavior_policy[x, a] * m.transition[x, a, t] for a, t in pairs])
        c[-1] = 1.0
        tables[x] = (pairs, c)
    o = build_oracle(m)
    Q = np.zeros((m.n_states, m.n_actions))
    total = np.zeros_like(Q)
    comp = np.zeros_like(Q)
    for k in range(K):
        pairs, c = tables[s]
        j = 0
        while j < len(c) - 1 and u[k] >= c[j]:
            j += 1
        a, s2 = pairs[j]
        alpha_k = sched.alpha * (k + sched.b) ** (-sched.beta)
        q = Q[s, a]
        Q[s, a] = q + alpha_k * (m.reward[s, a] + m.discount * max(Q[s2]) - q)
        s = s2
        for x in range(m.n_states):
            for b in range(m.n_actions):
                e = Q[x, b] - o.q_star[x, b]
                t = total[x, b] + e
                if abs(total[x, b]) >= abs(e):
                    comp[x, b] += (total[x, b] - t) + e
                else:
                    comp[x, b] += (e - t) + total[x, b]
                total[x, b] = t
    return (total + comp).ravel() * (1.0 / sqrt(K))


class TestStepsizes:
    def test_examples(self):
        s = StepsizeSchedule(alpha=0.5, b=1, beta=2 / 3)
        assert stepsize_at(s, 0) == 0.5
        assert stepsize_at(s, 7) == pytest.approx(0.125, rel=1e-15)

    def test_extended_precision(self):
        getcontext().prec = 50
        s = StepsizeSchedule(alpha=1, b=1, beta=0.51)
        k = 10**6
        exact = (Decimal(k + 1) ** Decimal(-0.51))
        assert abs(Decimal(stepsize_at(s, k)) / exact - 1) <= Decimal("1e-14")

    def test_vector_matches_scalar(self):
        v = stepsize_vector(SCHED, 50)
        np.testing.assert_allclose(v, [stepsize_at(SCHED, k) for k in range(50)], rtol=1e-15)

    @given(st.floats(0.51, 0.99), st.floats(1.0, 100.0))
    @settings(max_examples=40, deadline=None)
    def test_shape(self, beta, b):
        s = StepsizeSchedule(alpha=b ** beta, b=b, beta=beta)
        a = stepsize_vector(s, 500)
        k = np.arange(500)
        assert np.all(np.diff(a) < 0) and np.all(np.diff(k * a) > 0)

    @pytest.mark.parametrize("kw,field", [
        ({"alpha": 0, "b": 1, "beta": 0.6}, "schedule.alpha"),
        ({"alpha": 1, "b": 0, "beta": 0.6}, "schedule.b"),
        ({"alpha": 1, "b": 1, "beta": 1.0}, "schedule.beta"),
        ({"alpha": 5, "b": 1, "beta": 0.6}, "schedule"),
    ])
    def test_invalid(self, kw, field):
        with pytest.raises(ConfigError) as err:
            StepsizeSchedule(**kw)
        assert err.value.field == field

    def test_clt_gate(self):
        with pytest.raises(ConfigError):
            StepsizeSchedule(alpha=0.5, b=1, beta=0.4).require_clt()
        assert SCHED.require_clt() is SCHED


class TestAsyncStep:
    def test_zero_stepsize(self, default_mdp):
        Q = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(async_q_step(Q, (0, 1, 2), 0.0, default_mdp), Q)

    def test_at_q_star(self, default_mdp, default_oracle):
        q = default_oracle.q_star
        y = (2, 0, 1)
        out = async_q_step(q, y, 0.3, default_mdp)
        expect = q[2, 0] + 0.3 * (default_mdp.reward[2, 0]
                                  + default_mdp.discount * q[1].max() - q[2, 0])
        assert out[2, 0] == expect
        assert out[2, 0] != q[2, 0]

    def test_scalar(self):
        m = make_mdp([[[1.0]]], [[1.0]], 0.5)
        np.testing.assert_array_equal(async_q_step(np.zeros((1, 1)), (0, 0, 0), 1.0, m), [[1.0]])

    def test_bad_stepsize(self, default_mdp):
        with pytest.raises(ValueError):
            async_q_step(np.zeros((3, 2)), (0, 0, 0), 1.5, default_mdp)


class TestRunTrajectory:
    def test_zero_reward_is_null(self, zero_reward_mdp):
        chain = build_joint_chain(zero_reward_mdp)
        o = build_oracle(zero_reward_mdp, chain)
        rec = run_trajectory(zero_reward_mdp, chain, SCHED, 5000, oracle=o,
                             track_sandwich=True)
        np.testing.assert_array_equal(o.q_star, 0.0)
        np.testing.assert_array_equal(rec.phi, 0.0)
        assert rec.sandwich_violation_count == 0

    def test_single_step_by_hand(self):
        m = make_mdp([[[1.0]]], [[1.0]], 0.5)
        chain = build_joint_chain(m)
        o = build_oracle(m, chain)
        sched = StepsizeSchedule(alpha=0.5, b=1, beta=2 / 3)
        rec = run_trajectory(m, chain, sched, 1, zeta_grid=[1.0], oracle=o)
        # Q_1 = 0.5 * 1, Q* = 2
        np.testing.assert_array_equal(rec.phi, [[0.5 - 2.0]])

    def test_reference_loop_bit_for_bit(self, default_mdp, default_chain, default_oracle):
        rec = run_trajectory(default_mdp, default_chain, SCHED, 10_000, seed=42,
                             replica=3, oracle=default_oracle)
        ref = reference_phi(default_mdp, SCHED, 10_000, seed=42, replica=3)
        np.testing.assert_array_equal(rec.phi[-1], ref)
        np.testing.assert_array_equal(rec.final_averaged_error, ref)

    def test_deterministic(self, default_mdp, default_chain, default_oracle):
        a = run_trajectory(default_mdp, default_chain, SCHED, 3000, seed=1, oracle=default_oracle)
        b = run_trajectory(default_mdp, default_chain, SCHED, 3000, seed=1, oracle=default_oracle)
        c = run_trajectory(default_mdp, default_chain, SCHED, 3000, seed=2, oracle=default_oracle)
        np.testing.assert_array_equal(a.phi, b.phi)
        assert not np.array_equal(a.phi, c.phi)

    def test_chunking_invariant(self, default_mdp, default_chain, default_oracle):
        # K crosses a chunk boundary; phi at zeta=0.5 must equal the K/2 prefix
        K = 150_000
        rec = run_trajectory(default_mdp, default_chain, SCHED, K, zeta_grid=[0.5, 1.0],
                             oracle=default_oracle)
        half = run_trajectory(default_mdp, default_chain, SCHED, K // 2, zeta_grid=[1.0],
                              oracle=default_oracle)
        np.testing.assert_allclose(rec.phi[0] * sqrt(K), half.phi[0] * sqrt(K // 2),
                                   rtol=0, atol=1e-9)

    def test_checkpoints(self, default_mdp, default_chain, default_oracle):
        rec = run_trajectory(default_mdp, default_chain, SCHED, 1000, oracle=default_oracle,
                             checkpoints=[0, 10, 1000])
        np.testing.assert_array_equal(rec.iterates_kept[0], 0.0)
        np.testing.assert_array_equal(rec.iterates_kept[-1], rec.final_q)
        assert rec.sup_error_trace[0] == pytest.approx(np.abs(default_oracle.q_star).max())

    def test_bounded_iterates(self, default_mdp, default_chain):
        rec = run_trajectory(default_mdp, default_chain, SCHED, 20_000,
                             checkpoints=range(0, 20_001, 500))
        hi = 1 / (1 - default_mdp.discount)
        assert rec.iterates_kept.min() >= 0 and rec.iterates_kept.max() <= hi

    def test_reward_noise_bounds(self, default_mdp):
        m = MdpModel(default_mdp.transition, default_mdp.reward, default_mdp.discount,
                     default_mdp.behavior_policy, reward_noise=0.2)
        chain = build_joint_chain(m)
        rec = run_trajectory(m, chain, SCHED, 20_000, checkpoints=range(0, 20_001, 500))
        g = m.discount
        assert rec.iterates_kept.min() >= -0.2 / (1 - g)
        assert rec.iterates_kept.max() <= 1.2 / (1 - g)

    def test_argument_errors(self, default_mdp, default_chain, default_oracle):
        with pytest.raises(ValueError):
            run_trajectory(default_mdp, default_chain, SCHED, 0)
        with pytest.raises(ValueError):
            run_trajectory(default_mdp, default_chain, SCHED, 10, checkpoints=[11])
        with pytest.raises(ValueError):
            run_trajectory(default_mdp, default_chain, SCHED, 10, track_sandwich=True)
        with pytest.raises(ValueError):
            run_trajectory(default_mdp, default_chain, SCHED, 10, zeta_grid=[0.6, 0.3])

    def test_zeta_indices_use_decimal_value(self):
        assert 0.29 * 100 < 29
        assert zeta_indices([0.29, 1.0], 100).tolist() == [29, 100]


class TestSandwich:
    def test_zero_stepsize(self, default_oracle):
        st0 = SandwichState.start(np.arange(6.0))
        nxt = sandwich_step(st0, np.arange(6.0), (0, 0, 0), 0.0, default_oracle, np.ones(6))
        np.testing.assert_array_equal(nxt.delta_up, st0.delta_up)
        np.testing.assert_array_equal(nxt.delta_down, st0.delta_down)

    def test_coincide_without_noise_at_pi_star(self, default_oracle):
        # a small perturbation keeps the greedy policy at pi*
        d = np.full(6, 1e-3)
        st0 = SandwichState.start(d)
        nxt = sandwich_step(st0, d, (0, 0, 1), 0.2, default_oracle, np.zeros(6))
        np.testing.assert_array_equal(nxt.delta_up, nxt.delta_down)
        exact = d - 0.2 * default_oracle.A @ d
        np.testing.assert_allclose(nxt.delta_up, exact, atol=1e-16)

    def test_python_step_matches_kernel(self, default_mdp, default_chain, default_oracle):
        """The plain-Python comparison sequences stay ordered over a run."""
        rng = replica_rng(9, 0)
        start, cdf, acts, nxts, _ = default_chain.sampler_tables
        Q = np.zeros((3, 2))
        state = SandwichState.start(Q - default_oracle.q_star)
        s = 0
        for k in range(1000):
            x = rng.random()
            idx = start[s]
            while idx < start[s + 1] - 1 and x >= cdf[idx]:
                idx += 1
            y = (s, int(acts[idx]), int(nxts[idx]))
            a_k = stepsize_at(SCHED, k)
            delta = (Q - default_oracle.q_star).ravel()
            noise = sampled_noise(Q, y, default_mdp, default_chain.visitation)
            state = sandwich_step(state, delta, y, a_k, default_oracle, noise)
            Q = async_q_step(Q, y, a_k, default_mdp)
            assert state.contains(Q - default_oracle.q_star)
            s = y[2]

    def test_fixture_run(self, default_mdp, default_chain, default_oracle):
        rec = run_trajectory(default_mdp, default_chain, SCHED, 1000, oracle=default_oracle,
                             track_sandwich=True)
        assert rec.sandwich_violation_count == 0 and rec.sandwich_tracked
