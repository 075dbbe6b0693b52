import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qclt.mdp import (MdpModel, behavior_state_distribution, bellman_apply,
                      deterministic_policy, enumerate_q_star, estimate_lipschitz_L,
                      evaluate_policy, greedy_actions, greedy_policy, lipschitz_ratio,
                      pair_index, policy_kernel, solve_q_star)

from conftest import make_mdp, random_fixture


def bellman_loops(Q, m):
    """Oracle: the Bellman operator written with explicit loops."""
    out = np.zeros_like(Q)
    for s in range(m.n_states):
        for a in range(m.n_actions):
            ev = sum(m.transition[s, a, t] * max(Q[t]) for t in range(m.n_states))
            out[s, a] = m.reward[s, a] + m.discount * ev
    return out


q_tables = arrays(np.float64, (3, 2), elements=st.floats(-10, 10, allow_nan=False))


class TestMdpModel:
    def test_arrays_are_frozen(self, small_mdp):
        with pytest.raises(ValueError):
            small_mdp.reward[0, 0] = 1.0

    def test_shapes(self, default_mdp):
        assert (default_mdp.n_states, default_mdp.n_actions, default_mdp.n_pairs) == (3, 2, 6)

    @pytest.mark.parametrize("gamma", [1.0, -0.1, 1.5])
    def test_bad_discount(self, gamma):
        with pytest.raises(ValueError, match="discount"):
            make_mdp([[[1.0]]], [[0.5]], gamma)

    def test_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            make_mdp([[[0.5, 0.4]], [[0.5, 0.5]]], [[0.0], [0.0]], 0.5)

    def test_reward_range(self):
        with pytest.raises(ValueError, match="rewards"):
            make_mdp([[[1.0]]], [[1.5]], 0.5)

    def test_reward_shape(self):
        with pytest.raises(ValueError, match="reward"):
            make_mdp([[[1.0]]], [[0.5, 0.5]], 0.5)

    def test_scaled(self, default_mdp):
        half = default_mdp.scaled(0.5)
        np.testing.assert_array_equal(half.reward, 0.5 * default_mdp.reward)
        assert half.discount == default_mdp.discount

    def test_pair_index(self):
        assert pair_index(2, 1, 3) == 7


class TestBellman:
    def test_hand_example(self):
        m = make_mdp([[[0.5, 0.5], [1.0, 0.0]], [[0.0, 1.0], [0.25, 0.75]]],
                     [[1.0, 0.0], [0.5, 0.2]], 0.5)
        Q = np.array([[2.0, 4.0], [1.0, 0.0]])
        # V = [4, 1]
        expected = np.array([[1.0 + 0.5 * 2.5, 0.0 + 0.5 * 4.0],
                             [0.5 + 0.5 * 1.0, 0.2 + 0.5 * 1.75]])
        np.testing.assert_allclose(bellman_apply(Q, m), expected, atol=1e-15)

    @given(q_tables)
    def test_matches_loop_oracle(self, Q):
        m = random_fixture(1)
        np.testing.assert_allclose(bellman_apply(Q, m), bellman_loops(Q, m), atol=1e-12)

    @given(q_tables, q_tables)
    def test_contraction(self, Q1, Q2):
        m = random_fixture(1)
        lhs = np.max(np.abs(bellman_apply(Q1, m) - bellman_apply(Q2, m)))
        assert lhs <= m.discount * np.max(np.abs(Q1 - Q2)) + 1e-12

    @given(q_tables, arrays(np.float64, (3, 2), elements=st.floats(0, 5)))
    def test_monotone(self, Q, step):
        m = random_fixture(1)
        assert np.all(bellman_apply(Q, m) <= bellman_apply(Q + step, m) + 1e-12)

    def test_shape_mismatch(self, default_mdp):
        with pytest.raises(ValueError):
            bellman_apply(np.zeros((2, 2)), default_mdp)


class TestGreedy:
    def test_ties_go_to_lowest_index(self):
        np.testing.assert_array_equal(greedy_actions([[1, 1, 0], [0, 2, 2]]), [0, 1])

    def test_one_hot(self):
        pol = greedy_policy(np.array([[0.0, 1.0], [3.0, 2.0]]))
        np.testing.assert_array_equal(pol, [[0, 1], [1, 0]])

    def test_policy_matrix(self, default_mdp):
        pm = greedy_policy(np.array([[0.0, 1.0], [3.0, 2.0], [0.0, 0.0]]), default_mdp)
        np.testing.assert_array_equal(pm.actions, [1, 0, 0])
        np.testing.assert_allclose(pm.induced_kernel.sum(axis=1), 1.0, atol=1e-15)

    @given(q_tables)
    def test_kernel_identity(self, Q):
        m = random_fixture(1)
        pol = greedy_policy(Q)
        lhs = policy_kernel(pol, m) @ Q.ravel()
        rhs = (m.transition @ np.sum(pol * Q, axis=1)).ravel()
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestQStar:
    def test_default_fixture_values(self, default_mdp):
        q, pi = solve_q_star(default_mdp)
        np.testing.assert_array_equal(pi.actions, [0, 1, 0])
        np.testing.assert_allclose(q, [[1.707, 0.783], [0.730, 1.110], [0.965, 0.721]],
                                   atol=1e-3)

    @pytest.mark.parametrize("i", range(10))
    def test_matches_enumeration(self, i):
        m = random_fixture(i)
        if m.n_actions ** m.n_states > 5000:
            pytest.skip("enumeration too large")
        q, _ = solve_q_star(m)
        np.testing.assert_allclose(q, enumerate_q_star(m), atol=1e-9)

    def test_fixed_point(self, default_mdp):
        q, _ = solve_q_star(default_mdp)
        assert np.max(np.abs(bellman_apply(q, default_mdp) - q)) <= 1e-12

    def test_zero_discount_is_reward(self, small_mdp):
        m = MdpModel(small_mdp.transition, small_mdp.reward, 0.0, small_mdp.behavior_policy)
        q, _ = solve_q_star(m)
        np.testing.assert_array_equal(q, m.reward)

    def test_single_state_closed_form(self):
        m = make_mdp([[[1.0], [1.0]]], [[0.2, 0.7]], 0.9)
        q, pi = solve_q_star(m)
        v = 0.7 / 0.1
        np.testing.assert_allclose(q, [[0.2 + 0.9 * v, 0.7 + 0.9 * v]], rtol=1e-12)
        assert pi.actions.tolist() == [1]

    def test_bad_tol(self, small_mdp):
        with pytest.raises(ValueError):
            solve_q_star(small_mdp, tol=0.0)

    def test_evaluate_policy_is_fixed_point(self, default_mdp):
        pol = deterministic_policy([1, 0, 1], 2)
        q = evaluate_policy(pol, default_mdp)
        v = np.sum(pol * q, axis=1)
        np.testing.assert_allclose(
            q, default_mdp.reward + default_mdp.discount * default_mdp.transition @ v,
            atol=1e-12)


class TestBehaviorDistribution:
    def test_uniform_symmetric_chain(self):
        m = make_mdp([[[0.5, 0.5]] * 2] * 2, [[0, 0], [0, 0]], 0.5)
        np.testing.assert_allclose(behavior_state_distribution(m), [0.5, 0.5])

    def test_power_iteration_oracle(self, default_mdp):
        P_b = np.einsum("sa,sat->st", default_mdp.behavior_policy, default_mdp.transition)
        mu = np.full(3, 1 / 3)
        for _ in range(2000):
            mu = mu @ P_b
        np.testing.assert_allclose(behavior_state_distribution(default_mdp), mu, atol=1e-12)


class TestLipschitz:
    def test_degenerate_when_only_q_star(self, default_mdp):
        q, pi = solve_q_star(default_mdp)
        est = estimate_lipschitz_L(default_mdp, q, pi, q_samples=[q])
        assert est.degenerate and est.n_used == 0 and est.value == 0.0

    def test_ratio_zero_when_greedy_unchanged(self, default_mdp):
        q, pi = solve_q_star(default_mdp)
        assert lipschitz_ratio(q + 1e-3, q, pi.induced_kernel, default_mdp) == 0.0

    def test_grid_search_oracle(self, small_mdp):
        q, pi = solve_q_star(small_mdp)
        grid = np.linspace(0, 1 / (1 - small_mdp.discount), 5)
        samples = np.array(np.meshgrid(grid, grid, grid, grid)).reshape(4, -1).T
        samples = samples.reshape(-1, 2, 2)
        brute = 0.0
        for Q in samples:
            d = (Q - q).ravel()
            if np.max(np.abs(d)) == 0:
                continue
            P = policy_kernel(deterministic_policy(np.argmax(Q, axis=1), 2), small_mdp)
            brute = max(brute, np.max(np.abs((P - pi.induced_kernel) @ d))
                        / np.max(np.abs(d)) ** 2)
        est = estimate_lipschitz_L(small_mdp, q, pi, q_samples=samples)
        assert est.value == pytest.approx(brute, rel=1e-12)
        assert est.n_used == len(samples)

    def test_random_draws_deterministic(self, default_mdp):
        q, pi = solve_q_star(default_mdp)
        a = estimate_lipschitz_L(default_mdp, q, pi, n_samples=200, rng_seed=3)
        b = estimate_lipschitz_L(default_mdp, q, pi, n_samples=200, rng_seed=3)
        assert a == b and np.isfinite(a.value)
