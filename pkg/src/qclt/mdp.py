"""Finite MDPs, the Bellman optimality operator and exact optimal solutions.

State-action pairs are flattened as ``index = s * n_actions + a`` everywhere
(visitation matrix, policy kernels, ``A``, ``Sigma``).
"""

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from ._validation import check_positive_int, check_q_table, check_row_stochastic
from .exceptions import InternalError

VALUE_ITERATION_CAP = 1_000_000


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MdpModel:
    """Finite discounted MDP together with the behavior policy that drives it.

    Parameters
    ----------
    transition : ndarray, shape (S, A, S)
        ``transition[s, a, s2] = P(s2 | s, a)``.
    reward : ndarray, shape (S, A)
        Deterministic rewards in ``[0, 1]``.
    discount : float
        Discount factor in ``[0, 1)``.
    behavior_policy : ndarray, shape (S, A)
        Exploration policy ``pi_b(a | s)``.
    reward_noise : float, default=0
        Half-width of optional additive ``Uniform(-w, w)`` reward noise.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    behavior_policy: np.ndarray
    reward_noise: float = 0.0
    name: str = field(default="mdp", compare=False)

    def __post_init__(self):
        P = check_row_stochastic(self.transition, "transition")
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S); got {P.shape}")
        n_s, n_a, _ = P.shape
        r = np.asarray(self.reward, dtype=np.float64)
        if r.shape != (n_s, n_a):
            raise ValueError(f"reward must have shape {(n_s, n_a)}; got {r.shape}")
        if not np.all(np.isfinite(r)) or r.min() < 0 or r.max() > 1:
            raise ValueError("rewards must lie in [0, 1]")
        pb = check_row_stochastic(self.behavior_policy, "behavior_policy")
        if pb.shape != (n_s, n_a):
            raise ValueError(
                f"behavior_policy must have shape {(n_s, n_a)}; got {pb.shape}")
        gamma = float(self.discount)
        if not 0.0 <= gamma < 1.0:
            raise ValueError(f"discount must lie in [0, 1); got {gamma}")
        noise = float(self.reward_noise)
        if noise < 0 or not np.isfinite(noise):
            raise ValueError("reward_noise must be a finite nonnegative number")
        object.__setattr__(self, "transition", _frozen(P))
        object.__setattr__(self, "reward", _frozen(r))
        object.__setattr__(self, "behavior_policy", _frozen(pb))
        object.__setattr__(self, "discount", gamma)
        object.__setattr__(self, "reward_noise", noise)

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    @property
    def n_pairs(self):
        return self.n_states * self.n_actions

    def scaled(self, c):
        """Copy of the model with all rewards multiplied by ``c``."""
        return MdpModel(self.transition, c * self.reward, self.discount,
                        self.behavior_policy, c * self.reward_noise,
                        name=f"{self.name}*{c:g}")


@dataclass(frozen=True, eq=False)
class PolicyMatrix:
    """A policy and its induced state-action kernel ``P^pi``.

    ``induced_kernel[(s, a), (s2, a2)] = P(s2 | s, a) * pi(a2 | s2)`` so that
    ``P^pi Q = P (pi Q)`` on flattened tables.
    """

    policy: np.ndarray
    induced_kernel: np.ndarray

    @property
    def actions(self):
        return np.argmax(self.policy, axis=1)


def pair_index(s, a, n_actions):
    return s * n_actions + a


def bellman_apply(Q, m):
    """Bellman optimality operator ``r + gamma * E[max_a' Q(s', a')]``."""
    Q = check_q_table(Q, m.n_states, m.n_actions)
    v = Q.max(axis=1)
    return m.reward + m.discount * (m.transition @ v)


def greedy_actions(Q):
    """Per-state argmax, ties resolved to the lowest action index."""
    return np.argmax(np.asarray(Q), axis=1)


def deterministic_policy(actions, n_actions):
    actions = np.asarray(actions, dtype=np.intp)
    pol = np.zeros((actions.size, n_actions))
    pol[np.arange(actions.size), actions] = 1.0
    return pol


def policy_kernel(policy, m):
    """Induced kernel ``P^pi`` of shape (S*A, S*A) for a stochastic policy."""
    pol = np.asarray(policy, dtype=np.float64)
    # (s, a, s2) x (s2, a2) -> (s, a, s2, a2)
    K = m.transition[:, :, :, None] * pol[None, None, :, :]
    return K.reshape(m.n_pairs, m.n_pairs)


def policy_matrix(policy, m):
    pol = np.asarray(policy, dtype=np.float64)
    return PolicyMatrix(_frozen(pol), _frozen(policy_kernel(pol, m)))


def greedy_policy(Q, m=None):
    """Deterministic greedy policy w.r.t. ``Q`` (lowest index wins ties).

    Returns a :class:`PolicyMatrix` when the model is given, otherwise the
    (S, A) one-hot policy array.
    """
    Q = check_q_table(Q)
    pol = deterministic_policy(greedy_actions(Q), Q.shape[1])
    if m is None:
        return pol
    return policy_matrix(pol, m)


def evaluate_policy(policy, m):
    """Exact ``Q^pi`` by solving ``(I - gamma P^pi) q = r``."""
    P_pi = policy_kernel(policy, m)
    lhs = np.eye(m.n_pairs) - m.discount * P_pi
    q = np.linalg.solve(lhs, m.reward.ravel())
    return q.reshape(m.n_states, m.n_actions)


def solve_q_star(m, tol=1e-12, max_iter=VALUE_ITERATION_CAP):
    """Optimal Q-function by value iteration, then an exact policy-evaluation polish.

    Iterates until ``||T(Q) - Q||_inf <= tol * (1 - gamma) / (2 * gamma)`` so
    that the returned table is within ``tol`` of ``Q*``. The greedy policy of
    the iterate is then evaluated exactly and kept if its Bellman residual is
    no worse.

    Returns
    -------
    q_star : ndarray, shape (S, A)
    pi_star : PolicyMatrix
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    gamma = m.discount
    Q = np.zeros((m.n_states, m.n_actions))
    if gamma == 0.0:
        Q = bellman_apply(Q, m)
    else:
        stop = tol * (1.0 - gamma) / (2.0 * gamma)
        for _ in range(max_iter):
            TQ = bellman_apply(Q, m)
            gap = np.max(np.abs(TQ - Q))
            Q = TQ
            if gap <= stop:
                break
        else:
            raise InternalError(
                f"value iteration did not converge in {max_iter} sweeps "
                f"(last residual {gap:.3e}); the model is malformed")
        pol = greedy_policy(Q)
        Q_pe = evaluate_policy(pol, m)
        res_vi = np.max(np.abs(bellman_apply(Q, m) - Q))
        res_pe = np.max(np.abs(bellman_apply(Q_pe, m) - Q_pe))
        if res_pe <= res_vi:
            Q = Q_pe
    return Q, greedy_policy(Q, m)


def enumerate_q_star(m):
    """Brute-force ``Q*`` as the elementwise max of ``Q^pi`` over all
    deterministic policies. Exponential in S; use on small models only."""
    best = None
    for acts in product(range(m.n_actions), repeat=m.n_states):
        q = evaluate_policy(deterministic_policy(acts, m.n_actions), m)
        best = q if best is None else np.maximum(best, q)
    return best


def behavior_state_distribution(m):
    """Stationary distribution of the state chain under the behavior policy."""
    P_b = np.einsum("sa,sat->st", m.behavior_policy, m.transition)
    n = m.n_states
    lhs = P_b.T - np.eye(n)
    lhs[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    mu = np.linalg.solve(lhs, rhs)
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


@dataclass(frozen=True)
class LipschitzEstimate:
    value: float
    n_used: int
    degenerate: bool
    label: str = "sampled lower bound on L (not a certificate)"


def lipschitz_ratio(Q, q_star, pi_star_kernel, m):
    """``||(P^pi - P^pi*)(Q - Q*)||_inf / ||Q - Q*||_inf^2`` with pi greedy on Q.

    Returns ``None`` when ``Q == Q*``.
    """
    diff = (np.asarray(Q) - q_star).ravel()
    denom = np.max(np.abs(diff)) ** 2
    if denom == 0.0:
        return None
    P_pi = policy_kernel(greedy_policy(Q), m)
    num = np.max(np.abs((P_pi - pi_star_kernel) @ diff))
    return num / denom


def estimate_lipschitz_L(m, q_star, pi_star, n_samples=1000, rng_seed=0,
                         q_samples=None):
    """Largest observed ratio over random Q tables in ``[0, 1/(1-gamma)]``.

    Only a lower estimate of the constant in the quadratic-error assumption;
    finiteness cannot be decided by sampling. Explicit ``q_samples`` replace
    the random draws.
    """
    kernel = pi_star.induced_kernel if isinstance(pi_star, PolicyMatrix) \
        else policy_kernel(pi_star, m)
    if q_samples is None:
        check_positive_int(n_samples, "n_samples")
        rng = np.random.default_rng(rng_seed)
        hi = 1.0 / (1.0 - m.discount)
        q_samples = rng.uniform(0.0, hi, size=(n_samples, m.n_states, m.n_actions))
    best = 0.0
    used = 0
    for Q in q_samples:
        ratio = lipschitz_ratio(Q, q_star, kernel, m)
        if ratio is None:
            continue
        used += 1
        best = max(best, ratio)
    return LipschitzEstimate(float(best), used, degenerate=(used == 0))
