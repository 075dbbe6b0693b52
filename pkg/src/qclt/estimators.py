"""Scikit-learn style front ends.

The estimators take an :class:`~qclt.mdp.MdpModel` in ``fit`` instead of a
feature matrix; parameters, ``get_params``/``set_params`` and fitted
attributes follow the usual conventions.
"""

import numpy as np
from scipy.special import ndtri
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive_int
from .chain import build_joint_chain
from .engine import StepsizeSchedule, replica_rng, run_trajectory
from .mdp import MdpModel, greedy_actions
from .oracle import build_oracle


def _check_mdp(m):
    if not isinstance(m, MdpModel):
        raise TypeError(f"expected an MdpModel, got {type(m).__name__}")
    return m


class AveragedQLearning(BaseEstimator):
    """Asynchronous Q-learning along one behavior trajectory with
    Polyak-Ruppert averaging.

    Parameters
    ----------
    alpha, b, beta : float
        Stepsize schedule ``alpha * (k + b) ** -beta``.
    n_steps : int
        Number of updates ``K``.
    random_state : int
        Master seed of the sampling stream.

    Attributes
    ----------
    q_ : ndarray, shape (S, A)
        Last iterate ``Q_K``.
    averaged_q_ : ndarray, shape (S, A)
        ``(1/K) sum_{k=1}^K Q_k``.
    policy_ : ndarray, shape (S,)
        Greedy actions of ``averaged_q_``.
    """

    def __init__(self, alpha=5.0, b=12.0, beta=2 / 3, n_steps=100_000, random_state=0):
        self.alpha = alpha
        self.b = b
        self.beta = beta
        self.n_steps = n_steps
        self.random_state = random_state

    def fit(self, mdp, y=None):
        m = _check_mdp(mdp)
        K = check_positive_int(self.n_steps, "n_steps")
        sched = StepsizeSchedule(self.alpha, self.b, self.beta)
        chain = build_joint_chain(m)
        rec = run_trajectory(m, chain, sched, K, zeta_grid=[1.0],
                             seed=int(self.random_state))
        self.q_ = rec.final_q
        self.averaged_q_ = (rec.final_averaged_error / np.sqrt(K)).reshape(m.n_states, m.n_actions)
        self.policy_ = greedy_actions(self.averaged_q_)
        self.n_states_ = m.n_states
        self.record_ = rec
        return self

    def predict(self, states):
        """Greedy action of the averaged estimate in each state."""
        check_is_fitted(self, "averaged_q_")
        states = np.asarray(states, dtype=np.intp)
        if np.any(states < 0) or np.any(states >= self.n_states_):
            raise ValueError("state index out of range")
        return self.policy_[states]


class LimitLawEstimator(BaseEstimator):
    """Closed-form Gaussian limit of ``K**-0.5 * sum_k (Q_k - Q*)``.

    Parameters
    ----------
    tol : float
        Accuracy of the optimal Q-function.

    Attributes
    ----------
    oracle_ : TheoryOracle
    q_star_ : ndarray, shape (S, A)
    limit_cov_ : ndarray, shape (S*A, S*A)
    limit_sqrt_ : ndarray, shape (S*A, S*A)
    """

    def __init__(self, tol=1e-13):
        self.tol = tol

    def fit(self, mdp, y=None):
        m = _check_mdp(mdp)
        self.oracle_ = build_oracle(m, tol=self.tol)
        self.q_star_ = self.oracle_.q_star
        self.limit_cov_ = self.oracle_.limit_cov
        self.limit_sqrt_ = self.oracle_.limit_sqrt
        self.A_ = self.oracle_.A
        self.sigma_ = self.oracle_.sigma
        return self

    def sample(self, n_samples, random_state=0):
        """Draws from the limit law, shape (n_samples, S*A)."""
        check_is_fitted(self, "limit_sqrt_")
        n = check_positive_int(n_samples, "n_samples")
        z = replica_rng(int(random_state), 0, stream="directions").standard_normal(
            (n, self.limit_sqrt_.shape[0]))
        return z @ self.limit_sqrt_

    def confidence_intervals(self, averaged_q, n_steps, level=0.95):
        """Coordinatewise intervals for ``Q*`` from an averaged estimate.

        Returns ``(lower, upper)`` tables of shape (S, A).
        """
        check_is_fitted(self, "limit_cov_")
        if not 0 < level < 1:
            raise ValueError("level must lie in (0, 1)")
        K = check_positive_int(n_steps, "n_steps")
        q = np.asarray(averaged_q, dtype=np.float64)
        half = ndtri(0.5 + level / 2) * np.sqrt(np.diag(self.limit_cov_) / K)
        half = half.reshape(q.shape)
        return q - half, q + half
