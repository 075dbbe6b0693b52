"""Exact limiting objects of averaged asynchronous Q-learning.

Everything here is a deterministic function of the MDP: the mean-field
operator, the Poisson solution of the centered sampling noise, the
martingale noise covariance ``Sigma`` and the limit covariance
``A^{-1} Sigma A^{-T}`` with ``A = D - gamma D P^{pi*}``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .chain import build_joint_chain
from .exceptions import InternalError
from .mdp import bellman_apply, solve_q_star

FBAR_TOL = 1e-12
POISSON_TOL = 1e-10
PSD_FLOOR = -1e-10


def f_operator(Q, y, m):
    """Sampled operator: ``Q`` with entry ``(s, a)`` replaced by its TD target."""
    s, a, s_next = (int(v) for v in y)
    out = np.array(Q, dtype=np.float64, copy=True)
    out[s, a] = m.reward[s, a] + m.discount * out[s_next].max()
    return out


def f_all_triples(Q, chain):
    """``F(Q, y_i)`` for every triple, shape (n_triples, S*A)."""
    m = chain.mdp
    Q = np.asarray(Q, dtype=np.float64)
    tr = chain.triples
    target = m.reward[tr[:, 0], tr[:, 1]] + m.discount * Q.max(axis=1)[tr[:, 2]]
    out = np.tile(Q.ravel(), (tr.shape[0], 1))
    out[np.arange(tr.shape[0]), chain.pair_of_triple] = target
    return out


def f_bar(Q, chain, m=None, check=True):
    """Stationary mean ``D T(Q) + (I - D) Q`` of the sampled operator.

    With ``check`` the matrix form is compared against the definitional sum
    ``sum_y mu(y) F(Q, y)``; disagreement beyond 1e-12 raises
    :class:`InternalError`.
    """
    m = chain.mdp if m is None else m
    Q = np.asarray(Q, dtype=np.float64)
    p = chain.visitation.reshape(Q.shape)
    out = p * bellman_apply(Q, m) + (1.0 - p) * Q
    if check:
        direct = (chain.stationary @ f_all_triples(Q, chain)).reshape(Q.shape)
        gap = np.max(np.abs(direct - out))
        if gap > FBAR_TOL:
            raise InternalError(f"mean-field identity violated by {gap:.3e}")
    return out


@dataclass(frozen=True, eq=False)
class PoissonSolution:
    """``X`` with ``F(Q*, i) - Fbar(Q*) = X(i) - E[X(Y1) | Y0 = i]``.

    ``values`` has shape (n_triples, S*A); ``convention`` is ``"+"`` for the
    fundamental matrix ``[I - P + 1 mu^T]^{-1}`` and ``"-"`` for
    ``[I - P - 1 mu^T]^{-1}``.
    """

    values: np.ndarray
    residual: float
    convention: str
    condition_numbers: dict
    residuals: dict = field(default_factory=dict)


def centered_noise(chain, q_star):
    """Rows ``F(Q*, y_i) - Fbar(Q*)``."""
    F = f_all_triples(q_star, chain)
    return F - chain.stationary @ F


def poisson_residual(chain, X, G):
    return float(np.max(np.abs(G - (X - chain.kernel @ X)))) if G.size else 0.0


def poisson_solution(chain, q_star, m=None, tol=POISSON_TOL):
    """Solve the Poisson equation through both fundamental-matrix sign choices.

    The ``+`` solution is kept when it meets ``tol``; otherwise the ``-`` one.
    Raises :class:`InternalError` when neither does.
    """
    G = centered_noise(chain, q_star)
    n = chain.n_triples
    P = chain.kernel
    rank_one = np.outer(np.ones(n), chain.stationary)
    sols, res, conds = {}, {}, {}
    for conv, sign in (("+", 1.0), ("-", -1.0)):
        M = np.eye(n) - P + sign * rank_one
        conds[conv] = float(np.linalg.cond(M))
        try:
            X = linalg.lu_solve(linalg.lu_factor(M), G)
        except (linalg.LinAlgError, ValueError):
            continue
        sols[conv] = X
        res[conv] = poisson_residual(chain, X, G)
    for conv in ("+", "-"):
        if conv in res and res[conv] <= tol:
            return PoissonSolution(sols[conv], res[conv], conv, conds, res)
    raise InternalError(
        f"Poisson equation unsolved: residuals {res}, condition numbers {conds}")


def conditional_mean(chain, X):
    """``E[X(Y1) | Y0 = i]`` for every triple."""
    return chain.kernel @ X


def noise_covariance(chain, X, reward_noise=0.0):
    """Covariance of the martingale increments ``X(Y1) - E[X(Y1) | Y0]``.

    Bounded uniform reward noise of half-width ``w`` adds the independent
    term ``(w**2 / 3) D``.
    """
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[1]
    mean = conditional_mean(chain, X)
    sigma = np.zeros((d, d))
    for i in range(chain.n_triples):
        w = chain.stationary[i] * chain.kernel[i]
        nz = w > 0
        diff = X[nz] - mean[i]
        sigma += diff.T @ (w[nz, None] * diff)
    asym = np.max(np.abs(sigma - sigma.T)) if d else 0.0
    if asym > 1e-12:
        raise InternalError(f"noise covariance asymmetry {asym:.3e}")
    sigma = 0.5 * (sigma + sigma.T)
    if reward_noise:
        sigma += (reward_noise ** 2 / 3.0) * np.diag(chain.visitation)
    if d and np.linalg.eigvalsh(sigma).min() < PSD_FLOOR:
        raise InternalError("noise covariance is not positive semidefinite")
    return sigma


def limit_law(A, sigma):
    """``A^{-1} Sigma A^{-T}`` and its symmetric PSD square root."""
    A = np.asarray(A, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    lu = linalg.lu_factor(A, check_finite=True)
    if np.min(np.abs(np.diag(lu[0]))) < 1e-14 * max(1.0, np.abs(A).max()):
        raise InternalError(
            "A is numerically singular; exploration floor rho times (1-gamma) "
            "is too small")
    left = linalg.lu_solve(lu, sigma)
    cov = linalg.lu_solve(lu, left.T)
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    if w.size and w.min() < PSD_FLOOR * max(1.0, w.max()):
        raise InternalError(f"limit covariance has eigenvalue {w.min():.3e}")
    root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    return cov, 0.5 * (root + root.T)


def a_matrix(chain, pi_star_kernel, gamma):
    D = np.diag(chain.visitation)
    return D - gamma * D @ pi_star_kernel


@dataclass(eq=False)
class TheoryOracle:
    """Exact ``Q*``, ``A``, ``X``, ``Sigma`` and the limit law for one MDP."""

    mdp: object
    chain: object
    q_star: np.ndarray
    pi_star: object
    A: np.ndarray
    poisson: PoissonSolution
    sigma: np.ndarray
    limit_cov: np.ndarray
    limit_sqrt: np.ndarray

    @property
    def poisson_X(self):
        return self.poisson.values

    @property
    def d(self):
        return self.A.shape[0]

    def f_bar(self, Q, check=False):
        return f_bar(Q, self.chain, self.mdp, check=check)

    def a_inv_norm_inf(self):
        return float(np.abs(np.linalg.inv(self.A)).sum(axis=1).max())

    def invariants(self):
        """Named checks on the oracle; each entry is ``(passed, value)``."""
        m, ch = self.mdp, self.chain
        bound = 1.0 / ((1.0 - m.discount) * ch.rho)
        fb = f_bar(self.q_star, ch, m, check=False)
        recon = self.limit_sqrt @ self.limit_sqrt
        denom = max(np.linalg.norm(self.limit_cov), 1e-300)
        sqrt_err = np.linalg.norm(recon - self.limit_cov) / denom \
            if np.linalg.norm(self.limit_cov) > 0 else float(np.linalg.norm(recon))
        min_eig = float(np.linalg.eigvalsh(self.sigma).min())
        return {
            "poisson_residual": (self.poisson.residual <= POISSON_TOL,
                                 self.poisson.residual),
            "a_inverse_bound": (self.a_inv_norm_inf() <= bound * (1 + 1e-12),
                                self.a_inv_norm_inf() / bound),
            "sigma_psd": (min_eig >= PSD_FLOOR, min_eig),
            "limit_sqrt_square": (sqrt_err <= 1e-8, float(sqrt_err)),
            "fbar_fixed_point": (bool(np.max(np.abs(fb - self.q_star)) <= 1e-10),
                                 float(np.max(np.abs(fb - self.q_star)))),
        }

    def x_bound_ratio(self, kappa):
        """``||X||_inf (1 - gamma)(1 - kappa)``; finite by construction."""
        return float(np.abs(self.poisson_X).max()
                     * (1.0 - self.mdp.discount) * (1.0 - kappa))

    def to_dict(self):
        from .io import float_list
        return {
            "q_star": float_list(self.q_star),
            "pi_star": [int(a) for a in self.pi_star.actions],
            "A": float_list(self.A),
            "sigma": float_list(self.sigma),
            "limit_cov": float_list(self.limit_cov),
            "limit_sqrt": float_list(self.limit_sqrt),
            "poisson_X": float_list(self.poisson_X),
            "poisson_residual": self.poisson.residual,
            "poisson_residuals": dict(self.poisson.residuals),
            "poisson_convention": self.poisson.convention,
            "condition_numbers": dict(self.poisson.condition_numbers),
            "rho": self.chain.rho,
        }

    @classmethod
    def from_dict(cls, data, mdp, chain=None):
        from .mdp import deterministic_policy, policy_matrix
        chain = build_joint_chain(mdp) if chain is None else chain
        pol = policy_matrix(deterministic_policy(data["pi_star"], mdp.n_actions), mdp)
        X = np.asarray(data["poisson_X"], dtype=np.float64)
        X = X.reshape(chain.n_triples, mdp.n_pairs)
        poisson = PoissonSolution(X, data["poisson_residual"],
                                  data["poisson_convention"],
                                  dict(data["condition_numbers"]),
                                  dict(data.get("poisson_residuals", {})))
        arr = lambda key: np.asarray(data[key], dtype=np.float64)
        return cls(mdp, chain, arr("q_star"), pol, arr("A"), poisson,
                   arr("sigma"), arr("limit_cov"), arr("limit_sqrt"))


def build_oracle(m, chain=None, tol=1e-13):
    """Assemble the full :class:`TheoryOracle` for ``m``."""
    chain = build_joint_chain(m) if chain is None else chain
    q_star, pi_star = solve_q_star(m, tol=tol)
    A = a_matrix(chain, pi_star.induced_kernel, m.discount)
    poisson = poisson_solution(chain, q_star, m)
    sigma = noise_covariance(chain, poisson.values, m.reward_noise)
    cov, root = limit_law(A, sigma)
    return TheoryOracle(m, chain, q_star, pi_star, A, poisson, sigma, cov, root)


def psi_matrices(alphas, A, K):
    """``Psi_i^K`` for ``i = 0..K`` by the backward recursion.

    ``Psi_i = alpha_i * S_i`` with ``S_K = 0`` and
    ``S_i = I + (I - alpha_{i+1} A) S_{i+1}``.
    """
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[0]
    eye = np.eye(d)
    out = np.zeros((K + 1, d, d))
    S = np.zeros((d, d))
    for i in range(K - 1, -1, -1):
        S = eye + (eye - alphas[i + 1] * A) @ S
        out[i] = alphas[i] * S
    return out


def psi_diagnostics(sched, A, K, probe_indices, rho=None, gamma=None):
    """Gaps ``||Psi_i^K - A^{-1}||_inf`` and ``||Psi_{i+1}^K - Psi_i^K||_inf``.

    ``Psi`` is evaluated by the backward recursion without storing the whole
    sequence. When ``rho`` and ``gamma`` are given, the polynomial-stepsize
    envelopes are reported with every hidden constant set to one; they are
    informational, not asserted.
    """
    from .engine import stepsize_vector
    probes = sorted({int(i) for i in probe_indices})
    if any(i < 1 or i > K for i in probes):
        raise ValueError("probe indices must lie in [1, K]")
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[0]
    eye = np.eye(d)
    alphas = stepsize_vector(sched, K + 1)
    a_inv = np.linalg.inv(A)
    wanted = set(probes) | {i + 1 for i in probes if i < K}
    kept = {K: np.zeros((d, d))} if K in wanted else {}
    S = np.zeros((d, d))
    for i in range(K - 1, min(probes) - 1, -1):
        S = eye + (eye - alphas[i + 1] * A) @ S
        if i in wanted:
            kept[i] = alphas[i] * S
    rows = []
    beta = sched.beta
    for i in probes:
        gap = np.abs(kept[i] - a_inv).sum(axis=1).max()
        step = np.abs(kept[i + 1] - kept[i]).sum(axis=1).max() if i < K else np.nan
        row = {"i": i, "psi_gap": float(gap), "psi_step": float(step)}
        if rho is not None and gamma is not None and 0 < beta < 1:
            c = rho * (1.0 - gamma)
            row["gap_envelope"] = float(
                1.0 / (i * c ** ((2 - beta) / (1 - beta)))
                + (i - 1) ** beta / (i * rho ** 2 * (1 - gamma) ** 2)
                + (1 - c * alphas[K]) ** (K - i + 1) / c)
            row["step_envelope"] = float(i ** -beta)
        rows.append(row)
    return rows
