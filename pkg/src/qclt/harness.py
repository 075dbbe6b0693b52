"""Replicated experiments checking the Gaussian and Brownian limits.

Multivariate Wasserstein-1 is replaced by the maximum over fixed directions
of the exact one-dimensional distance, which is a lower bound on the
Euclidean ``W1`` and is labelled as such in every report.
"""

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import linalg
from scipy.special import ndtr, ndtri
from scipy.stats import ks_2samp

from ._validation import check_positive_int, check_unit_directions, check_zeta_grid
from .engine import replica_rng, run_trajectory, stepsize_vector, zeta_indices
from .exceptions import ConfigError
from .mdp import greedy_actions, policy_kernel, deterministic_policy
from .oracle import f_all_triples

W1_LABEL = "projected W1 (lower bound, Euclidean projections)"
# 3c and 5c carry the leading martingale sum and are reported, not tracked
TRACKED_TERMS = ("term1", "term2", "term4", "term3a", "term3b", "term5a", "term5b")


def _map_replicas(fn, R, parallelism):
    if parallelism is None or parallelism <= 1 or R <= 1:
        return [fn(i) for i in range(R)]
    with ThreadPoolExecutor(max_workers=int(parallelism)) as pool:
        return list(pool.map(fn, range(R)))


def replicate_runs(m, chain, oracle, sched, K, R, master_seed, zeta_grid=None,
                   checkpoints=(), track_sandwich=False, parallelism=1):
    """``R`` independent runs; replica ``i`` uses stream ``(master_seed, i)``.

    Results are returned in replica order whatever the parallelism.
    """
    R = check_positive_int(R, "R")

    def one(i):
        return run_trajectory(m, chain, sched, K, zeta_grid=zeta_grid,
                              seed=master_seed, replica=i, oracle=oracle,
                              track_sandwich=track_sandwich, checkpoints=checkpoints)

    return _map_replicas(one, R, parallelism)


def replicate_endpoint(m, chain, oracle, sched, K, R, master_seed, parallelism=1,
                       track_sandwich=False):
    """Endpoint samples ``K**-0.5 * sum_{k=1}^K Delta_k``, shape (R, S*A)."""
    runs = replicate_runs(m, chain, oracle, sched, K, R, master_seed,
                          zeta_grid=[1.0], parallelism=parallelism,
                          track_sandwich=track_sandwich)
    return np.stack([r.final_averaged_error for r in runs])


def default_directions(d, master_seed=0, n_random=32):
    """Coordinate axes followed by ``n_random`` seeded random unit vectors."""
    rng = replica_rng(master_seed, 0, stream="directions")
    rand = rng.standard_normal((n_random, d))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    return np.vstack([np.eye(d), rand])


def w1_gaussian_1d(x, sigma):
    """Exact ``W1`` between the empirical law of ``x`` and ``N(0, sigma^2)``.

    Uses the quantile representation: on ``((i-1)/n, i/n]`` the empirical
    quantile is the ``i``-th order statistic and
    ``int (c - sigma z(q)) dq = c dq + sigma (phi(z_hi) - phi(z_lo))``.
    """
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = x.size
    if sigma <= 0:
        return float(np.mean(np.abs(x)))
    q_lo = np.arange(n) / n
    q_hi = np.arange(1, n + 1) / n
    # split each cell where the Gaussian quantile crosses x_i
    q_c = np.clip(ndtr(x / sigma), q_lo, q_hi)

    def antideriv(c, q):
        # int_0^q (c - sigma Phi^{-1}(t)) dt = c q + sigma phi(Phi^{-1}(q))
        z = ndtri(q)
        dens = np.where(np.isfinite(z), np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi), 0.0)
        return c * q + sigma * dens

    left = antideriv(x, q_c) - antideriv(x, q_lo)     # quantile below x: positive
    right = antideriv(x, q_c) - antideriv(x, q_hi)    # = -(integral), positive
    return float(np.sum(left) + np.sum(right))


def w1_projected(samples, limit_sqrt, directions, return_all=False):
    """Maximum over ``directions`` of the 1-D ``W1`` to the projected limit.

    ``limit_sqrt`` is the symmetric square root ``S`` of the limit covariance
    so the projected variance along ``u`` is ``||S u||^2``.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    dirs = check_unit_directions(directions, X.shape[1])
    S = np.asarray(limit_sqrt, dtype=np.float64)
    vals = np.array([w1_gaussian_1d(X @ u, np.linalg.norm(S @ u)) for u in dirs])
    return (float(vals.max()), vals) if return_all else float(vals.max())


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    residual: float
    n_points: int


def fit_supported(K_grid):
    """True when ``K_grid`` has >= 4 horizons spanning >= 2 decades."""
    K = np.asarray(K_grid, dtype=np.float64)
    return K.size >= 4 and np.log10(K.max() / K.min()) >= 2 - 1e-12


def rate_fit(w1_values, K_grid):
    """Least squares of ``log w1`` on ``log K``.

    ``residual`` is the root-mean-square residual in natural-log units.
    Nonpositive values are dropped with a warning.
    """
    w = np.asarray(w1_values, dtype=np.float64)
    K = np.asarray(K_grid, dtype=np.float64)
    if w.shape != K.shape:
        raise ValueError("w1_values and K_grid differ in length")
    keep = w > 0
    if not np.all(keep):
        warnings.warn(f"dropping {np.sum(~keep)} nonpositive W1 values from the fit")
    w, K = w[keep], K[keep]
    if not fit_supported(K):
        raise ValueError("rate fit needs >= 4 horizons spanning >= 2 decades")
    x, y = np.log(K), np.log(w)
    design = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ np.array([slope, intercept])
    return RateFit(float(slope), float(intercept),
                   float(np.sqrt(np.mean(resid ** 2))), int(K.size))


def frobenius_rel(est, ref):
    ref_norm = np.linalg.norm(ref)
    if ref_norm == 0:
        return float(np.linalg.norm(est))
    return float(np.linalg.norm(est - ref) / ref_norm)


@dataclass
class CltReport:
    fixture_id: str
    K_grid: list
    replicas: int
    master_seed: int
    empirical_mean: dict = field(default_factory=dict)
    empirical_cov: dict = field(default_factory=dict)
    cov_rel_error: dict = field(default_factory=dict)
    w1_projected: dict = field(default_factory=dict)
    seed_range: dict = field(default_factory=dict)
    w1_fit: RateFit = None
    mean_bound: dict = field(default_factory=dict)
    w1_normalized: dict = field(default_factory=dict)

    @property
    def w1_slope(self):
        return None if self.w1_fit is None else self.w1_fit.slope

    def to_dict(self):
        from .io import float_list
        out = {
            "fixture_id": self.fixture_id,
            "K_grid": [int(k) for k in self.K_grid],
            "replicas": int(self.replicas),
            "master_seed": int(self.master_seed),
            "w1_label": W1_LABEL,
            "norm": "euclidean projections",
            "per_K": [],
        }
        for K in self.K_grid:
            out["per_K"].append({
                "K": int(K),
                "seed_range": self.seed_range[K],
                "empirical_mean": float_list(self.empirical_mean[K]),
                "empirical_cov": float_list(self.empirical_cov[K]),
                "cov_rel_error": self.cov_rel_error[K],
                "w1_projected": self.w1_projected[K],
                "w1_normalized": self.w1_normalized[K],
                "mean_sup": float(np.max(np.abs(self.empirical_mean[K]))),
                "mean_bound": self.mean_bound[K],
            })
        if self.w1_fit is not None:
            out["w1_fit"] = {"slope": self.w1_fit.slope,
                             "intercept": self.w1_fit.intercept,
                             "residual": self.w1_fit.residual}
        return out


def run_clt_experiment(m, chain, oracle, sched, K_grid, R, master_seed,
                       directions=None, parallelism=1, fixture_id="fixture",
                       keep_samples=False, min_replicas=100, track_sandwich=False):
    """Endpoint statistics, covariance error and projected ``W1`` per horizon."""
    sched.require_clt()
    if R < min_replicas:
        raise ConfigError(f"asserted CLT criteria need >= {min_replicas} replicas",
                          field="replicas")
    d = oracle.d
    dirs = default_directions(d, master_seed) if directions is None else directions
    scale = np.sqrt(np.max(np.diag(oracle.limit_cov))) if d else 0.0
    rep = CltReport(fixture_id, list(K_grid), R, int(master_seed))
    samples_by_K = {}
    for K in K_grid:
        X = replicate_endpoint(m, chain, oracle, sched, K, R, master_seed, parallelism,
                               track_sandwich)
        if keep_samples:
            samples_by_K[K] = X
        mean = X.mean(axis=0)
        cov = np.cov(X, rowvar=False, ddof=1).reshape(d, d)
        w1 = w1_projected(X, oracle.limit_sqrt, dirs)
        rep.empirical_mean[K] = mean
        rep.empirical_cov[K] = cov
        rep.cov_rel_error[K] = frobenius_rel(cov, oracle.limit_cov)
        rep.w1_projected[K] = w1
        rep.w1_normalized[K] = w1 / scale if scale > 0 else 0.0
        rep.seed_range[K] = {"master_seed": int(master_seed), "replicas": [0, R - 1]}
        rep.mean_bound[K] = float(4.0 * scale / np.sqrt(R))
    if fit_supported(K_grid):
        rep.w1_fit = rate_fit([rep.w1_projected[K] for K in K_grid], K_grid)
    elif len(K_grid) > 1:
        warnings.warn("K_grid too short for a W1 rate fit; slope not reported")
    return (rep, samples_by_K) if keep_samples else rep


# --- functional CLT -----------------------------------------------------------

@dataclass
class FcltReport:
    zeta_grid: np.ndarray
    increment_cov_errors: np.ndarray
    cross_cov_errors: np.ndarray
    cross_pairs: list
    additivity_residual: float
    ks_distances: dict
    degenerate: bool
    increment_covs: np.ndarray = None

    def to_dict(self):
        from .io import float_list
        return {
            "zeta_grid": float_list(self.zeta_grid),
            "increment_cov_errors": float_list(self.increment_cov_errors),
            "max_increment_cov_error": float(np.max(self.increment_cov_errors))
            if self.increment_cov_errors.size else 0.0,
            "cross_cov_errors": float_list(self.cross_cov_errors),
            "max_cross_cov_error": float(np.max(self.cross_cov_errors))
            if self.cross_cov_errors.size else 0.0,
            "additivity_residual": self.additivity_residual,
            "ks_running_max": {k: float(v) for k, v in self.ks_distances.items()},
            "degenerate_sigma": self.degenerate,
        }


def brownian_running_max(zeta_grid, n_paths, rng):
    """Law of ``max_j B(zeta_j)`` for standard Brownian motion on the grid."""
    z = np.concatenate([[0.0], np.asarray(zeta_grid, dtype=np.float64)])
    steps = np.sqrt(np.diff(z))
    out = np.full(n_paths, -np.inf)
    chunk = 1 << 17
    pos = 0
    while pos < n_paths:
        n = min(chunk, n_paths - pos)
        paths = np.cumsum(rng.standard_normal((n, steps.size)) * steps, axis=1)
        out[pos:pos + n] = paths.max(axis=1)
        pos += n
    return out


def _sample_cov(a, b):
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    return a.T @ b / (a.shape[0] - 1)


def fclt_increment_stats(paths, zeta_grid, limit_cov, functional_dirs=None,
                         brownian_law=None):
    """Increment covariance and cross-covariance errors for sampled paths.

    ``paths`` has shape (R, G, d) with ``paths[:, j]`` the value at
    ``zeta_grid[j]``; the path starts from 0 at ``zeta = 0``.
    """
    zeta = np.asarray(zeta_grid, dtype=np.float64)
    paths = np.asarray(paths, dtype=np.float64)
    if zeta[0] == 0.0:
        zeta, paths = zeta[1:], paths[:, 1:]
    if zeta.size < 1:
        raise ValueError("zeta grid must have at least two points including 0")
    R, G, d = paths.shape
    padded = np.concatenate([np.zeros((R, 1, d)), paths], axis=1)
    incs = np.diff(padded, axis=1)
    lengths = np.diff(np.concatenate([[0.0], zeta]))
    L = np.asarray(limit_cov, dtype=np.float64)
    L_norm = np.linalg.norm(L)
    degenerate = L_norm == 0
    covs = np.stack([_sample_cov(incs[:, j], incs[:, j]) for j in range(G)])
    errs = np.array([frobenius_rel(covs[j], lengths[j] * L) for j in range(G)])
    pairs, cross = [], []
    for i in range(G):
        for j in range(i + 1, G):
            c = _sample_cov(incs[:, i], incs[:, j])
            pairs.append((i, j))
            cross.append(np.linalg.norm(c) / L_norm if not degenerate
                         else np.linalg.norm(c))
    # algebraic self-check: cov of a merged increment equals the sum of parts
    # plus both cross terms
    add_res = 0.0
    if G >= 2:
        merged = incs[:, 0] + incs[:, 1]
        lhs = _sample_cov(merged, merged)
        c01 = _sample_cov(incs[:, 0], incs[:, 1])
        rhs = covs[0] + covs[1] + c01 + c01.T
        add_res = float(np.max(np.abs(lhs - rhs)) / max(np.max(np.abs(lhs)), 1e-300))
    ks = {}
    if functional_dirs is not None and brownian_law is not None and not degenerate:
        for name, u in functional_dirs.items():
            sd = np.sqrt(u @ L @ u)
            if sd <= 0:
                continue
            stat = (paths @ u).max(axis=1) / sd
            ks[name] = ks_2samp(stat, brownian_law).statistic
    return FcltReport(zeta, errs, np.asarray(cross), pairs, add_res, ks, degenerate,
                      covs)


def functional_directions(limit_cov, d):
    dirs = {f"axis_{i}": np.eye(d)[i] for i in range(d)}
    if d:
        w, V = np.linalg.eigh(limit_cov)
        dirs["top_eigvec"] = V[:, -1] * np.sign(V[np.argmax(np.abs(V[:, -1])), -1])
    return dirs


def fclt_marginals(m, chain, oracle, sched, K, R, zeta_grid, master_seed,
                   parallelism=1, n_brownian=1_000_000, min_replicas=100,
                   return_paths=False):
    """Finite-dimensional checks of the Brownian limit of ``Phi_K``."""
    sched.require_clt()
    if R < min_replicas:
        raise ConfigError(f"asserted FCLT criteria need >= {min_replicas} replicas",
                          field="replicas")
    zeta = check_zeta_grid(zeta_grid)
    if zeta[-1] != 1.0:
        raise ValueError("zeta grid must end at 1")
    runs = replicate_runs(m, chain, oracle, sched, K, R, master_seed,
                          zeta_grid=zeta, parallelism=parallelism)
    paths = np.stack([r.phi for r in runs])
    law = brownian_running_max(zeta[zeta > 0], n_brownian,
                               replica_rng(master_seed, 0, stream="brownian"))
    rep = fclt_increment_stats(paths, zeta, oracle.limit_cov,
                               functional_directions(oracle.limit_cov, oracle.d), law)
    return (rep, runs) if return_paths else rep


# --- error decay --------------------------------------------------------------

def error_decay(m, chain, oracle, sched, checkpoints, R, master_seed, parallelism=1):
    """Mean ``||Q_k - Q*||_inf`` at ``checkpoints`` over ``R`` replicas and the
    log-log slope of that mean against ``k``."""
    ck = sorted(int(c) for c in checkpoints)
    runs = replicate_runs(m, chain, oracle, sched, ck[-1], R, master_seed,
                          zeta_grid=[1.0], checkpoints=ck, parallelism=parallelism)
    errs = np.stack([r.sup_error_trace for r in runs])
    mean = errs.mean(axis=0)
    x, y = np.log(ck), np.log(mean)
    slope, intercept = np.polyfit(x, y, 1)
    return {"checkpoints": ck, "mean_sup_error": mean, "slope": float(slope),
            "intercept": float(intercept),
            "max_iterate": float(max(r.iterates_kept.max() for r in runs)),
            "min_iterate": float(min(r.iterates_kept.min() for r in runs))}


# --- martingale-difference diagnostics ---------------------------------------

@numba.njit(cache=True)
def _sample_triples(u, first, kernel_cdf):
    n = u.shape[0]
    out = np.empty(n + 1, dtype=np.int64)
    out[0] = first
    cur = first
    m = kernel_cdf.shape[1]
    for k in range(n):
        x = u[k]
        j = 0
        while j < m - 1 and x >= kernel_cdf[cur, j]:
            j += 1
        cur = j
        out[k + 1] = cur
    return out


def stationary_triple_path(chain, n_steps, rng):
    """Triple indices ``Y_0..Y_n`` started from the stationary law."""
    cdf = np.cumsum(chain.kernel, axis=1)
    cdf[:, -1] = 1.0
    mu_cdf = np.cumsum(chain.stationary)
    mu_cdf[-1] = 1.0
    first = int(np.searchsorted(mu_cdf, rng.random(), side="right"))
    path = np.empty(n_steps + 1, dtype=np.int64)
    pos, cur = 0, first
    chunk = 1 << 20
    path[0] = first
    while pos < n_steps:
        n = min(chunk, n_steps - pos)
        seg = _sample_triples(rng.random(n), cur, cdf)
        path[pos + 1:pos + n + 1] = seg[1:]
        cur = seg[-1]
        pos += n
    return path


def mds_diagnostics(oracle, n_steps, seed):
    """Sample mean and lag-1 autocovariance of ``M_k = X(Y_{k+1}) - E[X(Y_{k+1})|Y_k]``.

    Returns the sup-norm of the mean against ``5 sigma_max / sqrt(n)`` and the
    Frobenius norm of the lag-1 autocovariance relative to ``||Sigma||_F``.
    """
    chain = oracle.chain
    X = oracle.poisson_X
    cond = chain.kernel @ X
    path = stationary_triple_path(chain, n_steps, replica_rng(seed, 0, stream="chain"))
    M = X[path[1:]] - cond[path[:-1]]
    mean = M.mean(axis=0)
    lag1 = M[:-1].T @ M[1:] / (M.shape[0] - 1)
    sigma_norm = np.linalg.norm(oracle.sigma)
    sigma_max = float(np.sqrt(np.max(np.diag(oracle.sigma))))
    return {
        "mean_sup": float(np.max(np.abs(mean))),
        "mean_bound": 5.0 * sigma_max / np.sqrt(n_steps),
        "lag1_rel": float(np.linalg.norm(lag1) / sigma_norm) if sigma_norm else 0.0,
        "empirical_cov_rel": frobenius_rel(M.T @ M / M.shape[0], oracle.sigma),
    }


def trajectory_sigma(oracle, n_steps, seed):
    """Trajectory-average estimate of ``Sigma`` from transition counts."""
    chain = oracle.chain
    X = oracle.poisson_X
    cond = chain.kernel @ X
    path = stationary_triple_path(chain, n_steps, replica_rng(seed, 1, stream="chain"))
    n = chain.n_triples
    counts = np.bincount(path[:-1] * n + path[1:], minlength=n * n).reshape(n, n)
    est = np.zeros((X.shape[1], X.shape[1]))
    for i, j in zip(*np.nonzero(counts)):
        diff = X[j] - cond[i]
        est += counts[i, j] * np.outer(diff, diff)
    return est / n_steps


# --- proof-term magnitudes ----------------------------------------------------

def terms_decrease(rows):
    """Names of tracked terms that fail to strictly decrease along ``rows``."""
    return [t for t in TRACKED_TERMS
            if any(b[t] >= a[t] for a, b in zip(rows, rows[1:]))]


def diagnostics_terms(m, chain, oracle, sched, K, seed, replica=0):
    """Magnitudes ``K**-0.5 ||.||_inf`` of the error-decomposition terms.

    Runs one instrumented trajectory (plain Python, same random stream as the
    compiled engine), forms ``Z_i``, ``Z'_i``, the Poisson solutions ``X_k``
    at the running iterates and ``Psi_i^K``, and returns the terms together
    with the residual of the exact identity
    ``sum_k Delta_up_k = T1 + T2 + T3 + T4 + T5``.
    """
    from .engine import _initial_state
    K = check_positive_int(K, "K")
    d = oracle.d
    n_s, n_a = m.n_states, m.n_actions
    gamma = m.discount
    A = oracle.A
    lu = linalg.lu_factor(A)
    a_inv = lambda v: linalg.lu_solve(lu, v)
    p = chain.visitation
    P_star = oracle.pi_star.induced_kernel
    alphas = stepsize_vector(sched, K + 1)
    sign = 1.0 if oracle.poisson.convention == "+" else -1.0
    n = chain.n_triples
    fund = np.eye(n) - chain.kernel + sign * np.outer(np.ones(n), chain.stationary)
    fund_lu = linalg.lu_factor(fund)
    start, cdf, acts, nxts, ids = chain.sampler_tables

    rng = replica_rng(seed, replica)
    s = _initial_state(m, rng, None)
    u = rng.random(K + 1)

    def draw(s, x):
        lo, hi = start[s], start[s + 1]
        j = lo
        while j < hi - 1 and x >= cdf[j]:
            j += 1
        return int(acts[j]), int(nxts[j]), int(ids[j])

    def poisson_at(Q):
        F = f_all_triples(Q, chain)
        G = F - chain.stationary @ F
        return linalg.lu_solve(fund_lu, G)

    Q = np.zeros((n_s, n_a))
    q_star = oracle.q_star.ravel()
    delta0 = Q.ravel() - q_star
    up = delta0.copy()
    sum_up = np.zeros(d)
    Z = np.zeros((K, d))
    Zp = np.zeros((K, d))
    Xcur = np.zeros((K + 1, d))    # X_k(Y_k)
    Xnext_old = np.zeros((K, d))   # X_k(Y_{k+1})
    Xnext_new = np.zeros((K, d))   # X_{k+1}(Y_{k+1})
    Xcond = np.zeros((K, d))       # E[X_k(Y_{k+1}) | Y_k]

    a, s_next, y = draw(s, u[0])
    Xk = poisson_at(Q)
    Xcur[0] = Xk[y]
    for k in range(K):
        Qf = Q.ravel()
        delta = Qf - q_star
        P_k = policy_kernel(deterministic_policy(greedy_actions(Q), n_a), m)
        Z[k] = gamma * p * ((P_k - P_star) @ delta)
        F_all = f_all_triples(Q, chain)
        fbar = chain.stationary @ F_all
        Zp[k] = F_all[y] - fbar
        Xcond[k] = (chain.kernel @ Xk)[y]
        ak = alphas[k]
        up = up - ak * (A @ up) + ak * Z[k] + ak * Zp[k]
        sum_up += up
        q = Q[s, a]
        Q[s, a] = q + ak * (m.reward[s, a] + gamma * Q[s_next].max() - q)
        s = s_next
        a, s_next, y = draw(s, u[k + 1])
        Xk_new = poisson_at(Q)
        Xnext_old[k] = Xk[y]
        Xnext_new[k] = Xk_new[y]
        Xcur[k + 1] = Xk_new[y]
        Xk = Xk_new

    # Term (1): sum_{k=1}^K prod_{i<k} (I - alpha_i A) Delta_0
    v = delta0.copy()
    t1 = np.zeros(d)
    for k in range(K):
        v = v - alphas[k] * (A @ v)
        t1 += v

    # Psi_i^K - A^{-1} applied to stored vectors, accumulated backwards
    eye = np.eye(d)
    A_inv = a_inv(eye)
    S = np.zeros((d, d))
    t4 = np.zeros(d)
    t5 = np.zeros(d)
    t5a_tail = np.zeros(d)
    t5b = np.zeros(d)
    t5c = np.zeros(d)
    psi_next = np.zeros((d, d))          # Psi_K^K
    psi = {}
    for i in range(K - 1, -1, -1):
        S = eye + (eye - alphas[i + 1] * A) @ S
        psi_i = alphas[i] * S
        G = psi_i - A_inv
        t4 += G @ Z[i]
        t5 += G @ Zp[i]
        # (Psi_{i+1} - Psi_i) X_{i+1}(Y_{i+1})
        t5a_tail += (psi_next - psi_i) @ Xcur[i + 1]
        t5b += G @ (Xnext_new[i] - Xnext_old[i])
        t5c += G @ (Xnext_old[i] - Xcond[i])
        psi_next = psi_i
        if i == 0:
            psi[0] = psi_i
    t5a = (psi[0] - A_inv) @ Xcur[0] - (0.0 - A_inv) @ Xcur[K] + t5a_tail

    t2 = a_inv(Z.sum(axis=0))
    t3 = a_inv(Zp.sum(axis=0))
    t3a = a_inv(Xcur[0] - Xcur[K])
    t3b = a_inv((Xnext_new - Xnext_old).sum(axis=0))
    t3c = a_inv((Xnext_old - Xcond).sum(axis=0))

    scale = 1.0 / np.sqrt(K)
    sup = lambda v: float(np.max(np.abs(v)) * scale)
    identity = t1 + t2 + t3 + t4 + t5
    ref = max(np.max(np.abs(sum_up)), 1.0)
    return {
        "K": K,
        "term1": sup(t1), "term2": sup(t2), "term4": sup(t4),
        "term3a": sup(t3a), "term3b": sup(t3b), "term3c": sup(t3c),
        "term5a": sup(t5a), "term5b": sup(t5b), "term5c": sup(t5c),
        "identity_residual": float(np.max(np.abs(identity - sum_up)) / ref),
        "term3_split_residual": float(np.max(np.abs(t3a + t3b + t3c - t3))
                                      / max(np.max(np.abs(t3)), 1.0)),
        "term5_split_residual": float(np.max(np.abs(t5a + t5b + t5c - t5))
                                      / max(np.max(np.abs(t5)), 1.0)),
    }
