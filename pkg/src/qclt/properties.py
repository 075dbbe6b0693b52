"""Property suite run by ``qclt validate``.

Every check returns ``(passed, observed_value)``. The suite stops at nothing:
all checks are evaluated and reported so a single verdict file lists every
property.
"""

from dataclasses import dataclass

import numpy as np

from .chain import geometric_mixing_constants, mixing_times, tv_profile
from .engine import SANDWICH_TOL, replica_rng, run_trajectory, stepsize_vector
from .harness import mds_diagnostics, w1_gaussian_1d
from .mdp import (behavior_state_distribution, bellman_apply, enumerate_q_star,
                  greedy_policy, policy_kernel)
from .oracle import f_all_triples, f_bar


@dataclass(frozen=True)
class PropertyResult:
    module: str
    name: str
    passed: bool
    value: float
    detail: str = ""

    def to_dict(self):
        return {"module": self.module, "name": self.name, "passed": bool(self.passed),
                "value": float(self.value), "detail": self.detail}


def _random_q(rng, m, n):
    hi = 1.0 / (1.0 - m.discount)
    return rng.uniform(-hi, hi, size=(n, m.n_states, m.n_actions))


def mdp_properties(m, oracle, rng, n_pairs=200):
    out = []
    Q1s, Q2s = _random_q(rng, m, n_pairs), _random_q(rng, m, n_pairs)
    worst = 0.0
    for Q1, Q2 in zip(Q1s, Q2s):
        gap = np.max(np.abs(Q1 - Q2))
        worst = max(worst, np.max(np.abs(bellman_apply(Q1, m) - bellman_apply(Q2, m)))
                    - m.discount * gap)
    out.append(PropertyResult("mdp_core", "contraction", worst <= 1e-12, worst))

    worst = 0.0
    for Q1, step in zip(Q1s, np.abs(Q2s)):
        worst = max(worst, np.max(bellman_apply(Q1, m) - bellman_apply(Q1 + step, m)))
    out.append(PropertyResult("mdp_core", "monotonicity", worst <= 1e-12, worst))

    q_star = oracle.q_star
    P_star = oracle.pi_star.induced_kernel
    worst = 0.0
    worst_pi = 0.0
    for Q in Q1s:
        P_k = policy_kernel(greedy_policy(Q), m)
        diff = P_k - P_star
        worst = max(worst, -np.min(diff @ Q.ravel()), np.max(diff @ q_star.ravel()))
        pol = greedy_policy(Q)
        direct = m.transition @ np.sum(pol * Q, axis=1)
        worst_pi = max(worst_pi, np.max(np.abs(P_k @ Q.ravel() - direct.ravel())))
    out.append(PropertyResult("mdp_core", "greedy_sign_facts", worst <= 1e-12, worst))
    out.append(PropertyResult("mdp_core", "policy_kernel_identity", worst_pi <= 1e-12,
                              worst_pi))
    if m.n_actions ** m.n_states <= 4096:
        err = float(np.max(np.abs(enumerate_q_star(m) - q_star)))
        out.append(PropertyResult("mdp_core", "q_star_vs_enumeration", err <= 1e-8, err))
    return out


def chain_properties(m, chain, horizon=200):
    out = []
    mu = chain.stationary
    res = float(np.abs(mu @ chain.kernel - mu).sum())
    out.append(PropertyResult("chain_analysis", "stationarity", res <= 1e-10, res))
    out.append(PropertyResult("chain_analysis", "visitation_sums_to_one",
                              abs(chain.visitation.sum() - 1) <= 1e-12,
                              abs(chain.visitation.sum() - 1)))
    out.append(PropertyResult("chain_analysis", "rho_floor",
                              0 < chain.rho <= 1.0 / m.n_pairs + 1e-15, chain.rho))
    mu_b = behavior_state_distribution(m)
    p_ref = (mu_b[:, None] * m.behavior_policy).ravel()
    err = float(np.max(np.abs(p_ref - chain.visitation)))
    out.append(PropertyResult("chain_analysis", "marginal_matches_behavior",
                              err <= 1e-10, err))
    c0, kappa = geometric_mixing_constants(chain, horizon)
    tv = tv_profile(chain.kernel, mu, horizon)
    slack = float(np.max(tv - c0 * kappa ** np.arange(horizon + 1)))
    out.append(PropertyResult("chain_analysis", "mixing_envelope",
                              slack <= 1e-12, slack))
    thr = np.geomspace(0.5, 1e-6, 12)
    times = mixing_times(chain, thr)
    mono = bool(np.all(np.diff(times) >= 0))
    out.append(PropertyResult("chain_analysis", "mixing_time_monotone", mono,
                              float(times[-1])))
    return out


def oracle_properties(m, chain, oracle, rng, n_q=100, mds_steps=1_000_000, seed=0):
    out = []
    for name, (ok, val) in oracle.invariants().items():
        out.append(PropertyResult("oracle", name, bool(ok), float(val)))
    worst = 0.0
    for Q in _random_q(rng, m, n_q):
        direct = chain.stationary @ f_all_triples(Q, chain)
        closed = f_bar(Q, chain, m, check=False).ravel()
        worst = max(worst, float(np.max(np.abs(direct - closed))))
    out.append(PropertyResult("oracle", "fbar_identity", worst <= 1e-12, worst))
    _, kappa = geometric_mixing_constants(chain)
    ratio = oracle.x_bound_ratio(kappa)
    out.append(PropertyResult("oracle", "x_bound_ratio_finite", bool(np.isfinite(ratio)),
                              ratio))
    mds = mds_diagnostics(oracle, mds_steps, seed)
    out.append(PropertyResult("oracle", "mds_mean", mds["mean_sup"] <= mds["mean_bound"],
                              mds["mean_sup"], f"bound {mds['mean_bound']:.3e}"))
    out.append(PropertyResult("oracle", "mds_lag1", mds["lag1_rel"] <= 0.02,
                              mds["lag1_rel"]))
    return out


def lipschitz_ratio_F(m, chain, rng, n):
    """Largest ``||F(Q1,y) - F(Q2,y)||_inf / ||Q1 - Q2||_inf`` over random draws."""
    hi = 1.0 / (1.0 - m.discount)
    worst = 0.0
    n_s, n_a = m.n_states, m.n_actions
    trip = chain.triples
    for _ in range(n):
        Q1 = rng.uniform(-hi, hi, size=(n_s, n_a))
        Q2 = rng.uniform(-hi, hi, size=(n_s, n_a))
        j = int(rng.integers(chain.n_triples))
        s, a, s2 = trip[j]
        F1, F2 = Q1.copy(), Q2.copy()
        F1[s, a] = m.reward[s, a] + m.discount * Q1[s2].max()
        F2[s, a] = m.reward[s, a] + m.discount * Q2[s2].max()
        denom = np.max(np.abs(Q1 - Q2))
        if denom > 0:
            worst = max(worst, np.max(np.abs(F1 - F2)) / denom)
    return float(worst)


def engine_properties(m, chain, oracle, sched, seed=0, sandwich_K=100_000,
                      sandwich_seeds=20, lipschitz_n=10_000):
    out = []
    # additive reward noise of half-width w widens the box by w / (1 - gamma)
    lo = -m.reward_noise / (1.0 - m.discount)
    hi = (1.0 + m.reward_noise) / (1.0 - m.discount)
    ck = [k for k in (100, 1000, 10000, 100000) if k <= sandwich_K]
    worst_viol = 0
    bound_ok = True
    for r in range(sandwich_seeds):
        rec = run_trajectory(m, chain, sched, sandwich_K, seed=seed, replica=r,
                             oracle=oracle, track_sandwich=True, checkpoints=ck,
                             raise_on_violation=False)
        worst_viol += rec.sandwich_violation_count
        it = rec.iterates_kept
        bound_ok &= bool(it.min() >= lo and it.max() <= hi)
    out.append(PropertyResult("qlearn_engine", "sandwich_ordering", worst_viol == 0,
                              worst_viol, f"{sandwich_seeds} seeds x {sandwich_K} steps, "
                              f"tol {SANDWICH_TOL:g}"))
    out.append(PropertyResult("qlearn_engine", "iterate_bounds", bound_ok, hi))
    L = lipschitz_ratio_F(m, chain, replica_rng(seed, 0, stream="lipschitz"), lipschitz_n)
    out.append(PropertyResult("qlearn_engine", "lipschitz_F", L <= 2.0, L))
    a = run_trajectory(m, chain, sched, 10_000, seed=seed, oracle=oracle)
    b = run_trajectory(m, chain, sched, 10_000, seed=seed, oracle=oracle)
    same = bool(np.array_equal(a.phi, b.phi) and np.array_equal(a.final_q, b.final_q))
    out.append(PropertyResult("qlearn_engine", "determinism", same, 0.0))
    alph = stepsize_vector(sched, 1000)
    k = np.arange(1000)
    ok = bool(np.all(np.diff(alph) < 0) and np.all(np.diff(k * alph) > 0)
              and alph[0] <= 1 + 1e-15) if sched.beta > 0 else True
    out.append(PropertyResult("qlearn_engine", "stepsize_shape", ok, float(alph[0])))
    return out


def harness_properties():
    out = []
    v = w1_gaussian_1d(np.zeros(10), 1.0)
    out.append(PropertyResult("clt_harness", "w1_point_mass_vs_normal",
                              abs(v - np.sqrt(2 / np.pi)) <= 1e-12, v))
    v = w1_gaussian_1d(np.array([-1.0, 1.0]), 0.0)
    out.append(PropertyResult("clt_harness", "w1_two_points_vs_zero", abs(v - 1) <= 1e-15, v))
    return out


def run_suite(m, chain, oracle, sched, seed=0, quick=False):
    """All properties on one fixture; ``quick`` shrinks the sampled checks."""
    rng = replica_rng(seed, 0, stream="lipschitz")
    results = []
    results += mdp_properties(m, oracle, rng)
    results += chain_properties(m, chain)
    results += oracle_properties(m, chain, oracle, rng,
                                 mds_steps=100_000 if quick else 1_000_000, seed=seed)
    results += engine_properties(m, chain, oracle, sched, seed,
                                 sandwich_K=10_000 if quick else 100_000,
                                 sandwich_seeds=4 if quick else 20,
                                 lipschitz_n=1000 if quick else 10_000)
    results += harness_properties()
    return results
