"""The joint chain ``y_k = (s_k, a_k, s_{k+1})`` and its mixing properties."""

from functools import cached_property
from math import gcd

import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import connected_components

from .exceptions import AssumptionViolation, InternalError, MixingCapExceeded

MIXING_CAP = 100_000
KAPPA_FLOOR = 1e-6
KAPPA_INFLATION = 1.01
# TV values below this are treated as rounding noise in envelope fits.
TV_NOISE_FLOOR = 1e-14


def total_variation(p, q):
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def stationary_distribution(kernel, tol=1e-12):
    """Stationary law of an irreducible aperiodic row-stochastic matrix.

    Solves ``mu (P - I) = 0, sum(mu) = 1`` directly; falls back to power
    iteration if the solve fails or misses ``tol`` in l1 residual.
    """
    P = np.asarray(kernel, dtype=np.float64)
    n = P.shape[0]
    lhs = P.T - np.eye(n)
    lhs[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    mu = None
    try:
        mu = linalg.solve(lhs, rhs)
    except (linalg.LinAlgError, ValueError):
        mu = None
    if mu is not None:
        mu = np.where(np.abs(mu) < 1e-300, 0.0, mu)
        mu = mu / mu.sum()
        if np.abs(mu @ P - mu).sum() > tol or np.any(mu < -tol):
            mu = None
    if mu is None:
        mu = _power_iteration(P, tol)
    return np.clip(mu, 0.0, None) / np.clip(mu, 0.0, None).sum()


def _power_iteration(P, tol, max_iter=1_000_000):
    n = P.shape[0]
    mu = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = mu @ P
        if np.abs(nxt - mu).sum() <= tol:
            return nxt
        mu = nxt
    raise InternalError("stationary distribution: direct solve and power "
                        "iteration both failed")


def chain_period(adjacency):
    """Period of a strongly connected digraph via BFS levels from node 0."""
    n = adjacency.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(adjacency[u]):
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(v)
        frontier = nxt
    period = 0
    for u, v in zip(*np.nonzero(adjacency)):
        period = gcd(period, int(level[u] + 1 - level[v]))
    return abs(period)


class JointChain:
    """Markov chain over reachable triples ``(s, a, s')``.

    Attributes
    ----------
    triples : ndarray, shape (n, 3)
        Triples with ``pi_b(a|s) > 0`` and ``P(s'|s,a) > 0`` in lexicographic
        order.
    kernel : ndarray, shape (n, n)
        ``kernel[(s,a,s'), (u,b,u')] = pi_b(b|s') P(u'|s',b)`` if ``u == s'``.
    stationary : ndarray, shape (n,)
    visitation : ndarray, shape (S*A,)
        Diagonal of ``D``: the state-action marginal of ``stationary``.
    rho : float
        Minimum visitation probability.
    """

    def __init__(self, mdp, triples, kernel, stationary, period, n_classes):
        self.mdp = mdp
        self.triples = triples
        self.kernel = kernel
        self.stationary = stationary
        self.period = period
        self.n_classes = n_classes
        n_a = mdp.n_actions
        pair = triples[:, 0] * n_a + triples[:, 1]
        self.pair_of_triple = pair
        self.visitation = np.bincount(pair, weights=stationary, minlength=mdp.n_pairs)
        self.rho = float(self.visitation.min())
        for arr in (self.triples, self.kernel, self.stationary, self.visitation,
                    self.pair_of_triple):
            arr.setflags(write=False)

    @property
    def n_triples(self):
        return self.triples.shape[0]

    @property
    def assumption_ok(self):
        return self.n_classes == 1 and self.period == 1

    @property
    def D(self):
        return np.diag(self.visitation)

    def triple_index(self, s, a, s_next):
        hit = np.flatnonzero((self.triples[:, 0] == s) & (self.triples[:, 1] == a)
                             & (self.triples[:, 2] == s_next))
        if hit.size == 0:
            raise KeyError(f"triple {(s, a, s_next)} has zero probability")
        return int(hit[0])

    @cached_property
    def sampler_tables(self):
        """Per-state CDF tables for drawing ``(a, s')`` given ``s``.

        Returns ``(start, cdf, actions, next_states, triple_ids)``; rows of
        state ``s`` occupy ``start[s]:start[s+1]``.
        """
        m = self.mdp
        start = np.zeros(m.n_states + 1, dtype=np.int64)
        cdf, acts, nxt, ids = [], [], [], []
        for s in range(m.n_states):
            rows = np.flatnonzero(self.triples[:, 0] == s)
            probs = np.array([m.behavior_policy[s, self.triples[i, 1]]
                              * m.transition[s, self.triples[i, 1], self.triples[i, 2]]
                              for i in rows])
            c = np.cumsum(probs)
            if c.size:
                c[-1] = 1.0
            cdf.extend(c)
            acts.extend(self.triples[rows, 1])
            nxt.extend(self.triples[rows, 2])
            ids.extend(rows)
            start[s + 1] = start[s] + rows.size
        return (start, np.asarray(cdf, dtype=np.float64),
                np.asarray(acts, dtype=np.int64), np.asarray(nxt, dtype=np.int64),
                np.asarray(ids, dtype=np.int64))

    def tv_profile(self, horizon):
        return tv_profile(self.kernel, self.stationary, horizon)

    @cached_property
    def slem(self):
        return second_eigenvalue_modulus(self.kernel)

    def mixing_constants(self, horizon=200):
        return geometric_mixing_constants(self, horizon)


def tv_profile(kernel, mu, horizon):
    """``max_i TV(P^t(i, .), mu)`` for ``t = 0..horizon``."""
    out = np.empty(horizon + 1)
    M = np.eye(kernel.shape[0])
    for t in range(horizon + 1):
        out[t] = total_variation(M, mu).max()
        M = M @ kernel
    return out


def second_eigenvalue_modulus(kernel):
    ev = np.linalg.eigvals(kernel)
    if ev.size <= 1:
        return 0.0
    mods = np.sort(np.abs(ev))[::-1]
    # mods[0] is the Perron eigenvalue 1
    return float(mods[1])


def _kernel_and_mu(chain):
    if isinstance(chain, JointChain):
        return chain.kernel, chain.stationary
    P = np.asarray(chain, dtype=np.float64)
    return P, stationary_distribution(P)


def _triples_of(m):
    pb = m.behavior_policy
    P = m.transition
    idx = np.argwhere((pb[:, :, None] > 0) & (P > 0))
    return idx.astype(np.int64)


def joint_kernel(m, triples):
    n = triples.shape[0]
    K = np.zeros((n, n))
    by_state = {s: np.flatnonzero(triples[:, 0] == s) for s in range(m.n_states)}
    for i, (_, _, s_next) in enumerate(triples):
        cols = by_state[int(s_next)]
        b = triples[cols, 1]
        u = triples[cols, 2]
        K[i, cols] = m.behavior_policy[s_next, b] * m.transition[s_next, b, u]
    return K


def build_joint_chain(m, validate=True):
    """Enumerate triples, build the kernel, and check irreducibility/aperiodicity.

    Raises
    ------
    AssumptionViolation
        If the support graph is not strongly connected or is periodic, naming
        a violating class of triples. Suppressed when ``validate`` is false,
        in which case the stationary law is not computed.
    """
    triples = _triples_of(m)
    kernel = joint_kernel(m, triples)
    adj = kernel > 0
    n_classes, labels = connected_components(adj, directed=True, connection="strong")
    period = chain_period(adj) if n_classes == 1 else 0
    if validate:
        if n_classes != 1:
            # report a closed class if one exists, else the first class
            closed = []
            for c in range(n_classes):
                members = np.flatnonzero(labels == c)
                leaves = adj[members][:, labels != c].any()
                if not leaves:
                    closed.append(c)
            bad = closed[0] if closed else 0
            members = [tuple(int(v) for v in triples[i])
                       for i in np.flatnonzero(labels == bad)]
            raise AssumptionViolation(
                f"joint chain is reducible: {n_classes} communicating classes; "
                f"class {bad} = {members[:8]}{' ...' if len(members) > 8 else ''}",
                violating_class=members)
        if period != 1:
            members = [tuple(int(v) for v in t) for t in triples]
            raise AssumptionViolation(
                f"joint chain is periodic with period {period}",
                violating_class=members)
        mu = stationary_distribution(kernel)
    else:
        mu = np.full(triples.shape[0], np.nan)
    return JointChain(m, triples, kernel, mu, period, n_classes)


def mixing_time(chain, threshold, cap=MIXING_CAP):
    """Smallest ``t`` with ``max_i TV(P^t(i, .), mu) <= threshold``."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    P, mu = _kernel_and_mu(chain)
    M = np.eye(P.shape[0])
    for t in range(cap + 1):
        tv = total_variation(M, mu).max()
        if tv <= threshold:
            return t
        M = M @ P
    raise MixingCapExceeded(f"mixing time exceeds cap {cap} (TV={tv:.3e})", tv)


def mixing_times(chain, thresholds, cap=MIXING_CAP):
    """Vectorised :func:`mixing_time` over many thresholds (one powering pass)."""
    P, mu = _kernel_and_mu(chain)
    th = np.asarray(thresholds, dtype=np.float64)
    out = np.full(th.shape, -1, dtype=np.int64)
    M = np.eye(P.shape[0])
    for t in range(cap + 1):
        tv = total_variation(M, mu).max()
        newly = (out < 0) & (th >= tv)
        out[newly] = t
        if np.all(out >= 0):
            return out
        M = M @ P
    raise MixingCapExceeded(f"mixing time exceeds cap {cap} (TV={tv:.3e})", tv)


def geometric_mixing_constants(chain, horizon=200):
    """Envelope constants with ``max_i TV(P^t(i, .), mu) <= c0 * kappa**t``.

    ``kappa`` is the second-largest eigenvalue modulus inflated by 1% (never
    past the midpoint to 1, never below ``KAPPA_FLOOR``); ``c0`` is the
    smallest constant making the envelope hold on ``t = 0..horizon``.
    """
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    P, mu = _kernel_and_mu(chain)
    slem = chain.slem if isinstance(chain, JointChain) else second_eigenvalue_modulus(P)
    if slem >= 1.0 - 1e-12:
        raise InternalError(f"SLEM {slem} >= 1 on a validated chain")
    kappa = min(KAPPA_INFLATION * slem, 0.5 * (1.0 + slem))
    kappa = max(kappa, KAPPA_FLOOR)
    tv = tv_profile(P, mu, horizon)
    t = np.arange(horizon + 1)
    live = tv > TV_NOISE_FLOOR
    live[0] = True
    log_ratio = np.log(np.maximum(tv[live], 1e-300)) - t[live] * np.log(kappa)
    c0 = float(np.exp(log_ratio.max()))
    envelope = c0 * kappa ** t
    if np.any(tv > envelope * (1 + 1e-9) + TV_NOISE_FLOOR):
        raise InternalError("geometric mixing envelope failed re-check")
    return c0, kappa


def chain_report(chain, thresholds=(0.5, 0.25, 0.1, 0.05, 0.01, 1e-3, 1e-4, 1e-6),
                 horizon=200):
    c0, kappa = geometric_mixing_constants(chain, horizon)
    times = mixing_times(chain, thresholds)
    return {
        "n_triples": int(chain.n_triples),
        "rho": float(chain.rho),
        "irreducible_aperiodic": "pass" if chain.assumption_ok else "fail",
        "period": int(chain.period),
        "slem": float(chain.slem),
        "mixing_constants": {"c0": c0, "kappa": kappa, "horizon": horizon},
        "mixing_time_table": [{"threshold": float(a), "t": int(t)}
                              for a, t in zip(thresholds, times)],
    }
