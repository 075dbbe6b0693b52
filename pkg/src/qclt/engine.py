"""Asynchronous Q-learning with polynomial stepsizes and averaged partial sums.

One trajectory is strictly sequential, so the inner loop is compiled with
numba. Randomness comes from a counter-based Philox stream keyed by
``(master_seed, stream, replica)``; uniforms are drawn in numpy chunks and
consumed by the kernel, which lets a plain-Python loop reproduce any run
bit for bit.

Stream layout for a run: one uniform selects ``s_0`` (skipped when the
initial state is fixed), then each step consumes one uniform for
``(a_k, s_{k+1})`` given ``s_k`` and, with reward noise on, one more for the
noise draw.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from math import floor, sqrt

import numba
import numpy as np

from ._validation import check_positive_int, check_zeta_grid
from .exceptions import ConfigError, SandwichViolation
from .mdp import behavior_state_distribution

SANDWICH_TOL = 1e-9
CHUNK = 1 << 16

STREAMS = {"chain": 0, "directions": 1, "fixture": 2, "brownian": 3, "lipschitz": 4}


def replica_rng(master_seed, replica=0, stream="chain"):
    """Philox generator for one named split of ``master_seed``."""
    ss = np.random.SeedSequence(int(master_seed),
                                spawn_key=(STREAMS[stream], int(replica)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class StepsizeSchedule:
    """Polynomial stepsizes ``alpha_k = alpha * (k + b) ** -beta``.

    ``beta = 0`` gives a constant stepsize, accepted only for diagnostics.
    """

    alpha: float
    b: float
    beta: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive", field="schedule.alpha")
        if not self.b > 0:
            raise ConfigError("b must be positive", field="schedule.b")
        if not 0 <= self.beta < 1:
            raise ConfigError("beta must lie in [0, 1)", field="schedule.beta")
        if self.initial > 1.0 + 1e-15:
            raise ConfigError(
                f"initial stepsize alpha * b**-beta = {self.initial:.6g} exceeds 1",
                field="schedule")

    @property
    def initial(self):
        return self.alpha * self.b ** (-self.beta)

    @property
    def clt_admissible(self):
        return 0.5 < self.beta < 1.0

    def require_clt(self):
        if not self.clt_admissible:
            raise ConfigError(
                f"CLT experiments need beta in (0.5, 1); got {self.beta}",
                field="schedule.beta")
        return self


def stepsize_at(sched, k):
    if k < 0:
        raise ValueError("k must be nonnegative")
    return sched.alpha * (k + sched.b) ** (-sched.beta)


def stepsize_vector(sched, n):
    """``alpha_0, ..., alpha_{n-1}``."""
    return _stepsizes(int(n), float(sched.alpha), float(sched.b), float(sched.beta))


@numba.njit(cache=True)
def _stepsizes(n, alpha, b, beta):
    out = np.empty(n)
    for k in range(n):
        out[k] = alpha * (k + b) ** (-beta)
    return out


def async_q_step(Q, y, alpha_k, m):
    """One asynchronous update; only entry ``(s, a)`` of ``y`` changes."""
    if not 0 <= alpha_k <= 1:
        raise ValueError("stepsize must lie in [0, 1]")
    s, a, s_next = (int(v) for v in y)
    out = np.array(Q, dtype=np.float64, copy=True)
    q = out[s, a]
    out[s, a] = q + alpha_k * (m.reward[s, a] + m.discount * out[s_next].max() - q)
    return out


@dataclass
class SandwichState:
    """Upper and lower comparison sequences, flattened to length S*A."""

    delta_up: np.ndarray
    delta_down: np.ndarray

    @classmethod
    def start(cls, delta0):
        d0 = np.asarray(delta0, dtype=np.float64).ravel()
        return cls(d0.copy(), d0.copy())

    def contains(self, delta, tol=SANDWICH_TOL):
        d = np.asarray(delta).ravel()
        return bool(np.all(self.delta_down <= d + tol) and np.all(d <= self.delta_up + tol))


def sampled_noise(Q, y, m, visitation, reward=None):
    """``F(Q, y) - Fbar(Q)`` flattened; ``reward`` overrides ``r(s, a)``."""
    from .mdp import bellman_apply
    s, a, s_next = (int(v) for v in y)
    Q = np.asarray(Q, dtype=np.float64)
    r = m.reward[s, a] if reward is None else reward
    p = visitation.reshape(Q.shape)
    noise = -p * (bellman_apply(Q, m) - Q)
    noise[s, a] += r + m.discount * Q[s_next].max() - Q[s, a]
    return noise.ravel()


def sandwich_step(state, delta_k, y_k, alpha_k, oracle, noise):
    """Advance both comparison sequences by one step.

    ``up' = (I - a A) up + a gamma D (P^{pi_k} - P^{pi*}) delta_k + a noise``
    and the same without the middle term for ``down``; ``pi_k`` is greedy
    with respect to ``Q_k = delta_k + Q*``.
    """
    from .mdp import greedy_policy, policy_kernel
    m = oracle.mdp
    A = oracle.A
    delta = np.asarray(delta_k, dtype=np.float64).ravel()
    Q_k = delta.reshape(m.n_states, m.n_actions) + oracle.q_star
    P_k = policy_kernel(greedy_policy(Q_k), m)
    middle = m.discount * oracle.chain.visitation * (
        (P_k - oracle.pi_star.induced_kernel) @ delta)
    noise = np.asarray(noise, dtype=np.float64).ravel()
    up = state.delta_up - alpha_k * (A @ state.delta_up) + alpha_k * middle \
        + alpha_k * noise
    down = state.delta_down - alpha_k * (A @ state.delta_down) + alpha_k * noise
    return SandwichState(up, down)


@numba.njit(cache=True, nogil=True)
def _advance(u, stride, k0, n_steps, s, Q, center, reward, gamma, noise_w,
             start, cdf, acts, nxts, alpha, b, beta,
             sums, comps, ev_idx, ev_ptr, ev_sums, ev_q,
             track, visit, P, pistar, up, down, viol):
    """Run ``n_steps`` updates from global step ``k0``.

    Returns ``(s, ev_ptr, first_violation_step)``; the last is -1 when the
    sandwich held throughout.
    """
    n_s, n_a = Q.shape
    first_bad = -1
    V = np.empty(n_s)
    greedy = np.empty(n_s, dtype=np.int64)
    T = np.empty((n_s, n_a))
    noise = np.empty((n_s, n_a))
    for j in range(n_steps):
        k = k0 + j
        x = u[j * stride]
        lo = start[s]
        hi = start[s + 1]
        idx = lo
        while idx < hi - 1 and x >= cdf[idx]:
            idx += 1
        a = acts[idx]
        s_next = nxts[idx]
        r = reward[s, a]
        if noise_w > 0.0:
            r = r + noise_w * (2.0 * u[j * stride + 1] - 1.0)
        alpha_k = alpha * (k + b) ** (-beta)
        q = Q[s, a]
        vmax = Q[s_next, 0]
        for c in range(1, n_a):
            if Q[s_next, c] > vmax:
                vmax = Q[s_next, c]
        td = r + gamma * vmax - q

        if track:
            for x2 in range(n_s):
                best = 0
                for c in range(1, n_a):
                    if Q[x2, c] > Q[x2, best]:
                        best = c
                greedy[x2] = best
                V[x2] = Q[x2, best]
            for x1 in range(n_s):
                for c in range(n_a):
                    acc = 0.0
                    for x2 in range(n_s):
                        acc += P[x1, c, x2] * V[x2]
                    T[x1, c] = reward[x1, c] + gamma * acc
                    noise[x1, c] = -visit[x1, c] * (T[x1, c] - Q[x1, c])
            noise[s, a] += td
            for x1 in range(n_s):
                for c in range(n_a):
                    pu = 0.0
                    pd = 0.0
                    mid = 0.0
                    for x2 in range(n_s):
                        w = P[x1, c, x2]
                        ps = pistar[x2]
                        pu += w * up[x2, ps]
                        pd += w * down[x2, ps]
                        mid += w * ((Q[x2, greedy[x2]] - center[x2, greedy[x2]])
                                    - (Q[x2, ps] - center[x2, ps]))
                    p = visit[x1, c]
                    # write into spare slots; both use the pre-update tables
                    T[x1, c] = (up[x1, c] - alpha_k * p * (up[x1, c] - gamma * pu)
                                + alpha_k * gamma * p * mid + alpha_k * noise[x1, c])
                    noise[x1, c] = (down[x1, c] - alpha_k * p * (down[x1, c] - gamma * pd)
                                    + alpha_k * noise[x1, c])
            for x1 in range(n_s):
                for c in range(n_a):
                    up[x1, c] = T[x1, c]
                    down[x1, c] = noise[x1, c]

        Q[s, a] = q + alpha_k * td
        s = s_next

        for x1 in range(n_s):
            for c in range(n_a):
                e = Q[x1, c] - center[x1, c]
                t = sums[x1, c] + e
                if abs(sums[x1, c]) >= abs(e):
                    comps[x1, c] += (sums[x1, c] - t) + e
                else:
                    comps[x1, c] += (e - t) + sums[x1, c]
                sums[x1, c] = t

        if track:
            bad = False
            for x1 in range(n_s):
                for c in range(n_a):
                    e = Q[x1, c] - center[x1, c]
                    if down[x1, c] > e + 1e-9 or e > up[x1, c] + 1e-9:
                        bad = True
            if bad:
                viol[0] += 1
                if first_bad < 0:
                    first_bad = k + 1

        while ev_ptr < ev_idx.shape[0] and ev_idx[ev_ptr] == k + 1:
            for x1 in range(n_s):
                for c in range(n_a):
                    ev_sums[ev_ptr, x1, c] = sums[x1, c] + comps[x1, c]
                    ev_q[ev_ptr, x1, c] = Q[x1, c]
            ev_ptr += 1
    return s, ev_ptr, first_bad


def zeta_indices(zeta_grid, K):
    """``floor(zeta * K)`` using the decimal value of each ``zeta``."""
    return np.array([floor(Fraction(repr(float(z))) * K) for z in zeta_grid],
                    dtype=np.int64)


@dataclass
class RunRecord:
    """Output of one trajectory.

    ``phi`` has shape (len(zeta_grid), S*A) and holds the standardized
    partial sums; ``iterates_kept`` holds ``Q_k`` at ``checkpoints``.
    """

    seed: int
    replica: int
    K: int
    zeta_grid: np.ndarray
    phi: np.ndarray
    checkpoints: np.ndarray
    iterates_kept: np.ndarray
    sup_error_trace: np.ndarray
    final_averaged_error: np.ndarray
    final_q: np.ndarray
    sandwich_violation_count: int = 0
    sandwich_tracked: bool = False
    extra: dict = field(default_factory=dict)


def _initial_state(m, rng, initial_state):
    if initial_state is not None:
        s = int(initial_state)
        if not 0 <= s < m.n_states:
            raise ValueError(f"initial state {s} out of range")
        return s
    mu_b = behavior_state_distribution(m)
    c = np.cumsum(mu_b)
    c[-1] = 1.0
    return int(np.searchsorted(c, rng.random(), side="right"))


def run_trajectory(m, chain, sched, K, zeta_grid=None, seed=0, track_sandwich=False,
                   oracle=None, replica=0, checkpoints=(), initial_state=None,
                   center=None, raise_on_violation=True):
    """Simulate ``K`` asynchronous updates from ``Q_0 = 0``.

    Parameters
    ----------
    m, chain : MdpModel, JointChain
    sched : StepsizeSchedule
    K : int
        Number of updates.
    zeta_grid : sequence of float in [0, 1], optional
        Times at which ``Phi_K(zeta) = K**-0.5 * sum_{k<=floor(zeta K)} Delta_k``
        is recorded. Defaults to ``0.1, ..., 1.0``.
    seed, replica : int
        Keys of the Philox stream.
    track_sandwich : bool
        Co-evolve the comparison sequences and count ordering violations.
    oracle : TheoryOracle, optional
        Supplies ``Q*`` (and ``A``/``pi*`` for the sandwich). Without it the
        partial sums are taken around ``center`` (zeros by default), which
        gives Polyak averages of the raw iterates.
    checkpoints : sequence of int
        Steps ``k`` at which ``Q_k`` and ``||Q_k - Q*||_inf`` are kept.

    Raises
    ------
    SandwichViolation
        If the ordering fails while tracking and ``raise_on_violation``.
    """
    K = check_positive_int(K, "K")
    zeta = check_zeta_grid(np.round(np.arange(1, 11) / 10, 12)
                           if zeta_grid is None else zeta_grid)
    if not chain.assumption_ok:
        raise ConfigError("joint chain failed irreducibility/aperiodicity checks")
    if oracle is not None:
        center = oracle.q_star
    elif center is None:
        center = np.zeros((m.n_states, m.n_actions))
    if track_sandwich and oracle is None:
        raise ValueError("sandwich tracking needs the oracle")
    center = np.ascontiguousarray(center, dtype=np.float64)

    ck = np.asarray(sorted(int(c) for c in checkpoints), dtype=np.int64)
    if ck.size and (ck[0] < 0 or ck[-1] > K):
        raise ValueError("checkpoints must lie in [0, K]")
    z_idx = zeta_indices(zeta, K)
    events = np.unique(np.concatenate([z_idx, ck, [K]]))
    ev_pos = {int(e): i for i, e in enumerate(events)}
    n_ev = events.size
    ev_sums = np.zeros((n_ev, m.n_states, m.n_actions))
    ev_q = np.zeros((n_ev, m.n_states, m.n_actions))
    ev_ptr = 0
    if events[0] == 0:
        ev_ptr = 1

    rng = replica_rng(seed, replica)
    s = _initial_state(m, rng, initial_state)
    start, cdf, acts, nxts, _ = chain.sampler_tables
    Q = np.zeros((m.n_states, m.n_actions))
    sums = np.zeros_like(Q)
    comps = np.zeros_like(Q)
    stride = 2 if m.reward_noise > 0 else 1

    if track_sandwich:
        visit = chain.visitation.reshape(m.n_states, m.n_actions).copy()
        pistar = np.ascontiguousarray(oracle.pi_star.actions, dtype=np.int64)
        up = (Q - center).copy()
        down = (Q - center).copy()
    else:
        visit = np.zeros((1, 1))
        pistar = np.zeros(1, dtype=np.int64)
        up = np.zeros((1, 1))
        down = np.zeros((1, 1))
    viol = np.zeros(1, dtype=np.int64)
    first_bad = -1

    k = 0
    while k < K:
        n = min(CHUNK, K - k)
        u = rng.random(n * stride)
        s, ev_ptr, bad = _advance(
            u, stride, k, n, s, Q, center, m.reward, m.discount, m.reward_noise,
            start, cdf, acts, nxts, float(sched.alpha), float(sched.b),
            float(sched.beta), sums, comps, events, ev_ptr, ev_sums, ev_q,
            track_sandwich, visit, m.transition, pistar, up, down, viol)
        if bad >= 0 and first_bad < 0:
            first_bad = bad
            if raise_on_violation:
                raise SandwichViolation(
                    f"sandwich ordering failed at step {bad}",
                    dump={"step": bad, "Q": Q.copy(), "delta_up": up.copy(),
                          "delta_down": down.copy(), "seed": seed,
                          "replica": replica})
        k += n

    scale = 1.0 / sqrt(K)
    phi = np.stack([ev_sums[ev_pos[int(i)]].ravel() * scale for i in z_idx])
    kept = np.stack([ev_q[ev_pos[int(c)]] for c in ck]) if ck.size \
        else np.zeros((0, m.n_states, m.n_actions))
    sup_err = np.array([np.max(np.abs(q - center)) for q in kept])
    final = ev_sums[ev_pos[K]].ravel() * scale
    return RunRecord(
        seed=int(seed), replica=int(replica), K=K, zeta_grid=zeta, phi=phi,
        checkpoints=ck, iterates_kept=kept, sup_error_trace=sup_err,
        final_averaged_error=final, final_q=Q,
        sandwich_violation_count=int(viol[0]), sandwich_tracked=bool(track_sandwich),
        extra={"first_violation": first_bad})
