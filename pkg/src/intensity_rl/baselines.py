"""Non-RL baselines and the discrete-time actor-critic comparison.

Contains the exact backward dynamic program on a fine time grid, the
choice-based deterministic LP (CDLP) solved by a built-in dense simplex with
Bland's rule, the time-allocation policy derived from the CDLP solution, a
grid-based advantage actor-critic trained on the same parametrizations as
the continuous-time algorithms, and the Monte-Carlo policy evaluator shared
by every experiment.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import NetworkInstance, all_submasks_sorted, assortment_revenue, enumerate_states, products_in, state_index
from .policy import LinearPairPolicy, LinearROPolicy, BernoulliNNPolicy
from .simulate import RngStream, revenues_batch, roll_batch_grid, roll_episode
from .tinynn import AdamState, adam_step, adam_step_mlp
from .value import LinearCritic, MLPCritic
from . import learn

DP_STATE_BUDGET = 50_000_000  # grid-cells x states
CDLP_COLUMN_LIMIT = 15  # exhaustive columns up to 2^15


# ---------------------------------------------------------------------------
# dense simplex with Bland's rule


class LPInfeasible(RuntimeError):
    pass


class LPUnbounded(RuntimeError):
    pass


@dataclass
class SimplexResult:
    x: np.ndarray
    objective: float
    duals: np.ndarray
    reduced_costs: np.ndarray


def simplex_solve(c, A_ub, b_ub) -> SimplexResult:
    """Maximize ``c @ x`` subject to ``A_ub @ x <= b_ub`` and ``x >= 0``.

    Two-phase dense tableau simplex; Bland's smallest-index rule guards
    against cycling on degenerate problems.  Returns the optimal vertex with
    duals and reduced costs.
    """
    c = np.asarray(c, dtype=np.float64)
    A = np.asarray(A_ub, dtype=np.float64)
    b = np.asarray(b_ub, dtype=np.float64)
    mrows, n = A.shape
    if b.shape != (mrows,) or c.shape != (n,):
        raise ValueError("inconsistent LP dimensions")

    # rows with negative b flipped into >= rows handled by phase 1
    T = np.zeros((mrows, n + mrows))
    T[:, :n] = A
    T[:, n:] = np.eye(mrows)
    rhs = b.copy()
    basis = np.arange(n, n + mrows)
    neg = rhs < 0
    if np.any(neg):
        T[neg] *= -1.0
        rhs[neg] *= -1.0
        # artificial variables for the flipped rows
        n_art = int(neg.sum())
        art_cols = np.zeros((mrows, n_art))
        art_cols[np.nonzero(neg)[0], np.arange(n_art)] = 1.0
        T = np.concatenate([T, art_cols], axis=1)
        basis[np.nonzero(neg)[0]] = n + mrows + np.arange(n_art)
        phase1_cost = np.zeros(T.shape[1])
        phase1_cost[n + mrows :] = -1.0
        T, rhs, basis, obj1 = _simplex_iterate(T, rhs, basis, phase1_cost)
        if obj1 < -1e-9:
            raise LPInfeasible(f"phase-1 objective {obj1:.3e} < 0")
        keep = T.shape[1] - n_art
        if np.any(basis >= keep):
            # pivot artificials out of the basis where possible
            for r in np.nonzero(basis >= keep)[0]:
                row = T[r, :keep]
                cand = np.nonzero(np.abs(row) > 1e-10)[0]
                if len(cand):
                    _pivot(T, rhs, basis, r, cand[0])
        T = T[:, :keep]
        if np.any(basis >= keep):
            # redundant row: basis stuck on artificial with zero rhs
            rows = basis < keep
            T, rhs, basis = T[rows], rhs[rows], basis[rows]

    cost = np.zeros(T.shape[1])
    cost[:n] = c
    T, rhs, basis, obj = _simplex_iterate(T, rhs, basis, cost)

    x = np.zeros(T.shape[1])
    x[basis] = rhs
    y = np.linalg.solve(T[:, basis].T, cost[basis])
    reduced = cost - y @ T
    duals = y if len(y) == mrows else np.zeros(mrows)
    return SimplexResult(x[:n].copy(), float(obj), duals, reduced[:n].copy())


def _pivot(T, rhs, basis, r, col):
    piv = T[r, col]
    T[r] /= piv
    rhs[r] /= piv
    for i in range(len(rhs)):
        if i != r and T[i, col] != 0.0:
            rhs[i] -= T[i, col] * rhs[r]
            T[i] -= T[i, col] * T[r]
    basis[r] = col


def _simplex_iterate(T, rhs, basis, cost, tol=1e-10, max_iter=100_000):
    for _ in range(max_iter):
        y = np.linalg.solve(T[:, basis].T, cost[basis])
        reduced = cost - y @ T
        enter_candidates = np.nonzero(reduced > tol)[0]
        if len(enter_candidates) == 0:
            return T, rhs, basis, float(cost[basis] @ rhs)
        col = int(enter_candidates.min())  # Bland
        dirn = T[:, col]
        pos = dirn > tol
        if not np.any(pos):
            raise LPUnbounded("improving direction has no binding row")
        ratios = np.where(pos, rhs / np.where(pos, dirn, 1.0), np.inf)
        best = ratios.min()
        ties = np.nonzero(np.abs(ratios - best) <= tol * max(1.0, best))[0]
        r = int(ties[np.argmin(basis[ties])])  # Bland on leaving index
        _pivot(T, rhs, basis, r, col)
    raise RuntimeError("simplex iteration limit reached")


# ---------------------------------------------------------------------------
# exact dynamic programming on a time grid


@dataclass
class DPSolution:
    dt: float
    grid: np.ndarray  # (K+1,)
    values: np.ndarray  # (K+1, n_states)
    actions: np.ndarray  # (K, n_states) greedy-argmax assortment bitmasks
    states: np.ndarray  # (n_states, m)
    encode: object

    @property
    def v0(self) -> float:
        return float(self.values[0, -1])  # full capacity is the last state

    def value_at(self, k: int, x) -> float:
        return float(self.values[k, int(self.encode(np.asarray(x)[None, :])[0])])


def solve_dp(inst: NetworkInstance, dt: float) -> DPSolution:
    """Backward recursion for the grid-discretized optimal value.

    One arrival occurs per cell with probability ``lambda(t) * dt``; the
    maximization is over all feasible assortments per state; non-stationary
    rates are evaluated at the cell's right endpoint.
    """
    K = int(round(inst.T / dt))
    states, encode = state_index(inst.c)
    ns = len(states)
    if (K + 1) * ns > DP_STATE_BUDGET:
        raise MemoryError(f"DP table of {(K + 1) * ns:,} cells exceeds the budget")

    # per (state, feasible assortment): sale probabilities and targets
    full = inst.availability(inst.c)
    masks = all_submasks_sorted(full)
    probs_all = inst.choice.purchase_probs(masks)  # (n_masks, n+1)
    avail = inst.availability_batch(states)

    rows_state, rows_mask = [], []
    for si in range(ns):
        feas = (masks & ~avail[si]) == 0
        rows_state.append(np.full(int(feas.sum()), si))
        rows_mask.append(np.nonzero(feas)[0])
    rows_state = np.concatenate(rows_state)
    rows_mask = np.concatenate(rows_mask)
    nrows = len(rows_state)

    # immediate revenue sum p_j P_j(S) and sale transition table per row
    sale_prob = probs_all[rows_mask][:, : inst.n]  # (nrows, n)
    rev = sale_prob @ inst.p
    # target state index for each (row, product); invalid sales have prob 0
    succ = np.zeros((nrows, inst.n), dtype=np.int64)
    for j in range(inst.n):
        nxt = states[rows_state] - inst.A.T[j]
        ok = sale_prob[:, j] > 0
        nxt = np.where(ok[:, None], nxt, states[rows_state])
        succ[:, j] = encode(nxt)

    values = np.zeros((K + 1, ns))
    actions = np.zeros((K, ns), dtype=np.int64)
    row_masks = masks[rows_mask]
    # greedy argmax with smallest-bitmask tie-break: rows are mask-ascending
    grid = np.arange(K + 1) * dt
    scratch = np.empty(nrows)
    for k in range(K - 1, -1, -1):
        v_next = values[k + 1]
        lam_dt = float(inst.arrival.evaluate(grid[k + 1])) * dt
        gains = rev + (sale_prob * (v_next[succ] - v_next[rows_state][:, None])).sum(axis=1)
        np.multiply(gains, lam_dt, out=scratch)
        best = np.full(ns, -np.inf)
        np.maximum.at(best, rows_state, scratch)
        values[k] = v_next + best
        # first row attaining the max per state = smallest-bitmask tie-break
        cand = np.nonzero(scratch >= best[rows_state] - 1e-15)[0]
        uniq, first_idx = np.unique(rows_state[cand], return_index=True)
        sel = np.zeros(ns, dtype=np.int64)
        sel[uniq] = row_masks[cand[first_idx]]
        actions[k] = sel
    return DPSolution(dt, grid, values, actions, states, encode)


# ---------------------------------------------------------------------------
# CDLP


@dataclass
class CDLPSolution:
    objective: float
    masks: np.ndarray  # enumerated assortments, ascending bitmask order
    h: np.ndarray  # optimal offer durations
    duals: np.ndarray

    def schedule(self):
        """(mask, duration) pairs with positive duration, ascending mask."""
        keep = self.h > 1e-12
        return list(zip(self.masks[keep].tolist(), self.h[keep].tolist()))


def solve_cdlp(inst: NetworkInstance) -> CDLPSolution:
    """Deterministic LP over offer durations; optimum upper-bounds V*(0, c).

    Requires a stationary arrival rate and exhaustive column enumeration
    (n <= 15): maximize sum_S lambda R(S) h(S) subject to resource usage
    lambda Q_i(S) h(S) <= c_i and sum h(S) <= T.
    """
    from .model import Constant

    if not isinstance(inst.arrival, Constant):
        raise ValueError("the deterministic LP is defined for stationary arrival rates")
    if inst.n > CDLP_COLUMN_LIMIT:
        raise ValueError(f"n={inst.n} exceeds the exhaustive column limit ({CDLP_COLUMN_LIMIT})")
    lam = inst.arrival.rate
    masks = np.arange(1 << inst.n, dtype=np.int64)
    probs = inst.choice.purchase_probs(masks)[:, : inst.n]  # (2^n, n)
    R = probs @ inst.p
    Q = probs @ inst.A.T  # (2^n, m): expected units of each resource per arrival
    c_obj = lam * R
    A_ub = np.concatenate([lam * Q.T, np.ones((1, len(masks)))], axis=0)
    b_ub = np.concatenate([inst.c.astype(np.float64), [inst.T]])
    res = simplex_solve(c_obj, A_ub, b_ub)
    return CDLPSolution(res.objective, masks, res.x, res.duals)


class CDLPSchedulePolicy:
    """Offers the LP durations in ascending bitmask order, then nothing.

    When capacity binds mid-schedule the planned set is intersected with the
    currently available products.
    """

    name = "cdlp"
    uniforms_per_decision = 0
    enum_size = 1

    def __init__(self, inst: NetworkInstance, sol: CDLPSolution):
        self.inst = inst
        self.n = inst.n
        sched = sol.schedule()
        self._masks = np.array([s for s, _ in sched], dtype=np.int64)
        self._ends = np.cumsum([d for _, d in sched]) if sched else np.zeros(0)

    def _planned(self, ts) -> np.ndarray:
        if len(self._ends) == 0:
            return np.zeros(len(ts), dtype=np.int64)
        idx = np.searchsorted(self._ends, ts, side="left")
        out = np.where(idx < len(self._masks), self._masks[np.minimum(idx, len(self._masks) - 1)], 0)
        return out.astype(np.int64)

    def sample_batch(self, ts, X, avail, U) -> np.ndarray:
        return self._planned(np.asarray(ts, dtype=np.float64)) & np.asarray(avail, dtype=np.int64)

    def sample(self, t, x, rng=None) -> int:
        return int(self._planned(np.array([t]))[0]) & self.inst.availability(x)

    def entropy(self, t, x) -> float:
        return 0.0

    def entropy_batch(self, ts, X) -> np.ndarray:
        return np.zeros(len(np.atleast_1d(ts)))


def cdlp_policy_rollout(inst: NetworkInstance, sol: CDLPSolution, rng: RngStream):
    """One trajectory under the CDLP time-allocation policy."""
    return roll_episode(inst, CDLPSchedulePolicy(inst, sol), rng)


# ---------------------------------------------------------------------------
# unified Monte-Carlo evaluation


@dataclass
class EvalReport:
    label: str
    mean: float
    ci99: float
    paths: int
    wallclock_s: float


class GridHeldPolicy:
    """Wrapper marking a policy as grid-held with decision step ``dt``."""

    def __init__(self, policy, dt: float):
        self.policy = policy
        self.decision_dt = float(dt)
        self.name = f"{policy.name}-dt{dt:g}"

    def __getattr__(self, item):
        return getattr(self.policy, item)


def _eval_chunks(paths: int, policy) -> list:
    per = max(256, int(2e7 / max(1, getattr(policy, "enum_size", 1))))
    sizes = []
    left = paths
    while left > 0:
        sizes.append(min(per, left))
        left -= sizes[-1]
    return sizes


def evaluate(inst, policy, paths: int, rng: RngStream, label: str | None = None, threads: int = 1) -> EvalReport:
    """Mean revenue and 99% CI over ``paths`` simulated episodes.

    Entropy bonuses are never included: reported numbers are pure revenue
    (or, for queue policies via the queueing module, the episode objective).
    Episodes split into chunks with child streams; the reduction is ordered,
    so results do not depend on ``threads``.
    """
    t0 = time.perf_counter()
    dt = getattr(policy, "decision_dt", None)
    sizes = _eval_chunks(paths, policy)

    def run(i_size):
        i, size = i_size
        sub = rng.split(i)
        if dt is None:
            return revenues_batch(inst, policy, size, sub)
        return roll_batch_grid(inst, policy, dt, size, sub, collect=False)

    jobs = list(enumerate(sizes))
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    revs = np.concatenate(parts) if parts else np.zeros(0)
    mean = float(revs.mean()) if len(revs) else 0.0
    ci = float(2.576 * revs.std(ddof=1) / np.sqrt(len(revs))) if len(revs) > 1 else 0.0
    return EvalReport(label or getattr(policy, "name", "policy"), mean, ci, paths, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# discrete-time advantage actor-critic


@dataclass
class A2CConfig:
    dt: float
    episodes: int
    batch_size: int
    gamma: float  # entropy weight
    lr_phi: float
    lr_theta: float = 0.0
    value_loss_weight: float = 1.0  # only used by the neural parametrization
    degree: int = 2
    seed: int = 0
    eval_every: int = 0
    eval_paths: int = 2000
    actor_hidden: tuple = (64, 64)
    critic_hidden: tuple = (64, 64)


def train_a2c(inst: NetworkInstance, config: A2CConfig, parametrization: str = "linear-pair") -> "learn.TrainResult":
    """Grid-based A2C trained on grid-point data with 1-step-TD advantages.

    Actions are sampled at grid times and held over the following cell.
    Linear critics are refit in closed form on Monte-Carlo returns each
    update; the neural critic takes one weighted gradient step.  The policy
    step ascends ``sum_k grad log pi(S_k) * advantage_k`` plus the entropy
    bonus at grid points.
    """
    K = int(round(inst.T / config.dt))
    if abs(K * config.dt - inst.T) > 1e-9 * max(1.0, inst.T):
        raise ValueError("dt must divide the horizon")
    root = RngStream(config.seed)
    base_cfg = learn.TrainConfig(
        episodes=config.episodes,
        batch_size=config.batch_size,
        gamma=config.gamma,
        lr_phi=config.lr_phi,
        lr_theta=config.lr_theta,
        degree=config.degree,
        seed=config.seed,
        actor_hidden=config.actor_hidden,
        critic_hidden=config.critic_hidden,
    )
    policy, critic = learn.make_parametrization(inst, base_cfg, parametrization, root.split(2))
    adam_phi = AdamState.for_params(learn._policy_params(policy))
    adam_theta = AdamState.for_params([a for Wb in critic.net.params for a in Wb]) if isinstance(critic, MLPCritic) else None

    n_updates = config.episodes // config.batch_size
    curve = []
    t0 = time.perf_counter()
    evals_done = 0

    def maybe_eval(episodes_seen, force=False):
        nonlocal evals_done
        if force:
            if curve and curve[-1].episode == episodes_seen:
                return
        else:
            if config.eval_every <= 0 or episodes_seen // config.eval_every <= evals_done:
                return
            evals_done = episodes_seen // config.eval_every
        revs = roll_batch_grid(inst, policy, config.dt, config.eval_paths, root.split(1).split(len(curve)), collect=False)
        mean = float(revs.mean())
        ci = float(2.576 * revs.std(ddof=1) / np.sqrt(len(revs))) if len(revs) > 1 else 0.0
        curve.append(learn.CurvePoint(episodes_seen, mean, ci, time.perf_counter() - t0))

    for u in range(n_updates):
        episodes = roll_batch_grid(inst, policy, config.dt, config.batch_size, root.split(0).split(u))
        M = len(episodes)
        ts = np.concatenate([ep.times[:-1] for ep in episodes])
        Xs = np.concatenate([ep.states[:-1] for ep in episodes])
        Ss = np.concatenate([ep.actions for ep in episodes])
        t_next = np.concatenate([ep.times[1:] for ep in episodes])
        X_next = np.concatenate([ep.states[1:] for ep in episodes])
        returns = np.concatenate([np.cumsum(ep.rewards[::-1])[::-1] for ep in episodes])
        rewards = np.concatenate([ep.rewards for ep in episodes])

        if isinstance(critic, MLPCritic):
            resid = critic.value_batch(ts, Xs) - returns
            grads = critic.weighted_grad(ts, Xs, config.value_loss_weight * resid / M)
            adam_step_mlp(adam_theta, critic.net, grads, config.lr_theta)
        else:
            phi_mat = critic.basis_batch(ts, Xs)
            Mmat = phi_mat.T @ phi_mat / M
            bvec = phi_mat.T @ returns / M
            theta = np.linalg.pinv(Mmat, rcond=critic.W * 1e-12, hermitian=True) @ bvec
            critic = critic.with_theta(theta)

        adv = rewards + critic.value_batch(t_next, X_next) - critic.value_batch(ts, Xs)
        grad = policy.grad_log_prob_weighted(ts, Xs, Ss, adv / M)
        if config.gamma > 0.0:
            grad = learn._tree_add(grad, policy.grad_entropy_weighted(ts, Xs, np.full(len(ts), config.gamma / M)))
        if not learn._tree_finite(grad):
            raise learn.TrainingDiverged("policy gradient became non-finite")
        learn._apply_policy_update(policy, adam_phi, grad, config.lr_phi)
        maybe_eval((u + 1) * config.batch_size)

    maybe_eval(n_updates * config.batch_size, force=True)
    return learn.TrainResult(GridHeldPolicy(policy, config.dt), critic, curve, n_updates)
