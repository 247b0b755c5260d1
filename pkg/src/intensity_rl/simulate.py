"""Event-driven trajectory generation for the controlled jump process.

Policies are queried only at customer arrival times with the pre-arrival
state; no-purchase arrivals advance the clock without producing a record, so
a trajectory is exactly the ordered list of state jumps (tau_l, x_l, S_l,
r_l).  Non-homogeneous arrivals are simulated exactly by thinning against the
precomputed rate bound.

The engine is vectorized: a batch of episodes is rolled in lockstep, one
arrival index at a time.  All randomness for episode ``i`` comes from the
child stream ``rng.split(i)`` and is drawn in a fixed order (arrival
candidates, then per-arrival decision uniforms), so results are reproducible
regardless of batch size or thread scheduling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import Constant, NetworkInstance


class RngStream:
    """Counter-based seeded stream (Philox) with deterministic splitting.

    ``split(i)`` derives an independent child stream; identical seed and
    identical call sequence yield identical draws.
    """

    def __init__(self, seed: int, _key=()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in _key)
        self._ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(self._ss))

    def split(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.key + (index,))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self.key})"


@dataclass(frozen=True)
class JumpRecord:
    tau: float
    x: np.ndarray
    assortment: int
    reward: float


@dataclass
class Trajectory:
    """One episode's jump observations plus the implicit sentinels.

    ``taus``/``states``/``assortments``/``rewards`` hold the L jumps in time
    order; ``states`` are post-jump inventories.  tau_0 = 0 at ``x0`` and
    tau_{L+1} = T are implicit.
    """

    x0: np.ndarray
    horizon: float
    taus: np.ndarray
    states: np.ndarray
    assortments: np.ndarray
    rewards: np.ndarray

    @property
    def n_jumps(self) -> int:
        return len(self.taus)

    @property
    def records(self):
        return [
            JumpRecord(float(t), self.states[i].copy(), int(self.assortments[i]), float(self.rewards[i]))
            for i, t in enumerate(self.taus)
        ]

    @property
    def total_revenue(self) -> float:
        return float(self.rewards.sum())

    def interval_bounds(self):
        """(L+1, 2) inter-jump interval endpoints [tau_l, tau_{l+1}]."""
        edges = np.concatenate([[0.0], self.taus, [self.horizon]])
        return np.stack([edges[:-1], edges[1:]], axis=1)

    def interval_states(self) -> np.ndarray:
        """(L+1, m) state occupied on each inter-jump interval."""
        return np.concatenate([self.x0[None, :], self.states], axis=0)


# ---------------------------------------------------------------------------
# arrival-time sampling


def sample_arrival_times(arrival, T: float, rng: RngStream) -> np.ndarray:
    """All arrival epochs in (0, T], sorted.

    Constant rates draw exponential gaps directly; any other rate function is
    thinned against its ``lambda_max`` (Lewis-Shedler), which is exact.
    """
    gen = rng.generator
    lam_max = arrival.lambda_max
    if lam_max <= 0:
        return np.empty(0)
    block = max(16, int(lam_max * T * 1.5) + 16)
    times = []
    t = 0.0
    while t <= T:
        gaps = gen.exponential(1.0 / lam_max, size=block)
        cand = t + np.cumsum(gaps)
        times.append(cand)
        t = cand[-1]
    cand = np.concatenate(times)
    cand = cand[cand <= T]
    if isinstance(arrival, Constant):
        return cand
    accept = gen.uniform(size=len(cand)) * lam_max < arrival.evaluate(cand)
    return cand[accept]


# ---------------------------------------------------------------------------
# batched lockstep engine


def _episode_inputs(inst: NetworkInstance, policy, rng: RngStream):
    """Pre-draw one episode's randomness: arrivals first, then decision uniforms."""
    arrivals = sample_arrival_times(inst.arrival, inst.T, rng)
    k = len(arrivals)
    u_per = policy.uniforms_per_decision
    u_policy = rng.generator.uniform(size=(k, u_per)) if u_per else np.zeros((k, 0))
    u_choice = rng.generator.uniform(size=k)
    return arrivals, u_policy, u_choice


def _pad(arrs, fill=0.0):
    kmax = max((len(a) for a in arrs), default=0)
    if kmax == 0:
        return np.zeros((len(arrs), 0)), np.zeros(len(arrs), dtype=np.int64)
    first = np.asarray(arrs[0])
    shape = (len(arrs), kmax) + first.shape[1:]
    out = np.full(shape, fill, dtype=np.float64)
    lens = np.zeros(len(arrs), dtype=np.int64)
    for i, a in enumerate(arrs):
        lens[i] = len(a)
        if len(a):
            out[i, : len(a)] = a
    return out, lens


def _sample_choices(choice, masks, u):
    """Vectorized customer choice: product index in 0..n-1, or n for no purchase."""
    probs = choice.purchase_probs(masks)
    cum = np.cumsum(probs, axis=1)
    return (u[:, None] > cum).sum(axis=1).clip(max=choice.n)


def _roll_from_inputs(inst, policy, inputs, collect):
    M = len(inputs)
    arr_pad, lens = _pad([a for a, _, _ in inputs])
    u_per = policy.uniforms_per_decision
    if u_per:
        up_pad, _ = _pad([u for _, u, _ in inputs])
    else:
        up_pad = np.zeros((M, arr_pad.shape[1], 0))
    uc_pad, _ = _pad([u for _, _, u in inputs])

    X = np.tile(inst.c, (M, 1)).astype(np.int64)
    avail = inst.availability_batch(X)
    revenue = np.zeros(M)
    recs = [([], [], [], []) for _ in range(M)] if collect else None

    for k in range(arr_pad.shape[1]):
        rows = np.nonzero((k < lens) & (avail != 0))[0]
        if len(rows) == 0:
            break
        ts = arr_pad[rows, k]
        uk = up_pad[rows, k] if u_per else np.zeros((len(rows), 0))
        masks = policy.sample_batch(ts, X[rows], avail[rows], uk)
        if np.any(masks & ~avail[rows]):
            raise RuntimeError("policy proposed an infeasible assortment")
        js = _sample_choices(inst.choice, masks, uc_pad[rows, k])
        buy = js < inst.n
        if not np.any(buy):
            continue
        brows = rows[buy]
        bj = js[buy]
        X[brows] -= inst.A.T[bj]
        avail[brows] = inst.availability_batch(X[brows])
        rew = inst.p[bj]
        revenue[brows] += rew
        if collect:
            bmasks = masks[buy]
            bts = ts[buy]
            for idx in range(len(brows)):
                i = brows[idx]
                recs[i][0].append(bts[idx])
                recs[i][1].append(X[i].copy())
                recs[i][2].append(int(bmasks[idx]))
                recs[i][3].append(float(rew[idx]))

    if not collect:
        return revenue

    out = []
    for i in range(M):
        taus, states, assorts, rewards = recs[i]
        out.append(
            Trajectory(
                x0=inst.c.copy(),
                horizon=inst.T,
                taus=np.array(taus, dtype=np.float64),
                states=np.array(states, dtype=np.int64).reshape(len(taus), inst.m),
                assortments=np.array(assorts, dtype=np.int64),
                rewards=np.array(rewards, dtype=np.float64),
            )
        )
    return out


def roll_batch(inst: NetworkInstance, policy, M: int, rng: RngStream, collect: bool = True):
    """Roll ``M`` independent episodes from child streams ``rng.split(i)``.

    With ``collect=True`` returns a list of :class:`Trajectory`; with
    ``collect=False`` returns only the per-episode total revenues (same
    stochastic outcomes, no record bookkeeping).
    """
    inputs = [_episode_inputs(inst, policy, rng.split(i)) for i in range(M)]
    return _roll_from_inputs(inst, policy, inputs, collect)


def roll_episode(inst: NetworkInstance, policy, rng: RngStream) -> Trajectory:
    """One full episode starting at (0, c), driven directly by ``rng``."""
    return _roll_from_inputs(inst, policy, [_episode_inputs(inst, policy, rng)], True)[0]


def next_event(inst: NetworkInstance, t: float, x, policy, rng: RngStream):
    """Sequential single-event simulator: next jump after time ``t``, or None.

    Draws candidate arrivals one at a time (exponential gaps at the rate
    bound, thinned for non-constant rates), samples the policy at each
    arrival and the customer's choice, and returns the first state change as
    ``(t', x', S', r')``.  Returns ``None`` once the horizon is reached.
    Distribution-identical to the batched engine, but with its own draw
    order.
    """
    gen = rng.generator
    x = np.asarray(x, dtype=np.int64).copy()
    lam_max = inst.arrival.lambda_max
    if lam_max <= 0:
        return None
    thin = not isinstance(inst.arrival, Constant)
    while True:
        t = t + gen.exponential(1.0 / lam_max)
        if t > inst.T:
            return None
        if thin and gen.uniform() * lam_max >= inst.arrival.evaluate(t):
            continue
        avail = inst.availability(x)
        if avail == 0:
            return None
        u = gen.uniform(size=(1, max(policy.uniforms_per_decision, 0)))
        mask = int(policy.sample_batch(np.array([t]), x[None, :], np.array([avail]), u)[0])
        if mask & ~avail:
            raise RuntimeError("policy proposed an infeasible assortment")
        j = int(_sample_choices(inst.choice, np.array([mask]), np.array([gen.uniform()]))[0])
        if j >= inst.n:
            continue
        x2 = x - inst.A.T[j]
        return t, x2, mask, float(inst.p[j])


def revenues_batch(inst: NetworkInstance, policy, M: int, rng: RngStream) -> np.ndarray:
    """Total revenue of ``M`` episodes; fast path used by the evaluator."""
    return roll_batch(inst, policy, M, rng, collect=False)


# ---------------------------------------------------------------------------
# grid-held rollouts (discretization-based benchmarks)


@dataclass
class GridEpisode:
    """Grid-sampled interaction data: action held constant per cell."""

    times: np.ndarray  # (K+1,)
    states: np.ndarray  # (K+1, m) state at each grid point
    actions: np.ndarray  # (K,) assortment held on (t_k, t_{k+1}]
    rewards: np.ndarray  # (K,) revenue collected in each cell


def roll_batch_grid(inst: NetworkInstance, policy, dt: float, M: int, rng: RngStream, collect: bool = True):
    """Roll episodes with actions sampled on the uniform grid and held.

    The policy is queried at each grid time with the grid-point state; within
    a cell the state still evolves in continuous time, and the held
    assortment is intersected with product availability as inventory runs
    out.
    """
    K = int(round(inst.T / dt))
    if abs(K * dt - inst.T) > 1e-9 * max(1.0, inst.T):
        raise ValueError("dt must divide the horizon")
    grid = np.arange(K + 1) * dt

    inputs = []
    u_per = policy.uniforms_per_decision
    for i in range(M):
        s = rng.split(i)
        arrivals = sample_arrival_times(inst.arrival, inst.T, s)
        u_policy = s.generator.uniform(size=(K, u_per)) if u_per else np.zeros((K, 0))
        u_choice = s.generator.uniform(size=len(arrivals))
        inputs.append((arrivals, u_policy, u_choice))

    arr_pad, lens = _pad([a for a, _, _ in inputs])
    uc_pad, _ = _pad([u for _, _, u in inputs])
    cell_of = np.minimum((arr_pad / dt).astype(np.int64), K - 1)  # arrival -> cell index

    X = np.tile(inst.c, (M, 1)).astype(np.int64)
    avail = inst.availability_batch(X)
    states = np.zeros((M, K + 1, inst.m), dtype=np.int64) if collect else None
    actions = np.zeros((M, K), dtype=np.int64) if collect else None
    rewards = np.zeros((M, K))
    arr_ptr = np.zeros(M, dtype=np.int64)

    for k in range(K):
        if collect:
            states[:, k] = X
        uk = np.stack([inputs[i][1][k] for i in range(M)]) if u_per else np.zeros((M, 0))
        held = policy.sample_batch(np.full(M, grid[k]), X, avail, uk)
        if np.any(held & ~avail):
            raise RuntimeError("policy proposed an infeasible assortment")
        if collect:
            actions[:, k] = held
        # consume this cell's arrivals, re-intersecting with availability
        while True:
            has = (arr_ptr < lens) & (cell_of[np.arange(M), np.minimum(arr_ptr, cell_of.shape[1] - 1)] == k) if cell_of.shape[1] else np.zeros(M, dtype=bool)
            rows = np.nonzero(has & (avail != 0))[0]
            skip = np.nonzero(has & (avail == 0))[0]
            arr_ptr[skip] += 1
            if len(rows) == 0:
                if len(skip) == 0:
                    break
                continue
            ptr = arr_ptr[rows]
            masks = held[rows] & avail[rows]
            js = _sample_choices(inst.choice, masks, uc_pad[rows, ptr])
            buy = js < inst.n
            brows = rows[buy]
            if len(brows):
                bj = js[buy]
                X[brows] -= inst.A.T[bj]
                avail[brows] = inst.availability_batch(X[brows])
                rewards[brows, k] += inst.p[bj]
            arr_ptr[rows] += 1
    if collect:
        states[:, K] = X
        return [GridEpisode(grid.copy(), states[i], actions[i], rewards[i]) for i in range(M)]
    return rewards.sum(axis=1)


# ---------------------------------------------------------------------------
# optional trajectory dump


def dump_trajectories(path, trajectories) -> None:
    """CSV dump with columns (episode, l, tau, x_1.., assortment_bitmask, reward)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        m = trajectories[0].x0.shape[0] if trajectories else 0
        w.writerow(["episode", "l", "tau"] + [f"x{i + 1}" for i in range(m)] + ["assortment_bitmask", "reward"])
        for e, traj in enumerate(trajectories):
            for l in range(traj.n_jumps):
                w.writerow([e, l + 1, repr(float(traj.taus[l]))] + [int(v) for v in traj.states[l]] + [int(traj.assortments[l]), repr(float(traj.rewards[l]))])
