"""Admission control in a single-server queue with non-homogeneous rates.

The state is the queue length (including the job in service).  Arrivals
follow a non-homogeneous Poisson process; an admission decision is sampled
at each arrival instant, and service completions are generated by thinning
the service-rate function and discarding completions in an empty system,
which is equivalent to a state-dependent departure intensity.  Admissions
pay a fixed reward, holding costs accrue linearly in the queue length, and
jobs left at the horizon incur a terminal penalty.

The trainer mirrors the revenue-management actor-critic with a neural
critic and a Bernoulli admission actor; departures are recorded as
zero-reward jumps so the inter-jump integral machinery applies unchanged.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .model import ValidationError
from .simulate import RngStream, sample_arrival_times
from .tinynn import MLP, AdamState, adam_step_mlp
from .value import DEFAULT_QUAD_ORDER, MLPCritic, quad_nodes
from . import learn


@dataclass(frozen=True)
class QueueInstance:
    capacity: int
    T: float
    admission_reward: float  # per admitted job
    holding_cost: float  # per job per unit time
    terminal_penalty: float  # per job still present at T
    arrival: object
    service: object

    def __post_init__(self):
        if self.capacity < 1:
            raise ValidationError("capacity must be >= 1")
        if self.T <= 0:
            raise ValidationError("horizon must be positive")
        if min(self.admission_reward, self.holding_cost, self.terminal_penalty) < 0:
            raise ValidationError("cost coefficients must be nonnegative")
        self.arrival.validate(self.T)
        self.service.validate(self.T)


@dataclass
class QueueTrajectory:
    """Jump records: +1 admissions (reward K1) and -1 departures (reward 0)."""

    horizon: float
    taus: np.ndarray
    states: np.ndarray  # post-jump queue lengths
    rewards: np.ndarray
    admitted: np.ndarray  # bool, True where the jump is an admission

    x0: int = 0

    @property
    def n_jumps(self) -> int:
        return len(self.taus)

    def interval_bounds(self):
        edges = np.concatenate([[0.0], self.taus, [self.horizon]])
        return np.stack([edges[:-1], edges[1:]], axis=1)

    def interval_states(self) -> np.ndarray:
        return np.concatenate([[self.x0], self.states])

    def as_rm_trajectory(self):
        """View as a generic trajectory with 1-d states for the PE machinery."""
        from .simulate import Trajectory

        return Trajectory(
            x0=np.array([self.x0]),
            horizon=self.horizon,
            taus=self.taus,
            states=self.states[:, None],
            assortments=self.admitted.astype(np.int64),
            rewards=self.rewards,
        )


def episode_objective(traj: QueueTrajectory, inst: QueueInstance) -> float:
    """K1 * admissions - K2 * integral of the queue length - K3 * X_T.

    The holding integral is exact because the path is piecewise constant.
    """
    bounds = traj.interval_bounds()
    occupancy = float(traj.interval_states() @ (bounds[:, 1] - bounds[:, 0]))
    terminal = float(traj.states[-1]) if traj.n_jumps else float(traj.x0)
    return float(traj.rewards.sum() - inst.holding_cost * occupancy - inst.terminal_penalty * terminal)


# ---------------------------------------------------------------------------
# admission policies


class ThresholdPolicy:
    """Admit exactly when the queue length is below the threshold."""

    name = "threshold"
    uniforms_per_decision = 1

    def __init__(self, inst: QueueInstance, threshold: int):
        if not 1 <= threshold <= inst.capacity:
            raise ValueError("threshold must lie in 1..capacity")
        self.inst = inst
        self.threshold = int(threshold)

    def admit_prob_batch(self, ts, xs) -> np.ndarray:
        xs = np.asarray(xs)
        return ((xs < self.threshold) & (xs < self.inst.capacity)).astype(np.float64)

    def entropy_batch(self, ts, xs) -> np.ndarray:
        return np.zeros(len(np.atleast_1d(ts)))


class QueueUniformRandomPolicy:
    """Admit with probability 1/2 whenever there is room."""

    name = "uniform-random"
    uniforms_per_decision = 1

    def __init__(self, inst: QueueInstance, p: float = 0.5):
        self.inst = inst
        self.p = float(p)

    def admit_prob_batch(self, ts, xs) -> np.ndarray:
        xs = np.asarray(xs)
        return np.where(xs < self.inst.capacity, self.p, 0.0)

    def entropy_batch(self, ts, xs) -> np.ndarray:
        p = self.admit_prob_batch(ts, xs)
        with np.errstate(divide="ignore", invalid="ignore"):
            h = np.where((p > 0) & (p < 1), -(p * np.log(p) + (1 - p) * np.log1p(-p)), 0.0)
        return h


class QueueMLPPolicy:
    """Bernoulli admission policy driven by an actor network.

    The net maps normalized (t, x) to one logit; the admit probability is the
    temperature-scaled sigmoid, forced to zero at full capacity.
    """

    name = "bernoulli-mlp"
    uniforms_per_decision = 1

    def __init__(self, inst: QueueInstance, net: MLP, gamma: float):
        if gamma <= 0:
            raise ValueError("temperature gamma must be positive")
        if net.widths[0] != 2 or net.widths[-1] != 1:
            raise ValueError("actor net must map (t, x) to a single logit")
        self.inst = inst
        self.net = net
        self.gamma = float(gamma)

    @classmethod
    def build(cls, inst: QueueInstance, hidden, gamma: float, rng) -> "QueueMLPPolicy":
        return cls(inst, MLP([2, *hidden, 1], rng=rng, zero_output=True), gamma)

    def _inputs(self, ts, xs) -> np.ndarray:
        ts = np.asarray(ts, dtype=np.float64)
        xs = np.asarray(xs, dtype=np.float64)
        return np.stack([ts / self.inst.T, xs / self.inst.capacity], axis=1)

    def _sigmoid_logits(self, ts, xs):
        z = self.net.forward(self._inputs(ts, xs))[:, 0] / self.gamma
        pos = z >= 0
        sig = np.empty_like(z)
        sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        sig[~pos] = ez / (1.0 + ez)
        return sig

    def admit_prob_batch(self, ts, xs) -> np.ndarray:
        xs = np.asarray(xs)
        sig = self._sigmoid_logits(ts, xs)
        return np.where(xs < self.inst.capacity, sig, 0.0)

    def log_prob_admit(self, t, x) -> float:
        p = float(self.admit_prob_batch(np.array([t]), np.array([x]))[0])
        return float(np.log(p))

    def entropy_batch(self, ts, xs) -> np.ndarray:
        p = self.admit_prob_batch(ts, np.asarray(xs))
        with np.errstate(divide="ignore", invalid="ignore"):
            h = np.where((p > 0) & (p < 1), -(p * np.log(p) + (1 - p) * np.log1p(-p)), 0.0)
        return h

    def entropy(self, t, x) -> float:
        return float(self.entropy_batch(np.array([t]), np.array([x]))[0])

    def grad_log_prob_admit_weighted(self, ts, xs, w):
        """Weighted score gradients of log pi(admit | t, x) w.r.t. the net."""
        xs = np.asarray(xs)
        inp = self._inputs(ts, xs)
        out, acts = self.net.forward_cached(inp)
        z = out[:, 0] / self.gamma
        sig = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
        G = (np.asarray(w, dtype=np.float64) * (1.0 - sig) / self.gamma)[:, None]
        G[np.asarray(xs) >= self.inst.capacity] = 0.0
        return self.net.backward(acts, G)

    def grad_entropy_weighted(self, ts, xs, w):
        xs = np.asarray(xs)
        inp = self._inputs(ts, xs)
        out, acts = self.net.forward_cached(inp)
        z = out[:, 0] / self.gamma
        sig = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
        with np.errstate(divide="ignore", invalid="ignore"):
            dh = np.where((sig > 0) & (sig < 1), sig * (1 - sig) * (np.log1p(-sig) - np.log(sig)) / self.gamma, 0.0)
        G = (np.asarray(w, dtype=np.float64) * dh)[:, None]
        G[np.asarray(xs) >= self.inst.capacity] = 0.0
        return self.net.backward(acts, G)

    @property
    def flat_params(self) -> np.ndarray:
        return self.net.to_flat()

    def set_flat(self, flat) -> None:
        self.net.from_flat(flat)

    def param_header(self) -> dict:
        return {
            "parametrization": self.name,
            "shapes": [list(W.shape) for W, _ in self.net.params],
            "gamma": self.gamma,
            "d": None,
            "widths": list(self.net.widths),
        }


# ---------------------------------------------------------------------------
# episode generation


def roll_queue_batch(inst: QueueInstance, policy, M: int, rng: RngStream, collect: bool = True):
    """Roll ``M`` queue episodes; competing thinned arrival/service streams.

    Rejected arrivals and service candidates hitting an empty system are
    dropped without producing a record.  With ``collect=False`` returns the
    per-episode objectives instead of trajectories.
    """
    times_l, kinds_l, u_l = [], [], []
    for i in range(M):
        s = rng.split(i)
        arr = sample_arrival_times(inst.arrival, inst.T, s)
        svc = sample_arrival_times(inst.service, inst.T, s)
        u = s.generator.uniform(size=len(arr))
        times = np.concatenate([arr, svc])
        kinds = np.concatenate([np.ones(len(arr), dtype=np.int64), -np.ones(len(svc), dtype=np.int64)])
        order = np.argsort(times, kind="stable")
        times_l.append(times[order])
        kinds_l.append(kinds[order])
        u_l.append(u)  # decision uniforms consumed in arrival order

    kmax = max((len(t) for t in times_l), default=0)
    lens = np.array([len(t) for t in times_l], dtype=np.int64)
    times_pad = np.zeros((M, kmax))
    kinds_pad = np.zeros((M, kmax), dtype=np.int64)
    for i in range(M):
        times_pad[i, : lens[i]] = times_l[i]
        kinds_pad[i, : lens[i]] = kinds_l[i]
    umax = max((len(u) for u in u_l), default=0)
    u_pad = np.zeros((M, umax + 1))
    for i in range(M):
        u_pad[i, : len(u_l[i])] = u_l[i]

    x = np.zeros(M, dtype=np.int64)
    arr_seen = np.zeros(M, dtype=np.int64)
    objective = np.zeros(M)
    t_prev = np.zeros(M)
    recs = [([], [], [], []) for _ in range(M)] if collect else None

    for k in range(kmax):
        live = k < lens
        kinds = np.where(live, kinds_pad[:, k], 0)
        ts = times_pad[:, k]

        arrivals = np.nonzero(kinds > 0)[0]
        if len(arrivals):
            at = ts[arrivals]
            u = u_pad[arrivals, arr_seen[arrivals]]
            p = policy.admit_prob_batch(at, x[arrivals])
            admit = (u < p) & (x[arrivals] < inst.capacity)
            arr_seen[arrivals] += 1
            adm_rows = arrivals[admit]
            if len(adm_rows):
                objective[adm_rows] -= inst.holding_cost * x[adm_rows] * (at[admit] - t_prev[adm_rows])
                t_prev[adm_rows] = at[admit]
                x[adm_rows] += 1
                objective[adm_rows] += inst.admission_reward
                if collect:
                    for i, tt in zip(adm_rows, at[admit]):
                        recs[i][0].append(tt)
                        recs[i][1].append(int(x[i]))
                        recs[i][2].append(inst.admission_reward)
                        recs[i][3].append(True)

        services = np.nonzero(kinds < 0)[0]
        if len(services):
            st = ts[services]
            busy = x[services] >= 1
            dep_rows = services[busy]
            if len(dep_rows):
                objective[dep_rows] -= inst.holding_cost * x[dep_rows] * (st[busy] - t_prev[dep_rows])
                t_prev[dep_rows] = st[busy]
                x[dep_rows] -= 1
                if collect:
                    for i, tt in zip(dep_rows, st[busy]):
                        recs[i][0].append(tt)
                        recs[i][1].append(int(x[i]))
                        recs[i][2].append(0.0)
                        recs[i][3].append(False)

    objective -= inst.holding_cost * x * (inst.T - t_prev) + inst.terminal_penalty * x
    if not collect:
        return objective

    out = []
    for i in range(M):
        taus, states, rewards, admitted = recs[i]
        out.append(
            QueueTrajectory(
                horizon=inst.T,
                taus=np.array(taus, dtype=np.float64),
                states=np.array(states, dtype=np.int64),
                rewards=np.array(rewards, dtype=np.float64),
                admitted=np.array(admitted, dtype=bool),
            )
        )
    return out


class _SingleShim:
    """Presents one stream as child 0 so single episodes match batch entry 0."""

    def __init__(self, rng):
        self._rng = rng

    def split(self, i):
        if i != 0:
            raise ValueError("single-episode shim only has child 0")
        return self._rng


def roll_queue_episode(inst: QueueInstance, policy, rng: RngStream) -> QueueTrajectory:
    """One queue episode driven directly by ``rng``."""
    return roll_queue_batch(inst, policy, 1, _SingleShim(rng), collect=True)[0]


def evaluate_queue(inst: QueueInstance, policy, paths: int, rng: RngStream, label: str | None = None):
    from .baselines import EvalReport

    t0 = time.perf_counter()
    chunk = 20_000
    parts = []
    i = 0
    left = paths
    while left > 0:
        size = min(chunk, left)
        parts.append(roll_queue_batch(inst, policy, size, rng.split(i), collect=False))
        left -= size
        i += 1
    objs = np.concatenate(parts) if parts else np.zeros(0)
    mean = float(objs.mean()) if len(objs) else 0.0
    ci = float(2.576 * objs.std(ddof=1) / np.sqrt(len(objs))) if len(objs) > 1 else 0.0
    return EvalReport(label or getattr(policy, "name", "policy"), mean, ci, paths, time.perf_counter() - t0)


def best_threshold(inst: QueueInstance, paths: int, rng: RngStream):
    """Evaluate every threshold on common random numbers; return the best."""
    best = None
    best_x = None
    for xbar in range(1, inst.capacity + 1):
        rep = evaluate_queue(inst, ThresholdPolicy(inst, xbar), paths, rng, label=f"threshold-{xbar}")
        if best is None or rep.mean > best.mean:
            best, best_x = rep, xbar
    return best_x, best


# ---------------------------------------------------------------------------
# dynamic programming


def solve_queue_dp(inst: QueueInstance, dt: float) -> np.ndarray:
    """Backward grid recursion for the optimal admission value.

    Holding costs are charged at rate K2 * x and the terminal value is
    ``-K3 * x``; rates are evaluated at the right cell endpoint.  Returns the
    (K+1, C+1) value table; the optimal expected objective is ``V[0, 0]``.
    """
    K = int(round(inst.T / dt))
    C = inst.capacity
    V = np.zeros((K + 1, C + 1))
    xs = np.arange(C + 1, dtype=np.float64)
    V[K] = -inst.terminal_penalty * xs
    for k in range(K - 1, -1, -1):
        t_next = (k + 1) * dt
        lam = float(inst.arrival.evaluate(t_next))
        mu = float(inst.service.evaluate(t_next))
        v = V[k + 1]
        admit_gain = np.zeros(C + 1)
        admit_gain[:C] = np.maximum(inst.admission_reward + v[1:] - v[:-1], 0.0)
        depart = np.zeros(C + 1)
        depart[1:] = v[:-1] - v[1:]
        V[k] = v + lam * dt * admit_gain + mu * dt * depart - inst.holding_cost * dt * xs
    return V


# ---------------------------------------------------------------------------
# actor-critic training (neural critic + Bernoulli admission actor)


@dataclass
class QueueTrainConfig:
    episodes: int
    batch_size: int = 100
    gamma: float = 1e-3
    lr_phi: float = 1e-5
    lr_theta: float = 3e-2
    quad_order: int = DEFAULT_QUAD_ORDER
    seed: int = 0
    eval_every: int = 0
    eval_paths: int = 2000
    actor_hidden: tuple = (8, 8)
    critic_hidden: tuple = (8, 8)
    critic_steps: int = 1  # inner critic optimizer steps per policy update
    gamma_schedule: object = None  # optional callable update_index -> gamma

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("a seed is required")


def train_queue_actor_critic(inst: QueueInstance, config: QueueTrainConfig) -> learn.TrainResult:
    """Monte-Carlo critic step plus policy gradient over admission events.

    The critic loss includes the holding-cost and terminal-penalty terms of
    the episode objective; the policy gradient sums scores of admissions
    weighted by the critic's admission shadow price plus the reward, and the
    entropy-gradient integral over every inter-jump interval.
    """
    root = RngStream(config.seed)
    policy = QueueMLPPolicy.build(inst, config.actor_hidden, config.gamma, root.split(2).split(0))
    critic = MLPCritic.build(1, config.critic_hidden, inst.T, np.array([inst.capacity]), root.split(2).split(1))
    adam_phi = AdamState.for_params([a for Wb in policy.net.params for a in Wb])
    adam_theta = AdamState.for_params([a for Wb in critic.net.params for a in Wb])

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
        objs = roll_queue_batch(inst, policy, config.eval_paths, root.split(1).split(len(curve)), collect=False)
        mean = float(objs.mean())
        ci = float(2.576 * objs.std(ddof=1) / np.sqrt(len(objs))) if len(objs) > 1 else 0.0
        curve.append(learn.CurvePoint(episodes_seen, mean, ci, time.perf_counter() - t0))

    class _EntropyView:
        # adapter: the learn-module helpers pass (B, 1) state columns
        def entropy_batch(self, ts, X):
            return policy.entropy_batch(ts, np.asarray(X)[:, 0])

    eview = _EntropyView()

    for u in range(n_updates):
        gamma = config.gamma if config.gamma_schedule is None else float(config.gamma_schedule(u))
        policy.gamma = gamma  # temperature and entropy weight anneal together
        trajs = roll_queue_batch(inst, policy, config.batch_size, root.split(0).split(u))
        rm_view = [tr.as_rm_trajectory() for tr in trajs]
        for _ in range(config.critic_steps):
            learn.mc_pe_gradient_step(
                rm_view,
                critic,
                eview,
                gamma,
                config.lr_theta,
                adam_theta,
                config.quad_order,
                holding_rate=inst.holding_cost,
                terminal_penalty=inst.terminal_penalty,
            )
        if not np.all(np.isfinite(critic.net.to_flat())):
            raise learn.TrainingDiverged("critic parameters became non-finite")

        # policy gradient over admission transitions only
        a_t, a_x, a_w = [], [], []
        for tr in trajs:
            if not tr.n_jumps:
                continue
            adm = tr.admitted
            if not adm.any():
                continue
            xs_prev = np.concatenate([[tr.x0], tr.states])[:-1]
            a_t.append(tr.taus[adm])
            a_x.append(xs_prev[adm])
        grad = None
        if a_t:
            ts = np.concatenate(a_t)
            xs = np.concatenate(a_x)
            jpost = critic.value_batch(ts, (xs + 1)[:, None])
            jpre = critic.value_batch(ts, xs[:, None])
            w = (jpost - jpre + inst.admission_reward) / config.batch_size
            grad = policy.grad_log_prob_admit_weighted(ts, xs, w)
        flat = learn.flatten_batch(rm_view)
        nodes, wts = quad_nodes(flat.t1, flat.t2, config.quad_order)
        eg = policy.grad_entropy_weighted(
            nodes.ravel(), np.repeat(flat.x_int[:, 0], config.quad_order), wts.ravel() * gamma / config.batch_size
        )
        grad = eg if grad is None else learn._tree_add(grad, eg)
        if not learn._tree_finite(grad):
            raise learn.TrainingDiverged("policy gradient became non-finite")
        adam_step_mlp(adam_phi, policy.net, [tuple(-x for x in pair) for pair in grad], config.lr_phi)
        if not np.all(np.isfinite(policy.net.to_flat())):
            raise learn.TrainingDiverged("policy parameters became non-finite")
        maybe_eval((u + 1) * config.batch_size)

    maybe_eval(n_updates * config.batch_size, force=True)
    return learn.TrainResult(policy, critic, curve, n_updates)
