"""Policy evaluation and policy gradient on jump-time data, plus training loops.

Everything here consumes batches of :class:`~intensity_rl.simulate.Trajectory`
objects.  Trajectory integrals are decomposed into exact sums over inter-jump
intervals: the linear-critic integrals have closed forms, entropy integrals
use Gauss-Legendre nodes per interval.  Monte-Carlo policy evaluation solves
the quadratic loss in closed form through a pseudoinverse; TD(0) solves the
martingale-orthogonality linear system; neural critics take one optimizer
step per batch on the same loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .model import NetworkInstance
from .policy import BernoulliNNPolicy, LinearPairPolicy, LinearROPolicy, save_policy_params
from .simulate import RngStream, Trajectory, revenues_batch, roll_batch
from .tinynn import AdamState, adam_step, adam_step_mlp
from .value import DEFAULT_QUAD_ORDER, LinearCritic, MLPCritic, quad_nodes


class SingularMatrixError(np.linalg.LinAlgError):
    """TD system matrix is numerically singular."""

    def __init__(self, cond: float):
        super().__init__(f"TD(0) system matrix is singular (condition estimate {cond:.3e})")
        self.cond = cond


class TrainingDiverged(RuntimeError):
    """A parameter became non-finite during training."""


@dataclass
class PEResult:
    theta: np.ndarray
    diagnostics: dict


@dataclass
class PGEstimate:
    grad: object  # shaped like the policy parameters
    per_episode: list | None = None


# ---------------------------------------------------------------------------
# flattened batch views


@dataclass
class _FlatBatch:
    n_episodes: int
    # one row per inter-jump interval, episodes concatenated in order
    ep_of_interval: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    x_int: np.ndarray
    block_start: np.ndarray  # first interval row of each episode
    n_jumps: np.ndarray
    # one row per jump
    ep_of_jump: np.ndarray
    j_tau: np.ndarray
    j_xprev: np.ndarray
    j_xpost: np.ndarray
    j_S: np.ndarray
    j_reward: np.ndarray
    j_interval: np.ndarray  # interval row starting at this jump


def flatten_batch(trajs) -> _FlatBatch:
    m = trajs[0].x0.shape[0]
    t1, t2, xs, eps = [], [], [], []
    jt, jxp, jxn, js, jr, jep, jint = [], [], [], [], [], [], []
    block = []
    pos = 0
    for e, tr in enumerate(trajs):
        bounds = tr.interval_bounds()
        states = tr.interval_states()
        L = tr.n_jumps
        block.append(pos)
        t1.append(bounds[:, 0])
        t2.append(bounds[:, 1])
        xs.append(states)
        eps.append(np.full(L + 1, e))
        if L:
            jt.append(tr.taus)
            jxp.append(states[:-1])
            jxn.append(tr.states)
            js.append(tr.assortments)
            jr.append(tr.rewards)
            jep.append(np.full(L, e))
            jint.append(pos + 1 + np.arange(L))
        pos += L + 1
    Z = np.zeros(0)
    Zi = np.zeros(0, dtype=np.int64)
    return _FlatBatch(
        n_episodes=len(trajs),
        ep_of_interval=np.concatenate(eps).astype(np.int64),
        t1=np.concatenate(t1),
        t2=np.concatenate(t2),
        x_int=np.concatenate(xs).reshape(-1, m),
        block_start=np.array(block, dtype=np.int64),
        n_jumps=np.array([tr.n_jumps for tr in trajs], dtype=np.int64),
        ep_of_jump=np.concatenate(jep).astype(np.int64) if jep else Zi,
        j_tau=np.concatenate(jt) if jt else Z,
        j_xprev=np.concatenate(jxp).reshape(-1, m) if jxp else np.zeros((0, m)),
        j_xpost=np.concatenate(jxn).reshape(-1, m) if jxn else np.zeros((0, m)),
        j_S=np.concatenate(js).astype(np.int64) if js else Zi,
        j_reward=np.concatenate(jr) if jr else Z,
        j_interval=np.concatenate(jint).astype(np.int64) if jint else Zi,
    )


def _interval_entropy_nodes(policy, flat: _FlatBatch, order: int):
    """Quadrature nodes, weights and policy entropies for every interval."""
    nodes, wts = quad_nodes(flat.t1, flat.t2, order)
    H = policy.entropy_batch(nodes.ravel(), np.repeat(flat.x_int, order, axis=0)).reshape(nodes.shape)
    return nodes, wts, H


def _suffix_targets(flat: _FlatBatch, gamma: float, E1: np.ndarray) -> np.ndarray:
    """R_l = sum over later jumps of (r + gamma * E1); one value per interval."""
    R = np.zeros(len(flat.t1))
    for e in range(flat.n_episodes):
        L = flat.n_jumps[e]
        if L == 0:
            continue
        start = flat.block_start[e]
        jm = flat.ep_of_jump == e
        g = flat.j_reward[jm] + gamma * E1[start + 1 : start + 1 + L]
        suffix = np.concatenate([np.cumsum(g[::-1])[::-1], [0.0]])
        R[start : start + L + 1] = suffix
    return R


# ---------------------------------------------------------------------------
# closed-form policy evaluation (linear critic)


def mc_pe(trajs, critic: LinearCritic, policy, gamma: float, order: int = DEFAULT_QUAD_ORDER) -> PEResult:
    """Monte-Carlo PE: least-squares critic fit with exact interval integrals.

    Returns the pseudoinverse solution of the batch-averaged normal
    equations; rank deficiency is handled by a singular-value cutoff.
    """
    flat = flatten_batch(trajs)
    M = flat.n_episodes
    Mmat = critic.sum_D_bar(flat.t1, flat.t2, flat.x_int) / M

    if gamma > 0.0:
        nodes, wts, H = _interval_entropy_nodes(policy, flat, order)
        E1 = (wts * H).sum(axis=1)
        R = _suffix_targets(flat, gamma, E1)
        # E-term with the running integral of the basis as the weight
        Ipart = critic._power_integrals(flat.t1[:, None], nodes, critic.d)  # (B, q, d+1)
        aug = critic._aug(flat.x_int)
        Evec = np.einsum("bq,bq,bi,bql->il", wts, H, aug, Ipart, optimize=True).reshape(critic.W)
    else:
        R = _suffix_targets(flat, 0.0, np.zeros(len(flat.t1)))
        Evec = np.zeros(critic.W)

    bvec = (critic.b_bar_batch(flat.t1, flat.t2, flat.x_int) * R[:, None]).sum(axis=0)
    bvec = (bvec + gamma * Evec) / M

    rcond = critic.W * 1e-12
    theta = np.linalg.pinv(Mmat, rcond=rcond, hermitian=True) @ bvec
    s = np.linalg.svd(Mmat, compute_uv=False)
    cutoff = rcond * s[0] if len(s) else 0.0
    diag = {
        "cond": float(s[0] / s[-1]) if s[-1] > 0 else np.inf,
        "effective_rank": int((s > cutoff).sum()),
        "batch_size": M,
    }
    return PEResult(theta, diag)


def td0_pe(
    trajs,
    critic: LinearCritic,
    policy,
    gamma: float,
    order: int = DEFAULT_QUAD_ORDER,
    ridge: float | None = None,
    method: str = "solve",
) -> PEResult:
    """TD(0) PE: solve the empirical martingale-orthogonality system.

    The value function is characterized by the orthogonality condition
    *together with* the terminal condition J(T, .) = 0.  For this basis the
    terminal condition pins every zeroth time-power coefficient at zero
    (those basis functions do not vanish at t = T), so the TD family is the
    anchored span of the remaining basis functions and the test process is
    its gradient.  Orthogonality against those test components reads
    ``A theta = b`` where ``A`` collects jump outer products of the basis
    and its time-derivative integrals, and ``b`` the reward- and
    entropy-weighted test values.

    Without the anchoring the system is structurally singular (a constant
    is invisible to jumps and time derivatives) and, worse, inventory
    directions whose value drop nearly offsets the price are so weakly
    identified that the solution drifts far from the value function.

    ``method="solve"`` (default) inverts the anchored square system and
    raises :class:`SingularMatrixError` when it is numerically singular;
    ``method="lstsq"`` returns the minimum-norm least-squares solution over
    all test rows instead, and ``ridge`` adds Tikhonov damping for
    exploratory runs.
    """
    flat = flatten_batch(trajs)
    M = flat.n_episodes
    Mt = critic.sum_F_bar(flat.t1, flat.t2, flat.x_int)
    if len(flat.j_tau):
        prev = critic.basis_batch(flat.j_tau, flat.j_xprev)
        post = critic.basis_batch(flat.j_tau, flat.j_xpost)
        Mt = Mt + prev.T @ (post - prev)
        bt = prev.T @ flat.j_reward
    else:
        bt = np.zeros(critic.W)
    if gamma > 0.0:
        nodes, wts, H = _interval_entropy_nodes(policy, flat, order)
        up = critic._upow(nodes)  # (B, q, d+1)
        aug = critic._aug(flat.x_int)
        bt = bt + gamma * np.einsum("bq,bq,bi,bql->il", wts, H, aug, up, optimize=True).reshape(critic.W)
    A = -Mt / M
    b = bt / M

    # anchored coordinates: time powers l >= 1 only
    free = np.tile(np.arange(critic.d + 1) >= 1, critic.m + 1)
    theta = np.zeros(critic.W)
    A_sq = A[np.ix_(free, free)]
    s = np.linalg.svd(A_sq, compute_uv=False) if free.any() else np.zeros(0)
    cond = float(s[0] / s[-1]) if len(s) and s[-1] > 0 else np.inf
    if ridge is not None:
        theta[free] = np.linalg.solve(A_sq + ridge * np.eye(int(free.sum())), b[free])
    elif method == "lstsq":
        theta[free] = np.linalg.lstsq(A[:, free], b, rcond=None)[0]
    else:
        if not np.isfinite(cond) or cond > 1e12:
            raise SingularMatrixError(cond)
        theta[free] = np.linalg.solve(A_sq, b[free])
    rank = int((s > s[0] * critic.W * 1e-12).sum()) if len(s) and s[0] > 0 else 0
    return PEResult(theta, {"cond": cond, "effective_rank": rank, "batch_size": M})


# ---------------------------------------------------------------------------
# gradient-based policy evaluation (neural critic)


def mc_critic_loss_grads(
    trajs,
    critic: MLPCritic,
    policy,
    gamma: float,
    order: int = DEFAULT_QUAD_ORDER,
    holding_rate: float = 0.0,
    terminal_penalty: float = 0.0,
):
    """Monte-Carlo critic loss and its parameter gradients by quadrature.

    The loss is the inter-jump-interval decomposition of the squared error
    between the critic and the remaining reward-plus-entropy along the path.
    ``holding_rate``/``terminal_penalty`` add the linear running cost and
    terminal cost used by the admission-control variant (zero for revenue
    management).
    """
    flat = flatten_batch(trajs)
    M = flat.n_episodes
    nodes, wts = quad_nodes(flat.t1, flat.t2, order)  # (B, q)
    B = len(flat.t1)

    if gamma > 0.0:
        H = policy.entropy_batch(nodes.ravel(), np.repeat(flat.x_int, order, axis=0)).reshape(B, order)
        E1 = (wts * H).sum(axis=1)
        # inner integrals H_tail(s_i) = int_{s_i}^{t2} entropy: nested quadrature
        in_nodes, in_wts = quad_nodes(nodes.ravel(), np.repeat(flat.t2, order), order)  # (B*q, q)
        Hin = policy.entropy_batch(in_nodes.ravel(), np.repeat(flat.x_int, order * order, axis=0)).reshape(B * order, order)
        Htail = (in_wts * Hin).sum(axis=1).reshape(B, order)
    else:
        E1 = np.zeros(B)
        Htail = np.zeros((B, order))

    xw = flat.x_int[:, 0] if holding_rate else np.zeros(B)
    if holding_rate:
        hold = holding_rate * xw * (flat.t2 - flat.t1)
        g_extra = -hold  # enters the per-jump suffix through its interval
    else:
        g_extra = np.zeros(B)

    # suffix over later jumps of (r - holding + gamma E1)
    R = np.zeros(B)
    x_terminal = np.zeros(flat.n_episodes)
    for e in range(flat.n_episodes):
        L = flat.n_jumps[e]
        start = flat.block_start[e]
        rows = slice(start, start + L + 1)
        x_terminal[e] = xw[start + L] if holding_rate else 0.0
        g = np.zeros(L)
        if L:
            jm = flat.ep_of_jump == e
            g = flat.j_reward[jm] + gamma * E1[start + 1 : start + 1 + L] + g_extra[start + 1 : start + 1 + L]
        R[rows] = np.concatenate([np.cumsum(g[::-1])[::-1], [0.0]])

    const = R.copy()
    slope = np.zeros(B)
    if holding_rate:
        const = const - holding_rate * xw * flat.t2 - terminal_penalty * x_terminal[flat.ep_of_interval]
        slope = holding_rate * xw
    targets = const[:, None] + slope[:, None] * nodes + gamma * Htail

    Xrep = np.repeat(flat.x_int, order, axis=0)
    J = critic.value_batch(nodes.ravel(), Xrep).reshape(B, order)
    resid = J - targets
    loss = float((wts * resid**2).sum() * 0.5 / M)
    grads = critic.weighted_grad(nodes.ravel(), Xrep, (wts * resid).ravel() / M)
    return loss, grads


def mc_pe_gradient_step(trajs, critic: MLPCritic, policy, gamma: float, lr: float, adam: AdamState, order: int = DEFAULT_QUAD_ORDER, **cost_kw) -> float:
    """One Adam step on the Monte-Carlo critic loss; returns the loss value."""
    loss, grads = mc_critic_loss_grads(trajs, critic, policy, gamma, order, **cost_kw)
    if lr > 0.0:
        adam_step_mlp(adam, critic.net, grads, lr)
    return loss


# ---------------------------------------------------------------------------
# policy gradient


def _tree_scale(g, a: float):
    if isinstance(g, np.ndarray):
        return g * a
    return [tuple(x * a for x in pair) for pair in g]


def _tree_add(g1, g2):
    if isinstance(g1, np.ndarray):
        return g1 + g2
    return [tuple(x + y for x, y in zip(p1, p2)) for p1, p2 in zip(g1, g2)]


def _tree_neg(g):
    return _tree_scale(g, -1.0)


def _tree_finite(g) -> bool:
    if isinstance(g, np.ndarray):
        return bool(np.all(np.isfinite(g)))
    return all(np.all(np.isfinite(x)) for pair in g for x in pair)


def policy_gradient(trajs, critic, policy, gamma: float, order: int = DEFAULT_QUAD_ORDER, per_episode: bool = False) -> PGEstimate:
    """Jump-time policy-gradient estimate (ascent direction).

    Sums score functions at sale epochs weighted by the critic shadow price
    plus reward, and adds the entropy-gradient integral over every
    inter-jump interval; the result is averaged over the batch.
    """
    flat = flatten_batch(trajs)
    M = flat.n_episodes
    if len(flat.j_tau):
        w = critic.value_batch(flat.j_tau, flat.j_xpost) - critic.value_batch(flat.j_tau, flat.j_xprev) + flat.j_reward
        grad = policy.grad_log_prob_weighted(flat.j_tau, flat.j_xprev, flat.j_S, w / M)
    else:
        grad = policy.grad_log_prob_weighted(np.zeros(0), np.zeros((0, flat.x_int.shape[1])), np.zeros(0, dtype=np.int64), np.zeros(0))
    if gamma > 0.0:
        nodes, wts = quad_nodes(flat.t1, flat.t2, order)
        eg = policy.grad_entropy_weighted(nodes.ravel(), np.repeat(flat.x_int, order, axis=0), wts.ravel() * gamma / M)
        grad = _tree_add(grad, eg)
    contribs = None
    if per_episode:
        contribs = [policy_gradient([tr], critic, policy, gamma, order).grad for tr in trajs]
    return PGEstimate(grad, contribs)


# ---------------------------------------------------------------------------
# actor-critic training


@dataclass
class TrainConfig:
    episodes: int
    batch_size: int
    gamma: float
    lr_phi: float
    lr_theta: float = 0.0
    degree: int = 2
    quad_order: int = DEFAULT_QUAD_ORDER
    seed: int = 0
    pe_method: str = "mc"  # "mc" | "td0"
    eval_every: int = 0  # episodes between learning-curve points; 0 = final only
    eval_paths: int = 2000
    actor_hidden: tuple = (64, 64)
    critic_hidden: tuple = (64, 64)
    checkpoint_every: int = 0  # updates between checkpoints; 0 = none
    out_dir: str | None = None
    gamma_schedule: object = None  # optional callable update_index -> gamma

    def __post_init__(self):
        if self.episodes < 0 or self.batch_size < 1:
            raise ValueError("episodes must be >= 0 and batch_size >= 1")
        if self.gamma < 0 or self.lr_phi < 0 or self.lr_theta < 0:
            raise ValueError("gamma and learning rates must be nonnegative")
        if self.seed is None:
            raise ValueError("a seed is required")


@dataclass
class CurvePoint:
    episode: int
    avg_revenue: float
    ci99: float
    wallclock_s: float


@dataclass
class TrainResult:
    policy: object
    critic: object
    curve: list
    n_updates: int


def _mean_ci99(values: np.ndarray):
    mean = float(values.mean())
    if len(values) < 2:
        return mean, 0.0
    return mean, float(2.576 * values.std(ddof=1) / np.sqrt(len(values)))


def make_parametrization(inst: NetworkInstance, config: TrainConfig, which: str, rng: RngStream):
    if which == "linear-pair":
        return LinearPairPolicy(inst, config.degree, config.gamma), LinearCritic(inst.m, config.degree, inst.T)
    if which == "linear-ro":
        return LinearROPolicy(inst, config.degree, config.gamma), LinearCritic(inst.m, config.degree, inst.T)
    if which == "2-nns":
        actor = BernoulliNNPolicy.build(inst, config.actor_hidden, config.gamma, rng.split(0))
        critic = MLPCritic.build(inst.m, config.critic_hidden, inst.T, inst.c, rng.split(1))
        return actor, critic
    raise ValueError(f"unknown parametrization {which!r}")


def _policy_params(policy):
    if isinstance(policy, (LinearPairPolicy, LinearROPolicy)):
        return [policy.phi]
    return [a for Wb in policy.net.params for a in Wb]


def _apply_policy_update(policy, adam: AdamState, grad, lr: float) -> None:
    # Adam minimizes; pass the negated ascent direction
    if isinstance(policy, (LinearPairPolicy, LinearROPolicy)):
        policy.phi = adam_step(adam, [policy.phi], [-grad], lr)[0]
        if not np.all(np.isfinite(policy.phi)):
            raise TrainingDiverged("policy parameters became non-finite")
    else:
        adam_step_mlp(adam, policy.net, [tuple(-x for x in pair) for pair in grad], lr)
        if not np.all(np.isfinite(policy.net.to_flat())):
            raise TrainingDiverged("policy parameters became non-finite")


def train_actor_critic(inst: NetworkInstance, config: TrainConfig, parametrization: str = "linear-pair") -> TrainResult:
    """Alternate batch rollouts, policy evaluation and a policy-gradient step.

    Linear parametrizations refit the critic in closed form every update
    (Monte Carlo or TD(0) per ``config.pe_method``); the neural parametrization
    takes one critic Adam step per update.  Learning-curve points evaluate pure
    revenue on a separate stream.
    """
    root = RngStream(config.seed)
    policy, critic = make_parametrization(inst, config, parametrization, root.split(2))
    adam_phi = AdamState.for_params(_policy_params(policy))
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
        revs = revenues_batch(inst, policy, config.eval_paths, root.split(1).split(len(curve)))
        mean, ci = _mean_ci99(revs)
        curve.append(CurvePoint(episodes_seen, mean, ci, time.perf_counter() - t0))

    for u in range(n_updates):
        gamma = config.gamma if config.gamma_schedule is None else float(config.gamma_schedule(u))
        trajs = roll_batch(inst, policy, config.batch_size, root.split(0).split(u))
        if isinstance(critic, MLPCritic):
            mc_pe_gradient_step(trajs, critic, policy, gamma, config.lr_theta, adam_theta, config.quad_order)
            if not np.all(np.isfinite(critic.net.to_flat())):
                raise TrainingDiverged("critic parameters became non-finite")
        else:
            pe = mc_pe(trajs, critic, policy, gamma, config.quad_order) if config.pe_method == "mc" else td0_pe(trajs, critic, policy, gamma, config.quad_order)
            if not np.all(np.isfinite(pe.theta)):
                raise TrainingDiverged("critic parameters became non-finite")
            critic = critic.with_theta(pe.theta)
        pg = policy_gradient(trajs, critic, policy, gamma, config.quad_order)
        if not _tree_finite(pg.grad):
            raise TrainingDiverged("policy gradient became non-finite")
        _apply_policy_update(policy, adam_phi, pg.grad, config.lr_phi)
        if config.checkpoint_every and config.out_dir and (u + 1) % config.checkpoint_every == 0:
            save_policy_params(f"{config.out_dir}/checkpoint_{u + 1:06d}.npz", policy)
        maybe_eval((u + 1) * config.batch_size)

    maybe_eval(n_updates * config.batch_size, force=True)
    return TrainResult(policy, critic, curve, n_updates)
