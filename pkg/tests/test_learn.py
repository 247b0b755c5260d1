import numpy as np
import pytest

from intensity_rl.model import Constant, NetworkInstance, Segment, SegmentedMNL, all_submasks_sorted, state_index
from intensity_rl.policy import GreedyPolicy, LinearPairPolicy, UniformRandomPolicy
from intensity_rl.simulate import RngStream, roll_batch
from intensity_rl.tinynn import MLP, AdamState
from intensity_rl.value import LinearCritic, MLPCritic, quad_nodes
from intensity_rl.learn import (
    SingularMatrixError,
    TrainConfig,
    TrainingDiverged,
    flatten_batch,
    mc_critic_loss_grads,
    mc_pe,
    mc_pe_gradient_step,
    policy_gradient,
    td0_pe,
    train_actor_critic,
)

GAMMA = 2e-3


def entropy_only_instance():
    """Zero arrival rate: no jumps ever, value accrues from entropy alone."""
    choice = SegmentedMNL([Segment(1.0, (0,), (1.0,), 1.0)])
    return NetworkInstance([[1]], [1.0], [2], 6.0, Constant(0.0), choice)


class ConstantEntropy:
    def __init__(self, h0):
        self.h0 = h0

    def entropy_batch(self, ts, X):
        return np.full(len(np.atleast_1d(ts)), self.h0)


def zero_sales_instance():
    choice = SegmentedMNL([Segment(1.0, (0,), (1.0,), 1.0)])
    return NetworkInstance([[1]], [1.0], [0], 5.0, Constant(1.0), choice)


def ode_policy_value(inst, policy_weights_fn, gamma, dt=1e-3):
    """Backward-Euler solve of the fixed-policy value equation (test oracle)."""
    states, encode = state_index(inst.c)
    ns = len(states)
    avail = inst.availability_batch(states)
    masks = all_submasks_sorted(inst.availability(inst.c))
    probs_all = inst.choice.purchase_probs(masks)
    lam = float(inst.arrival.evaluate(0.0))
    rows_s, rows_m, rows_w, ent = [], [], [], np.zeros(ns)
    for s in range(ns):
        feas = np.nonzero((masks & ~avail[s]) == 0)[0]
        w = policy_weights_fn(states[s], masks[feas])
        ent[s] = -np.sum(w * np.log(np.maximum(w, 1e-300)))
        rows_s.append(np.full(len(feas), s))
        rows_m.append(feas)
        rows_w.append(w)
    rows_s, rows_m, rows_w = map(np.concatenate, (rows_s, rows_m, rows_w))
    sale_p = probs_all[rows_m][:, : inst.n]
    rev = sale_p @ inst.p
    succ = np.zeros((len(rows_s), inst.n), dtype=int)
    for j in range(inst.n):
        nxt = states[rows_s] - inst.A.T[j]
        ok = sale_p[:, j] > 0
        succ[:, j] = encode(np.where(ok[:, None], nxt, states[rows_s]))
    K = int(round(inst.T / dt))
    v = np.zeros(ns)
    for _ in range(K):
        H_rows = lam * (rev + (sale_p * (v[succ] - v[rows_s][:, None])).sum(1))
        drift = np.zeros(ns)
        np.add.at(drift, rows_s, rows_w * H_rows)
        v = v + dt * (drift + gamma * ent)
    return float(v[int(encode(inst.c[None, :])[0])])


def test_mc_pe_zero_reward_zero_entropy_gives_zero_theta():
    inst = zero_sales_instance()
    pol = UniformRandomPolicy(inst)
    trajs = roll_batch(inst, pol, 5, RngStream(0))
    pe = mc_pe(trajs, LinearCritic(inst.m, 2, inst.T), pol, gamma=0.0)
    np.testing.assert_allclose(pe.theta, 0.0, atol=1e-12)


def test_td0_pe_zero_reward_zero_entropy_gives_zero_theta():
    inst = zero_sales_instance()
    pol = UniformRandomPolicy(inst)
    trajs = roll_batch(inst, pol, 5, RngStream(0))
    pe = td0_pe(trajs, LinearCritic(inst.m, 2, inst.T), pol, gamma=0.0, method="lstsq")
    np.testing.assert_allclose(pe.theta, 0.0, atol=1e-12)


def test_entropy_toy_recovers_analytic_value():
    # true J(t, x) = gamma * h0 * (T - t), linear in (1 - t/T)
    inst = entropy_only_instance()
    pol = ConstantEntropy(0.8)
    trajs = roll_batch(inst, UniformRandomPolicy(inst), 4, RngStream(0))
    crit = LinearCritic(inst.m, 1, inst.T)
    gamma = 0.5
    pe = mc_pe(trajs, crit, pol, gamma)
    for t in (0.0, 1.7, 6.0):
        assert crit.with_theta(pe.theta).value(t, inst.c) == pytest.approx(gamma * 0.8 * (6.0 - t), abs=1e-8)
    td = td0_pe(trajs, crit, pol, gamma, method="lstsq")
    np.testing.assert_allclose(td.theta, pe.theta, atol=1e-6)


def test_mc_pe_equals_msve_minimizer_on_span():
    # in-span case: the quadratic-loss minimizer equals the exact coefficients
    inst = entropy_only_instance()
    pol = ConstantEntropy(1.3)
    trajs = roll_batch(inst, UniformRandomPolicy(inst), 3, RngStream(1))
    crit = LinearCritic(inst.m, 1, inst.T)
    pe = mc_pe(trajs, crit, pol, gamma=0.25)
    b = 0.25 * 1.3 * inst.T
    # minimum-norm representation of J = b * (1 - t/T) on states x = 2
    np.testing.assert_allclose(pe.theta, [0.0, b / 5, 0.0, 2 * b / 5], atol=1e-6)


def test_mc_pe_matches_ode_oracle_small_net(small_net):
    pol = UniformRandomPolicy(small_net)
    truth = ode_policy_value(small_net, lambda x, masks: np.full(len(masks), 1.0 / len(masks)), GAMMA)
    trajs = roll_batch(small_net, pol, 3000, RngStream(1))
    crit = LinearCritic(small_net.m, 3, small_net.T)
    pe = mc_pe(trajs, crit, pol, GAMMA)
    got = crit.with_theta(pe.theta).value(0.0, small_net.c)
    assert abs(got - truth) / truth < 0.02


def test_td0_pe_matches_ode_oracle_small_net(small_net):
    pol = UniformRandomPolicy(small_net)
    truth = ode_policy_value(small_net, lambda x, masks: np.full(len(masks), 1.0 / len(masks)), GAMMA)
    trajs = roll_batch(small_net, pol, 3000, RngStream(1))
    crit = LinearCritic(small_net.m, 3, small_net.T)
    pe = td0_pe(trajs, crit, pol, GAMMA)
    got = crit.with_theta(pe.theta).value(0.0, small_net.c)
    assert abs(got - truth) / truth < 0.02


def test_td0_mc_cross_consistency_over_seeds(small_net):
    pol = UniformRandomPolicy(small_net)
    crit = LinearCritic(small_net.m, 3, small_net.T)
    jm, jt = [], []
    for seed in range(20):
        trajs = roll_batch(small_net, pol, 200, RngStream(100 + seed))
        jm.append(crit.with_theta(mc_pe(trajs, crit, pol, GAMMA).theta).value(0.0, small_net.c))
        jt.append(crit.with_theta(td0_pe(trajs, crit, pol, GAMMA).theta).value(0.0, small_net.c))
    jm, jt = np.array(jm), np.array(jt)
    se_mc = jm.std(ddof=1) / np.sqrt(len(jm))
    assert abs(jm.mean() - jt.mean()) <= 2.0 * se_mc + 2.0 * jt.std(ddof=1) / np.sqrt(len(jt))


def test_td0_raises_on_singular_system():
    # no jumps and a single state: almost everything is unidentified
    inst = entropy_only_instance()
    trajs = roll_batch(inst, UniformRandomPolicy(inst), 3, RngStream(2))
    with pytest.raises(SingularMatrixError) as err:
        td0_pe(trajs, LinearCritic(inst.m, 2, inst.T), ConstantEntropy(0.5), gamma=0.1)
    assert err.value.cond > 1e12 or not np.isfinite(err.value.cond)
    # ridge mode answers anyway
    pe = td0_pe(trajs, LinearCritic(inst.m, 2, inst.T), ConstantEntropy(0.5), gamma=0.1, ridge=1e-8)
    assert np.all(np.isfinite(pe.theta))


def test_pe_stability_with_batch_growth(small_net):
    pol = UniformRandomPolicy(small_net)
    crit = LinearCritic(small_net.m, 2, small_net.T)
    small, large = [], []
    for seed in range(20):
        small.append(crit.with_theta(mc_pe(roll_batch(small_net, pol, 50, RngStream(seed)), crit, pol, GAMMA).theta).value(0, small_net.c))
        large.append(crit.with_theta(mc_pe(roll_batch(small_net, pol, 500, RngStream(1000 + seed)), crit, pol, GAMMA).theta).value(0, small_net.c))
    small, large = np.array(small), np.array(large)
    se = np.sqrt(small.var(ddof=1) / 20 + large.var(ddof=1) / 20)
    assert abs(small.mean() - large.mean()) <= 3.0 * se


# ---------------------------------------------------------------------------
# neural-critic gradient PE


def test_mc_pe_gradient_step_zero_lr_keeps_params(small_net):
    pol = UniformRandomPolicy(small_net)
    trajs = roll_batch(small_net, pol, 10, RngStream(3))
    critic = MLPCritic.build(small_net.m, (6,), small_net.T, small_net.c, RngStream(4))
    adam = AdamState.for_params([a for Wb in critic.net.params for a in Wb])
    before = critic.net.to_flat()
    mc_pe_gradient_step(trajs, critic, pol, GAMMA, 0.0, adam)
    np.testing.assert_array_equal(critic.net.to_flat(), before)


def test_linear_net_critic_gradient_matches_quadratic_loss(small_net):
    # critic = single linear layer on the basis features reproduces the
    # closed-form quadratic loss gradient M theta - b
    pol = UniformRandomPolicy(small_net)
    trajs = roll_batch(small_net, pol, 20, RngStream(5))
    lin = LinearCritic(small_net.m, 2, small_net.T)
    rng = np.random.default_rng(0)
    theta = rng.normal(size=lin.W)

    class BasisCritic:
        def __init__(self):
            self.net = MLP([lin.W, 1], params=[(theta[:, None], np.zeros(1))])

        def value_batch(self, ts, X):
            return self.net.forward(lin.basis_batch(ts, X))[:, 0]

        def weighted_grad(self, ts, X, w):
            out, acts = self.net.forward_cached(lin.basis_batch(ts, X))
            return self.net.backward(acts, np.asarray(w)[:, None])

    crit = BasisCritic()
    loss, grads = mc_critic_loss_grads(trajs, crit, pol, GAMMA, order=8)
    flat = flatten_batch(trajs)
    M = lin.sum_D_bar(flat.t1, flat.t2, flat.x_int) / len(trajs)
    pe = mc_pe(trajs, lin, pol, GAMMA)
    bvec = M @ pe.theta  # normal equations: b = M theta*
    expect = M @ theta - bvec
    np.testing.assert_allclose(grads[0][0][:, 0], expect, rtol=1e-6, atol=1e-9)


def test_critic_gradient_steps_decrease_loss(small_net):
    pol = UniformRandomPolicy(small_net)
    trajs = roll_batch(small_net, pol, 20, RngStream(6))
    critic = MLPCritic.build(small_net.m, (8, 8), small_net.T, small_net.c, RngStream(7))
    adam = AdamState.for_params([a for Wb in critic.net.params for a in Wb])
    losses = [mc_pe_gradient_step(trajs, critic, pol, GAMMA, 3e-2, adam) for _ in range(100)]
    assert losses[-1] < losses[5] < losses[0]
    assert np.mean(losses[-10:]) < np.mean(losses[5:15])


# ---------------------------------------------------------------------------
# policy gradient


def test_policy_gradient_zero_when_nothing_to_learn():
    inst = zero_sales_instance()
    pol = LinearPairPolicy(inst, d=1, gamma=0.5)
    trajs = roll_batch(inst, pol, 10, RngStream(8))

    class ConstCritic:
        def value_batch(self, ts, X):
            return np.full(len(np.atleast_1d(ts)), 3.7)

    pg = policy_gradient(trajs, ConstCritic(), pol, gamma=0.0)
    np.testing.assert_allclose(pg.grad, 0.0, atol=1e-12)


def test_policy_gradient_score_shift_invariance(small_net):
    rng = np.random.default_rng(9)
    pol = LinearPairPolicy(small_net, d=2, gamma=0.5, phi=rng.normal(scale=0.2, size=(3, 3, 3)))
    trajs = roll_batch(small_net, pol, 20, RngStream(10))
    crit = LinearCritic(small_net.m, 2, small_net.T, theta=rng.normal(size=9))
    g1 = policy_gradient(trajs, crit, pol, gamma=0.3).grad
    pol._score_table = pol._score_table + 11.0  # constant score shift
    g2 = policy_gradient(trajs, crit, pol, gamma=0.3).grad
    np.testing.assert_allclose(g1, g2, atol=1e-10)


def test_policy_gradient_baseline_shift_cancels(small_net):
    # adding a constant to the critic leaves the jump-term expectation at zero
    rng = np.random.default_rng(11)
    pol = LinearPairPolicy(small_net, d=1, gamma=0.5, phi=rng.normal(scale=0.1, size=(3, 3, 2)))
    crit = LinearCritic(small_net.m, 1, small_net.T, theta=rng.normal(size=6))
    shifted = LinearCritic(small_net.m, 1, small_net.T, theta=crit.theta.copy())
    const = 13.0

    class Shifted:
        def value_batch(self, ts, X):
            return shifted.value_batch(ts, X) + const

    diffs = []
    for seed in range(40):
        trajs = roll_batch(small_net, pol, 50, RngStream(2000 + seed))
        g1 = policy_gradient(trajs, crit, pol, gamma=0.0).grad
        g2 = policy_gradient(trajs, Shifted(), pol, gamma=0.0).grad
        diffs.append((g2 - g1).ravel())
    diffs = np.asarray(diffs)
    mean = diffs.mean(axis=0)
    se = diffs.std(ddof=1, axis=0) / np.sqrt(len(diffs))
    assert np.all(np.abs(mean) <= 3.0 * se + 1e-12)


def test_policy_gradient_matches_fd_oracle_tiny_instance():
    # one product, capacity one: J(0, c; phi) from a dense value recursion
    choice = SegmentedMNL([Segment(1.0, (0,), (7.0,), 3.0)])
    inst = NetworkInstance([[1]], [1.0], [1], 2.0, Constant(1.0), choice)
    gamma = 0.05
    phi0 = 0.03

    def exact_values(phi, dt=1e-4):
        pi1 = 1.0 / (1.0 + np.exp(-phi / gamma))
        h = -(pi1 * np.log(pi1) + (1 - pi1) * np.log1p(-pi1))
        lam_p = 0.7
        K = int(round(inst.T / dt))
        vs = np.zeros(K + 1)
        for k in range(K - 1, -1, -1):
            vs[k] = vs[k + 1] + dt * (pi1 * lam_p * (1.0 - vs[k + 1]) + gamma * h)
        return vs

    h = 1e-4
    fd = (exact_values(phi0 + h)[0] - exact_values(phi0 - h)[0]) / (2 * h)
    vs = exact_values(phi0)

    class TabularCritic:
        def value_batch(self, ts, X):
            idx = np.clip(np.asarray(ts) / 1e-4, 0, len(vs) - 1)
            lo = np.floor(idx).astype(int)
            hi = np.minimum(lo + 1, len(vs) - 1)
            w = idx - lo
            vals = (1 - w) * vs[lo] + w * vs[hi]
            return np.where(np.atleast_2d(X)[:, 0] >= 1, vals, 0.0)

    pol = LinearPairPolicy(inst, d=0, gamma=gamma, phi=np.full((1, 1, 1), phi0))
    crit = TabularCritic()
    root = RngStream(77)
    chunk_means = []
    for cidx in range(30):
        trajs = roll_batch(inst, pol, 20000, root.split(cidx))
        chunk_means.append(float(policy_gradient(trajs, crit, pol, gamma).grad[0, 0, 0]))
    cm = np.array(chunk_means)
    se = cm.std(ddof=1) / np.sqrt(len(cm))
    assert abs(cm.mean() - fd) <= 3.0 * se


# ---------------------------------------------------------------------------
# martingale orthogonality on fresh data (TD residual check)


def test_martingale_orthogonality_residual(small_net):
    pol = UniformRandomPolicy(small_net)
    gamma = 0.05
    crit = LinearCritic(small_net.m, 2, small_net.T)
    train = roll_batch(small_net, pol, 2000, RngStream(30))
    theta = td0_pe(train, crit, pol, gamma).theta
    fitted = crit.with_theta(theta)

    free = np.tile(np.arange(crit.d + 1) >= 1, crit.m + 1)
    per_episode = []
    for seed in range(400):
        trajs = roll_batch(small_net, pol, 1, RngStream(5000 + seed))
        flat = flatten_batch(trajs)
        resid = crit.sum_F_bar(flat.t1, flat.t2, flat.x_int) @ theta
        if len(flat.j_tau):
            prev = crit.basis_batch(flat.j_tau, flat.j_xprev)
            post = crit.basis_batch(flat.j_tau, flat.j_xpost)
            resid = resid + prev.T @ ((post - prev) @ theta + flat.j_reward)
        nodes, wts = quad_nodes(flat.t1, flat.t2, 8)
        H = pol.entropy_batch(nodes.ravel(), np.repeat(flat.x_int, 8, axis=0)).reshape(nodes.shape)
        up = crit._upow(nodes)
        aug = crit._aug(flat.x_int)
        resid = resid + gamma * np.einsum("bq,bq,bi,bql->il", wts, H, aug, up).reshape(crit.W)
        per_episode.append(resid[free])
    per_episode = np.asarray(per_episode)
    mean = per_episode.mean(axis=0)
    se = per_episode.std(ddof=1, axis=0) / np.sqrt(len(per_episode))
    assert np.all(np.abs(mean) <= 3.0 * se + 1e-12)
    del fitted


# ---------------------------------------------------------------------------
# training orchestration


def test_train_zero_updates_returns_initial_policy(small_net):
    cfg = TrainConfig(episodes=5, batch_size=10, gamma=GAMMA, lr_phi=1e-5, degree=2, seed=0)
    res = train_actor_critic(small_net, cfg, "linear-pair")
    assert res.n_updates == 0
    np.testing.assert_array_equal(res.policy.phi, 0.0)
    assert len(res.curve) == 1  # final evaluation of the initial policy


def test_train_requires_seed(small_net):
    with pytest.raises(ValueError):
        TrainConfig(episodes=10, batch_size=10, gamma=GAMMA, lr_phi=1e-5, seed=None)


def test_train_smoke_all_parametrizations(small_net):
    for which in ("linear-pair", "linear-ro", "2-nns"):
        cfg = TrainConfig(
            episodes=200,
            batch_size=10,
            gamma=GAMMA,
            lr_phi=1e-4,
            lr_theta=3e-2,
            degree=2,
            seed=3,
            actor_hidden=(8,),
            critic_hidden=(8,),
        )
        res = train_actor_critic(small_net, cfg, which)
        assert res.n_updates == 20
        assert np.isfinite(res.curve[-1].avg_revenue)


def test_train_gamma_schedule_hook(small_net):
    seen = []

    def sched(u):
        seen.append(u)
        return GAMMA

    cfg = TrainConfig(episodes=50, batch_size=10, gamma=GAMMA, lr_phi=1e-5, degree=2, seed=0, gamma_schedule=sched)
    train_actor_critic(small_net, cfg, "linear-pair")
    assert seen == [0, 1, 2, 3, 4]


def test_train_divergence_aborts(small_net):
    cfg = TrainConfig(episodes=30, batch_size=10, gamma=GAMMA, lr_phi=float("nan"), degree=2, seed=0)
    with pytest.raises(TrainingDiverged):
        train_actor_critic(small_net, cfg, "linear-pair")


def test_train_smoke_large_toy_network():
    # scaled-down large-network shape (m=10, n=20): factorized policy path
    rng = np.random.default_rng(4)
    m, n = 10, 20
    A = np.zeros((m, n), dtype=int)
    A[np.arange(m), np.arange(m)] = 1  # first 10 products: one resource each
    for j in range(10, n):
        picks = rng.choice(m, size=2, replace=False)
        A[picks, j] = 1
    p = np.concatenate([rng.uniform(1, 3, size=10), rng.uniform(3, 6, size=10)])
    labels = np.repeat(np.arange(4), 5)
    segs = []
    for l in range(4):
        prods = tuple(int(j) for j in np.nonzero(labels == l)[0])
        segs.append(Segment(0.25, prods, tuple(rng.uniform(1, 5, size=len(prods))), 2.0))
    inst = NetworkInstance(A, p, np.full(m, 3), T=20.0, arrival=Constant(0.8), choice=SegmentedMNL(segs))

    from intensity_rl.baselines import evaluate, solve_cdlp, solve_dp
    from intensity_rl.policy import GreedyPolicy, UniformRandomPolicy

    uni = evaluate(inst, UniformRandomPolicy(inst), 300, RngStream(1))
    gre = evaluate(inst, GreedyPolicy(inst), 300, RngStream(2))
    assert gre.mean > uni.mean  # greedy dominates uniform here
    with pytest.raises(ValueError):
        solve_cdlp(inst)  # beyond the exhaustive column limit
    with pytest.raises(MemoryError):
        solve_dp(inst, 0.001)  # state space far beyond the budget

    cfg = TrainConfig(
        episodes=100,
        batch_size=10,
        gamma=1e-2,
        lr_phi=1e-3,
        lr_theta=1e-2,
        seed=5,
        actor_hidden=(16,),
        critic_hidden=(16,),
    )
    res = train_actor_critic(inst, cfg, "2-nns")
    assert res.n_updates == 10
    assert np.isfinite(res.curve[-1].avg_revenue)
