import numpy as np
import pytest

from intensity_rl.model import Constant, ValidationError
from intensity_rl.queueing import (
    QueueInstance,
    QueueMLPPolicy,
    QueueTrainConfig,
    QueueUniformRandomPolicy,
    ThresholdPolicy,
    best_threshold,
    episode_objective,
    evaluate_queue,
    roll_queue_batch,
    roll_queue_episode,
    solve_queue_dp,
    train_queue_actor_critic,
)
from intensity_rl.simulate import RngStream
from intensity_rl.value import quad_nodes


def simple_queue(C=3, T=4.0, K1=2.0, K2=0.5, K3=0.25, lam=1.0, mu=0.8):
    return QueueInstance(C, T, K1, K2, K3, Constant(lam), Constant(mu))


def test_validation():
    with pytest.raises(ValidationError):
        simple_queue(C=0)
    with pytest.raises(ValidationError):
        simple_queue(K1=-1.0)


def test_zero_arrival_rate_empty_trajectory(queue_inst):
    inst = simple_queue(lam=0.0, mu=0.0)
    traj = roll_queue_episode(inst, QueueUniformRandomPolicy(inst), RngStream(0))
    assert traj.n_jumps == 0
    assert episode_objective(traj, inst) == 0.0


def test_capacity_one_always_admit_no_service():
    inst = simple_queue(C=1, T=50.0, lam=1.0, mu=0.0)
    pol = ThresholdPolicy(inst, 1)  # admit iff x < 1
    traj = roll_queue_episode(inst, pol, RngStream(1))
    assert traj.admitted.sum() == 1  # exactly one admission, then full forever
    assert np.all(traj.states <= 1)


def test_episode_objective_hand_case():
    inst = simple_queue(C=2, T=4.0, K1=2.0, K2=0.5, K3=0.25)
    from intensity_rl.queueing import QueueTrajectory

    traj = QueueTrajectory(
        horizon=4.0,
        taus=np.array([1.0]),
        states=np.array([1]),
        rewards=np.array([2.0]),
        admitted=np.array([True]),
    )
    # K1 - K2 * 1 * (T - tau) - K3 * 1
    assert episode_objective(traj, inst) == pytest.approx(2.0 - 0.5 * 3.0 - 0.25)


def test_queue_bounds_and_holding_integral(queue_inst):
    pol = QueueUniformRandomPolicy(queue_inst)
    for traj in roll_queue_batch(queue_inst, pol, 50, RngStream(2)):
        assert np.all(traj.states >= 0) and np.all(traj.states <= queue_inst.capacity)
        assert np.all(np.diff(traj.taus) > 0)
        # exact piecewise-constant holding integral equals quadrature
        bounds = traj.interval_bounds()
        states = traj.interval_states()
        exact = float(states @ (bounds[:, 1] - bounds[:, 0]))
        nodes, wts = quad_nodes(bounds[:, 0], bounds[:, 1], 4)
        quad = float((wts * states[:, None]).sum())
        assert exact == pytest.approx(quad, rel=1e-12)


def test_roll_queue_batch_deterministic(queue_inst):
    pol = QueueUniformRandomPolicy(queue_inst)
    a = roll_queue_batch(queue_inst, pol, 4, RngStream(7))
    b = roll_queue_batch(queue_inst, pol, 4, RngStream(7))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.taus, y.taus)
        np.testing.assert_array_equal(x.states, y.states)
    objs = roll_queue_batch(queue_inst, pol, 4, RngStream(7), collect=False)
    np.testing.assert_allclose(objs, [episode_objective(t, queue_inst) for t in a], atol=1e-12)


def test_threshold_policy_against_discrete_oracle(queue_inst):
    # slot-based Bernoulli discretization as an independent simulator
    pol = ThresholdPolicy(queue_inst, queue_inst.capacity)
    rep = evaluate_queue(queue_inst, pol, 40000, RngStream(3))

    rng = np.random.default_rng(42)
    dt = 1e-4
    K = int(round(queue_inst.T / dt))
    grid = (np.arange(K) + 1) * dt
    p_arr = queue_inst.arrival.evaluate(grid) * dt
    p_svc = queue_inst.service.evaluate(grid) * dt
    objs = []
    pa_max, ps_max = p_arr.max(), p_svc.max()
    for _ in range(4000):
        # dominate by the max slot probability, then thin per slot
        n_arr = rng.binomial(K, pa_max)
        arr_slots = np.sort(rng.choice(K, size=n_arr, replace=False)) if n_arr else np.array([], dtype=int)
        arr_slots = arr_slots[rng.uniform(size=n_arr) < p_arr[arr_slots] / pa_max]
        n_svc = rng.binomial(K, ps_max)
        svc_slots = np.sort(rng.choice(K, size=n_svc, replace=False)) if n_svc else np.array([], dtype=int)
        svc_slots = svc_slots[rng.uniform(size=n_svc) < p_svc[svc_slots] / ps_max]
        events = sorted([(s, 1) for s in arr_slots] + [(s, -1) for s in svc_slots])
        x = 0
        obj = 0.0
        t_prev = 0.0
        for slot, kind in events:
            t = grid[slot]
            if kind == 1 and x < queue_inst.capacity:  # threshold C admits any room
                obj -= queue_inst.holding_cost * x * (t - t_prev)
                x += 1
                obj += queue_inst.admission_reward
                t_prev = t
            elif kind == -1 and x >= 1:
                obj -= queue_inst.holding_cost * x * (t - t_prev)
                x -= 1
                t_prev = t
        obj -= queue_inst.holding_cost * x * (queue_inst.T - t_prev) + queue_inst.terminal_penalty * x
        objs.append(obj)
    objs = np.asarray(objs)
    se = np.sqrt(objs.var(ddof=1) / len(objs) + (rep.ci99 / 2.576) ** 2)
    assert abs(objs.mean() - rep.mean) <= 3.0 * se


def test_queue_dp_trivial_cases():
    inst = simple_queue(K1=0.0)
    V = solve_queue_dp(inst, 0.01)
    assert V[0, 0] == pytest.approx(0.0, abs=1e-12)  # never admitting is optimal
    short = simple_queue(T=1e-6)
    V2 = solve_queue_dp(short, 1e-7)
    np.testing.assert_allclose(V2[0], -short.terminal_penalty * np.arange(short.capacity + 1), atol=1e-5)


def test_queue_dp_reference_value(queue_inst):
    V = solve_queue_dp(queue_inst, 0.001)
    assert V[0, 0] == pytest.approx(23.997, abs=0.01)


def test_best_threshold_single_candidate():
    inst = simple_queue(C=1)
    xbar, rep = best_threshold(inst, 500, RngStream(5))
    assert xbar == 1
    assert np.isfinite(rep.mean)


def test_best_threshold_zero_reward_stays_nonpositive():
    inst = simple_queue(K1=0.0)
    xbar, rep = best_threshold(inst, 2000, RngStream(6))
    assert rep.mean <= 1e-9


def test_trained_policy_rejects_at_capacity(queue_inst):
    pol = QueueMLPPolicy.build(queue_inst, (4,), gamma=1e-2, rng=RngStream(3))
    p = pol.admit_prob_batch(np.array([1.0, 5.0]), np.array([queue_inst.capacity, queue_inst.capacity]))
    np.testing.assert_array_equal(p, 0.0)
    assert pol.entropy(1.0, queue_inst.capacity) == 0.0


def test_queue_policy_grads_match_fd(queue_inst):
    pol = QueueMLPPolicy.build(queue_inst, (5,), gamma=0.4, rng=RngStream(8))
    pol.net.from_flat(np.random.default_rng(0).normal(scale=0.4, size=pol.net.n_params))
    rng = np.random.default_rng(9)

    def fd(fn, eps=1e-6):
        flat = pol.net.to_flat()
        out = np.zeros_like(flat)
        for i in range(len(flat)):
            for sign in (1, -1):
                probe = flat.copy()
                probe[i] += sign * eps
                pol.net.from_flat(probe)
                out[i] += sign * fn()
        pol.net.from_flat(flat)
        return out / (2 * eps)

    for _ in range(20):
        t = rng.uniform(0, queue_inst.T)
        x = int(rng.integers(0, queue_inst.capacity))
        g = pol.grad_log_prob_admit_weighted(np.array([t]), np.array([x]), np.array([1.0]))
        flat_g = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in g])
        ref = fd(lambda: pol.log_prob_admit(t, x))
        assert np.abs(flat_g - ref).max() <= 1e-5 * max(1.0, np.abs(ref).max())
        ge = pol.grad_entropy_weighted(np.array([t]), np.array([x]), np.array([1.0]))
        flat_ge = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in ge])
        refe = fd(lambda: pol.entropy(t, x))
        assert np.abs(flat_ge - refe).max() <= 1e-5 * max(1.0, np.abs(refe).max())


def test_degenerate_instance_learns_always_admit():
    # no holding or terminal costs: admitting is always strictly profitable
    inst = simple_queue(C=1, T=6.0, K1=2.0, K2=0.0, K3=0.0, lam=1.0, mu=1.0)
    cfg = QueueTrainConfig(episodes=4000, batch_size=50, gamma=1e-2, lr_phi=3e-3, lr_theta=3e-2, seed=0, actor_hidden=(4,), critic_hidden=(4,))
    res = train_queue_actor_critic(inst, cfg)
    probs = res.policy.admit_prob_batch(np.linspace(0.1, 5.9, 7), np.zeros(7, dtype=int))
    assert np.all(probs > 0.9)


def test_zero_learning_rates_keep_policy(queue_inst):
    cfg = QueueTrainConfig(episodes=200, batch_size=100, gamma=1e-3, lr_phi=0.0, lr_theta=0.0, seed=0, actor_hidden=(4,), critic_hidden=(4,))
    res = train_queue_actor_critic(queue_inst, cfg)
    fresh = QueueMLPPolicy.build(queue_inst, (4,), gamma=1e-3, rng=RngStream(0).split(2).split(0))
    np.testing.assert_array_equal(res.policy.net.to_flat(), fresh.net.to_flat())
