#!/usr/bin/env python3
"""
Test script for the learning module
GAE, PPO / entropy / critic losses, causal-effect communication loss and update_step
"""

import math

import numpy as np
import numpy.testing as npt

from autodiff_core import Tensor, backward, gradient_check, no_grad
from comm_protocol import SAMPLE, CommDecision, make_buffers, run_comm_phase
from learning import (
    Hyperparams,
    Learner,
    RolloutBatch,
    TrainingAborted,
    causal_effect,
    causal_effects,
    comm_loss,
    comm_terms,
    compute_gae,
    critic_loss,
    entropy_loss,
    expected_causal_effect,
    gae_advantages,
    ppo_actor_loss,
    update_step,
)
from particle_env import COOPERATIVE_NAVIGATION, ScenarioConfig, global_state, reset
from tem_networks import ActorParams, CriticParams, NetworkCommPolicy, NetworkDims, action_distribution, actor_forward

DIMS = NetworkDims(d_h=4, d_model=4, d_ff=8, critic_hidden=8)
SCENARIO = ScenarioConfig(kind=COOPERATIVE_NAVIGATION, n_agents=4, n_targets=2, obs_radius=3.0)


def _actor(seed=0):
    return ActorParams.build(SCENARIO.obs_len, SCENARIO.k_neighbors, DIMS, seed=seed)


def _decisions(actor, seed):
    """Decisions from one real comm phase, with random hidden states"""
    rng = np.random.default_rng(seed)
    world = reset(SCENARIO, seed)
    hidden = rng.normal(size=(SCENARIO.n_agents, DIMS.d_h)) * 0.5
    buffers = make_buffers(SCENARIO.n_agents, SCENARIO.obs_len)
    _, decisions, _ = run_comm_phase(world, NetworkCommPolicy(actor), buffers, SAMPLE, rng, hidden=hidden)
    return decisions


def _manual_decision(payload, neighbor_buffers, neighbor_ids, rng):
    k = SCENARIO.k_neighbors
    return CommDecision(
        sender=0, round=0, choice=0, target=None,
        dist_params=np.full(k + 1, 1.0 / (k + 1)),
        sender_obs=rng.normal(size=SCENARIO.obs_len),
        sender_buffer=np.zeros((0, SCENARIO.obs_len)),
        payload=payload,
        neighbor_ids=np.array(neighbor_ids),
        neighbor_obs=rng.normal(size=(k, SCENARIO.obs_len)),
        neighbor_buffers=neighbor_buffers,
        neighbor_hidden=rng.normal(size=(k, DIMS.d_h)),
    )


# Advantage estimation

def _naive_gae(rewards, values, dones, bootstrap, gamma, lam):
    T = len(rewards)
    adv = [0.0] * T
    for t in range(T):
        total = 0.0
        discount = 1.0
        for u in range(t, T):
            next_value = bootstrap if u == T - 1 else values[u + 1]
            delta = rewards[u] + gamma * next_value * (0.0 if dones[u] else 1.0) - values[u]
            total += discount * delta
            if dones[u]:
                break
            discount *= gamma * lam
        adv[t] = total
    return np.array(adv)


def test_gae_examples():
    adv, ret = compute_gae(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros(4, dtype=bool), np.zeros(2), 0.99, 0.95)
    npt.assert_array_equal(adv, 0.0)
    adv, ret = compute_gae(np.array([1.0]), np.array([0.0]), np.array([False]), 0.0, 1.0, 1.0)
    assert adv[0] == 1.0 and ret[0] == 1.0


def test_gae_matches_naive_oracle():
    rng = np.random.default_rng(5)
    for _ in range(150):
        T = int(rng.integers(1, 9))
        rewards, values = rng.normal(size=T), rng.normal(size=T)
        dones = rng.random(T) < 0.2
        bootstrap = float(rng.normal())
        gamma, lam = float(rng.uniform(0.8, 1.0)), float(rng.uniform(0.5, 1.0))
        adv, ret = compute_gae(rewards, values, dones, bootstrap, gamma, lam)
        npt.assert_allclose(adv, _naive_gae(rewards, values, dones, bootstrap, gamma, lam), rtol=1e-12, atol=1e-12)
        npt.assert_allclose(ret, adv + values)


def test_gae_normalizes_per_batch():
    rng = np.random.default_rng(6)
    batch = RolloutBatch(5, 2, 3, SCENARIO.obs_len, DIMS.d_h, SCENARIO.state_dim)
    batch.rewards = rng.normal(size=batch.rewards.shape)
    batch.values = rng.normal(size=batch.values.shape)
    adv, ret = gae_advantages(batch, 0.99, 0.95)
    assert abs(adv.mean()) < 1e-12 and abs(adv.std() - 1.0) < 1e-6
    assert batch.advantages is adv and batch.returns is ret


# Surrogate, entropy and critic losses

def test_ppo_clip_examples():
    adv = np.array([0.5, -1.0, 2.0])
    same = ppo_actor_loss(np.log([0.2, 0.3, 0.5]), Tensor(np.log([0.2, 0.3, 0.5])), adv, 0.2)
    assert math.isclose(same.item(), adv.mean())
    up = ppo_actor_loss(np.zeros(1), Tensor([math.log(2.0)]), np.array([1.0]), 0.2)
    assert math.isclose(up.item(), 1.2)
    down = ppo_actor_loss(np.zeros(1), Tensor([math.log(0.5)]), np.array([-1.0]), 0.2)
    assert math.isclose(down.item(), -0.8)


def test_entropy_examples():
    assert math.isclose(entropy_loss(Tensor(np.full((2, 5), 0.2))).item(), math.log(5))
    assert entropy_loss(Tensor(np.eye(5))).item() == 0.0
    rng = np.random.default_rng(8)
    assert entropy_loss(Tensor(rng.dirichlet(np.ones(5), size=50))).item() <= math.log(5) + 1e-12


def test_critic_loss_examples():
    assert critic_loss(Tensor([1.0]), np.array([1.0]), np.array([1.0]), 0.2).item() == 0.0
    assert math.isclose(critic_loss(Tensor([0.5]), np.array([0.0]), np.array([0.0]), 0.2).item(), 0.25)
    assert math.isclose(critic_loss(Tensor([0.1]), np.array([0.0]), np.array([1.0]), 0.2).item(), 0.81)


# Causal effect

def test_causal_effects_nonnegative():
    actor = _actor()
    values = []
    for seed in range(100):
        values.append(causal_effects(_decisions(actor, seed), actor).reshape(-1))
    values = np.concatenate(values)
    assert len(values) >= 1000
    assert np.all(values >= 0.0)
    assert np.any(values > 0.0)


def test_causal_effect_zero_when_buffer_unchanged():
    rng = np.random.default_rng(9)
    actor = _actor()
    x = rng.normal(size=SCENARIO.obs_len)
    decision = _manual_decision(np.stack([x]), [np.stack([x])] * 3, [1, 2, 3], rng)
    assert causal_effect(decision, 0, actor, capacity=1) == 0.0


def _naive_kl(p, q):
    return sum(pi * math.log(pi / max(qi, 1e-10)) for pi, qi in zip(p, q) if pi > 0)


def test_causal_effect_matches_naive_recomputation():
    actor = _actor(1)
    decisions = _decisions(actor, 42)[:4]
    batched = causal_effects(decisions, actor)
    for d_index, decision in enumerate(decisions):
        for slot, j in enumerate(decision.neighbor_ids):
            if j < 0:
                assert batched[d_index, slot] == 0.0
                continue
            base = decision.neighbor_buffers[slot]
            with_msg = np.concatenate([base, decision.payload])[-8:]
            with no_grad():
                p1 = action_distribution(actor, decision.neighbor_obs[slot:slot + 1], [with_msg],
                                         decision.neighbor_hidden[slot:slot + 1]).data[0]
                p0 = action_distribution(actor, decision.neighbor_obs[slot:slot + 1], [base],
                                         decision.neighbor_hidden[slot:slot + 1]).data[0]
            assert math.isclose(batched[d_index, slot], max(_naive_kl(p1, p0), 0.0), rel_tol=1e-6, abs_tol=1e-14)


def test_expected_effect_examples():
    rng = np.random.default_rng(10)
    actor = _actor()
    lonely = _manual_decision(np.zeros((1, SCENARIO.obs_len)), [np.zeros((0, SCENARIO.obs_len))] * 3,
                              [-1, -1, -1], rng)
    assert expected_causal_effect(lonely, actor).item() == 0.0

    # no-send logit pushed to -inf, two valid neighbors with equal logits
    actor["msg.comm.w2"].data[:] = 0.0
    actor["msg.comm.b2"].data[:] = [-1000.0, 0.0, 0.0, 0.0]
    pair = _manual_decision(np.zeros((1, SCENARIO.obs_len)), [np.zeros((0, SCENARIO.obs_len))] * 3,
                            [1, 2, -1], rng)
    value = expected_causal_effect(pair, actor, gammas=np.array([0.2, 0.6, 0.0])).item()
    assert math.isclose(value, 0.4, rel_tol=1e-12)


def test_expected_effect_gradient_with_fixed_gamma():
    actor = _actor(2)
    rng = np.random.default_rng(11)
    worst = 0.0
    for decision in _decisions(actor, 7)[:3]:
        gammas = rng.uniform(0.0, 1.0, size=SCENARIO.k_neighbors) * decision.valid_mask
        head = [actor[name] for name in ("msg.comm.w1", "msg.comm.b1", "msg.comm.w2", "msg.comm.b2")]
        worst = max(worst, gradient_check(lambda: expected_causal_effect(decision, actor, gammas=gammas), head))
    assert worst < 1e-4, f"relative error {worst:.2e}"


def test_comm_loss_examples():
    rng = np.random.default_rng(12)
    actor = _actor()
    assert comm_loss([], actor, 0.1).item() == 0.0

    lonely = _manual_decision(np.zeros((1, SCENARIO.obs_len)), [np.zeros((0, SCENARIO.obs_len))] * 3,
                              [-1, -1, -1], rng)
    assert math.isclose(comm_loss([lonely], actor, 0.1).item(), 0.1)

    decisions = _decisions(actor, 3)
    gammas = causal_effects(decisions, actor)
    expected, _ = comm_terms(decisions, actor, gammas)
    assert math.isclose(comm_loss(decisions, actor, 0.0, gammas=gammas).item(), float(expected.data.mean()))
    assert comm_loss(decisions, actor, 0.1).item() >= 0.0


def test_batched_expected_effect_equals_per_decision_loop():
    actor = _actor(3)
    decisions = _decisions(actor, 13)
    gammas = causal_effects(decisions, actor)
    expected, _ = comm_terms(decisions, actor, gammas)
    loop = [expected_causal_effect(d, actor, gammas=gammas[i]).item() for i, d in enumerate(decisions)]
    # batched and single-row matmuls may round differently in the last bits
    npt.assert_allclose(expected.data, loop, rtol=0, atol=1e-12)


def test_comm_loss_gradient_only_reaches_message_network():
    actor = _actor(4)
    decisions = _decisions(actor, 21)
    backward(comm_loss(decisions, actor, 0.1))
    for name, tensor in actor.items():
        if name.startswith("act."):
            assert tensor.grad is None or not np.any(tensor.grad), name
    assert np.any(actor["msg.comm.w2"].grad)


# Update step

def _batch(actor, critic, seed, steps=3):
    rng = np.random.default_rng(seed)
    n, capacity = SCENARIO.n_agents, 8
    batch = RolloutBatch(steps, 1, n, SCENARIO.obs_len, DIMS.d_h, SCENARIO.state_dim, capacity)
    world = reset(SCENARIO, seed)
    for t in range(steps):
        obs = rng.normal(size=(n, SCENARIO.obs_len))
        buffers = [rng.normal(size=(int(rng.integers(0, 3)), SCENARIO.obs_len)) for _ in range(n)]
        hidden = rng.normal(size=(n, DIMS.d_h)) * 0.5
        with no_grad():
            probs = actor_forward(actor, obs, buffers, hidden, with_comm=False).action_probs.data
        actions = np.array([rng.choice(5, p=p) for p in probs])
        batch.add(t, 0, obs, buffers, hidden, actions, np.log(probs[np.arange(n), actions]), probs,
                  rng.normal(size=n), rng.normal(size=n), t == steps - 1, global_state(world))
        batch.decisions.extend(_decisions(actor, seed * 10 + t))
    return batch


def _models(seed=0):
    return _actor(seed), CriticParams.build(SCENARIO.state_dim, DIMS.critic_hidden, seed=seed + 1)


def test_hyperparams_validation():
    for bad in ({"gamma": 0.0}, {"gamma": 1.5}, {"clip_eps": 0.0}, {"epochs": 0}):
        try:
            Hyperparams(**bad)
        except ValueError as e:
            print(f"   Expected error: {e}")
        else:
            raise AssertionError(f"{bad} accepted")


def test_zero_learning_rate_keeps_parameters():
    actor, critic = _models()
    before = actor.state_arrays()
    critic_before = critic.state_arrays()
    hyper = Hyperparams(actor_lr=0.0, critic_lr=0.0, epochs=1, num_minibatch=1)
    _, _, report = update_step(_batch(actor, critic, 0), actor, critic, hyper, np.random.default_rng(0))
    for name, array in actor.state_arrays().items():
        npt.assert_array_equal(array, before[name])
    for name, array in critic.state_arrays().items():
        npt.assert_array_equal(array, critic_before[name])
    assert report.critic > 0.0 and report.entropy > 0.0
    expected_total = (report.actor_ppo + hyper.lambda_m * (report.comm_expected_effect + hyper.delta * report.comm_silence)
                      + hyper.lambda_e * report.entropy)
    assert math.isclose(report.total_actor, expected_total, rel_tol=1e-9, abs_tol=1e-12)


def test_update_is_deterministic():
    results = []
    for _ in range(2):
        actor, critic = _models()
        update_step(_batch(actor, critic, 1), actor, critic, Hyperparams(), np.random.default_rng(3))
        results.append((actor.state_arrays(), critic.state_arrays()))
    for first, second in zip(results[0], results[1]):
        for name in first:
            npt.assert_array_equal(first[name], second[name])


def test_comm_weight_ablation():
    deltas = {}
    for lambda_m in (0.0, 0.5):
        actor, critic = _models()
        before = actor["msg.comm.w2"].data.copy()
        hyper = Hyperparams(lambda_m=lambda_m, epochs=1, num_minibatch=1)
        update_step(_batch(actor, critic, 2), actor, critic, hyper, np.random.default_rng(0))
        deltas[lambda_m] = np.abs(actor["msg.comm.w2"].data - before).max()
    assert deltas[0.0] == 0.0
    assert deltas[0.5] > 0.0


def test_non_finite_loss_aborts():
    actor, critic = _models()
    batch = _batch(actor, critic, 4)
    critic["critic.w0"].data[0, 0] = np.nan
    learner = Learner(actor, critic, Hyperparams(epochs=1, num_minibatch=1))
    try:
        learner.update_step(batch, np.random.default_rng(0))
    except TrainingAborted as e:
        print(f"   Expected abort: {e}")
        assert e.diagnostics["iteration"] == 0
        assert "critic" in e.diagnostics
    else:
        raise AssertionError("NaN critic did not abort")


def test_critic_abort_leaves_actor_untouched():
    actor, critic = _models()
    batch = _batch(actor, critic, 4)
    critic["critic.w0"].data[0, 0] = np.nan
    before = actor.state_arrays()
    learner = Learner(actor, critic, Hyperparams(epochs=1, num_minibatch=1))
    try:
        learner.update_step(batch, np.random.default_rng(0))
    except TrainingAborted:
        pass
    else:
        raise AssertionError("NaN critic did not abort")
    for name, array in actor.state_arrays().items():
        npt.assert_array_equal(array, before[name])
    assert learner.actor_opt.t == 0 and learner.critic_opt.t == 0


if __name__ == "__main__":
    print("=" * 60)
    print("Learning Test")
    print("=" * 60)
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith("test_") and callable(fn)]
    for index, (name, fn) in enumerate(tests, start=1):
        print(f"\n{index}. {name}...")
        fn()
        print("   OK")
    print("\n" + "=" * 60)
    print("Learning Test Complete")
    print("=" * 60)
