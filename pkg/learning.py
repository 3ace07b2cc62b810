#!/usr/bin/env python3
"""
Learning Module
Rollout storage, GAE, and the training losses:
- PPO clipped surrogate for the action network
- causal-effect communication loss for the message network
- entropy bonus and clipped-value critic regression
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from autodiff_core import (
    Adam,
    Tensor,
    backward,
    categorical_entropy,
    clip,
    clip_grad_norm,
    exp,
    gather,
    kl_categorical,
    maximum,
    mean,
    minimum,
    no_grad,
    stop_gradient,
    tensor_sum,
)
from comm_protocol import DEFAULT_BUFFER_CAPACITY, CommDecision, append_fifo
from particle_env import NUM_ACTIONS
from tem_networks import (
    ActorParams,
    CriticParams,
    action_distribution,
    actor_forward,
    comm_distribution,
    critic_value,
    log_prob_of,
)

logger = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised when a loss or parameter turns non-finite"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class Hyperparams:
    """PPO / communication-loss hyperparameters"""
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    lambda_m: float = 0.01
    lambda_e: float = 0.01
    delta: float = 0.1
    actor_lr: float = 7e-4
    critic_lr: float = 7e-4
    epochs: int = 5
    num_minibatch: int = 2
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.clip_eps <= 0:
            raise ValueError(f"clip_eps must be > 0, got {self.clip_eps}")
        if self.epochs < 1 or self.num_minibatch < 1:
            raise ValueError("epochs and num_minibatch must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class LossReport:
    """Loss values in maximize convention (critic: minimize)"""
    actor_ppo: float = 0.0
    comm_expected_effect: float = 0.0
    comm_silence: float = 0.0
    entropy: float = 0.0
    critic: float = 0.0
    total_actor: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class RolloutBatch:
    """Time-major trajectory storage: index order is (step, env, agent)"""

    def __init__(self, n_steps: int, n_envs: int, n_agents: int, obs_len: int,
                 d_h: int, state_dim: int, capacity: int = DEFAULT_BUFFER_CAPACITY):
        T, E, N = n_steps, n_envs, n_agents
        self.n_steps, self.n_envs, self.n_agents = T, E, N
        self.capacity = capacity
        self.obs = np.zeros((T, E, N, obs_len))
        self.buffers = np.zeros((T, E, N, capacity, obs_len))
        self.buffer_lengths = np.zeros((T, E, N), dtype=np.int64)
        self.hidden = np.zeros((T, E, N, d_h))
        self.actions = np.zeros((T, E, N), dtype=np.int64)
        self.log_probs = np.zeros((T, E, N))
        self.action_dists = np.zeros((T, E, N, NUM_ACTIONS))
        self.rewards = np.zeros((T, E, N))
        self.values = np.zeros((T, E, N))
        self.dones = np.zeros((T, E), dtype=bool)
        self.states = np.zeros((T, E, state_dim))
        self.bootstrap_values = np.zeros((E, N))
        self.decisions: List[CommDecision] = []
        self.advantages: Optional[np.ndarray] = None
        self.returns: Optional[np.ndarray] = None

    def add(self, t: int, e: int, obs: np.ndarray, buffers: Sequence[np.ndarray], hidden: np.ndarray,
            actions: np.ndarray, log_probs: np.ndarray, action_dists: np.ndarray,
            rewards: np.ndarray, values: np.ndarray, done: bool, state: np.ndarray):
        self.obs[t, e] = obs
        for i, rows in enumerate(buffers):
            self.buffer_lengths[t, e, i] = len(rows)
            if len(rows):
                self.buffers[t, e, i, :len(rows)] = rows
        self.hidden[t, e] = hidden
        self.actions[t, e] = actions
        self.log_probs[t, e] = log_probs
        self.action_dists[t, e] = action_dists
        self.rewards[t, e] = rewards
        self.values[t, e] = values
        self.dones[t, e] = done
        self.states[t, e] = state

    @property
    def sample_count(self) -> int:
        return self.n_steps * self.n_envs * self.n_agents

    def flat(self, name: str) -> np.ndarray:
        array = getattr(self, name)
        return array.reshape((self.sample_count,) + array.shape[3:])

    def flat_states(self) -> np.ndarray:
        repeated = np.repeat(self.states[:, :, None, :], self.n_agents, axis=2)
        return repeated.reshape(self.sample_count, -1)

    def buffer_rows(self, flat_index: np.ndarray) -> List[np.ndarray]:
        buffers = self.flat("buffers")
        lengths = self.flat("buffer_lengths")
        return [buffers[i, :lengths[i]] for i in flat_index]


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                bootstrap: np.ndarray, gamma: float, gae_lambda: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Backward GAE recursion over axis 0
    delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t
    A_t = delta_t + gamma * lambda * (1 - done_t) * A_{t+1}
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    not_done = 1.0 - np.asarray(dones, dtype=np.float64)
    while not_done.ndim < rewards.ndim:
        not_done = not_done[..., None]
    advantages = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    for t in reversed(range(len(rewards))):
        next_value = bootstrap if t == len(rewards) - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_value * not_done[t] - values[t]
        running = delta + gamma * gae_lambda * not_done[t] * running
        advantages[t] = running
    return advantages, advantages + values


def gae_advantages(batch: RolloutBatch, gamma: float, gae_lambda: float,
                   normalize: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    advantages, returns = compute_gae(batch.rewards, batch.values, batch.dones,
                                      batch.bootstrap_values, gamma, gae_lambda)
    if normalize:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    batch.advantages, batch.returns = advantages, returns
    return advantages, returns


def ppo_actor_loss(old_log_probs: np.ndarray, new_log_probs: Tensor, advantages: np.ndarray,
                   clip_eps: float) -> Tensor:
    """Mean clipped surrogate (to maximize)"""
    ratio = exp(new_log_probs - Tensor(old_log_probs))
    adv = Tensor(advantages)
    surrogate = minimum(ratio * adv, clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)
    return mean(surrogate)


def entropy_loss(action_dists: Tensor) -> Tensor:
    """Mean Shannon entropy of the action distributions (to maximize)"""
    return mean(categorical_entropy(action_dists))


def critic_loss(values: Tensor, old_values: np.ndarray, returns: np.ndarray, clip_eps: float) -> Tensor:
    """Mean of max[(V - R)^2, (clip(V, V_old - eps, V_old + eps) - R)^2] (to minimize)"""
    target = Tensor(returns)
    clipped = clip(values, old_values - clip_eps, old_values + clip_eps)
    unclipped_err = values - target
    clipped_err = clipped - target
    return mean(maximum(unclipped_err * unclipped_err, clipped_err * clipped_err))


def causal_effects(decisions: Sequence[CommDecision], params: ActorParams,
                   capacity: int = DEFAULT_BUFFER_CAPACITY) -> np.ndarray:
    """
    Gamma_j for every neighbor slot of every decision, shape (D, k)
    KL(P(a_j | o_j, <m_b_j, payload>) || P(a_j | o_j, m_b_j)); empty slots are 0
    """
    k = params.k_neighbors
    gammas = np.zeros((len(decisions), k))
    rows: List[Tuple[int, int]] = []
    obs, hidden, with_msg, without_msg = [], [], [], []
    for d_index, decision in enumerate(decisions):
        for slot in range(k):
            if decision.neighbor_ids[slot] < 0:
                continue
            rows.append((d_index, slot))
            obs.append(decision.neighbor_obs[slot])
            hidden.append(decision.neighbor_hidden[slot])
            base = decision.neighbor_buffers[slot]
            without_msg.append(base)
            with_msg.append(append_fifo(base, decision.payload, capacity))
    if not rows:
        return gammas
    with no_grad():
        obs_arr, hidden_arr = np.stack(obs), np.stack(hidden)
        p_with = action_distribution(params, obs_arr, with_msg, hidden_arr)
        p_without = action_distribution(params, obs_arr, without_msg, hidden_arr)
        effects = kl_categorical(p_with, p_without).data
    for (d_index, slot), value in zip(rows, effects):
        gammas[d_index, slot] = max(float(value), 0.0)
    return gammas


def causal_effect(decision: CommDecision, slot: int, params: ActorParams,
                  capacity: int = DEFAULT_BUFFER_CAPACITY) -> float:
    """Gamma for one receiver slot of one decision"""
    return float(causal_effects([decision], params, capacity)[0, slot])


def _decision_inputs(decisions: Sequence[CommDecision]):
    obs = np.stack([d.sender_obs for d in decisions])
    buffers = [d.sender_buffer for d in decisions]
    valid = np.stack([d.valid_mask for d in decisions])
    return obs, buffers, valid


def comm_terms(decisions: Sequence[CommDecision], params: ActorParams,
               gammas: np.ndarray) -> Tuple[Tensor, Tensor]:
    """(E Gamma per decision, P(no-send) per decision); gradient flows through P only"""
    obs, buffers, valid = _decision_inputs(decisions)
    probs = comm_distribution(params, obs, buffers, valid)
    fixed = stop_gradient(Tensor(gammas))
    expected = tensor_sum(gather(probs, (slice(None), slice(1, None))) * fixed, axis=-1)
    silence = gather(probs, (slice(None), 0))
    return expected, silence


def expected_causal_effect(decision: CommDecision, params: ActorParams,
                           capacity: int = DEFAULT_BUFFER_CAPACITY,
                           gammas: Optional[np.ndarray] = None) -> Tensor:
    """Sum over neighbors of P(m_a = j) * stop_gradient(Gamma_j)"""
    if gammas is None:
        gammas = causal_effects([decision], params, capacity)[0]
    expected, _ = comm_terms([decision], params, np.asarray(gammas).reshape(1, -1))
    return expected[0]


def comm_loss(decisions: Sequence[CommDecision], params: ActorParams, delta: float,
              capacity: int = DEFAULT_BUFFER_CAPACITY,
              gammas: Optional[np.ndarray] = None) -> Tensor:
    """Mean over decisions of E Gamma + delta * P(no-send) (to maximize)"""
    if not decisions:
        return Tensor(0.0)
    if gammas is None:
        gammas = causal_effects(decisions, params, capacity)
    expected, silence = comm_terms(decisions, params, gammas)
    return mean(expected + silence * delta)


class Learner:
    """Owns the optimizers and applies PPO updates to shared actor + critic"""

    def __init__(self, actor: ActorParams, critic: CriticParams, hyper: Hyperparams,
                 capacity: int = DEFAULT_BUFFER_CAPACITY, comm_enabled: bool = True):
        self.actor = actor
        self.critic = critic
        self.hyper = hyper
        self.capacity = capacity
        self.comm_enabled = comm_enabled
        self.actor_opt = Adam(actor.tensors, lr=hyper.actor_lr)
        self.critic_opt = Adam(critic.tensors, lr=hyper.critic_lr)
        self.iteration = 0

    def _abort(self, message: str, report: LossReport, extra: Optional[Dict[str, Any]] = None):
        diagnostics = {"iteration": self.iteration, **report.to_dict(), **(extra or {})}
        logger.error(f"Training aborted: {message} {diagnostics}")
        raise TrainingAborted(message, diagnostics)

    def update_step(self, batch: RolloutBatch, rng: np.random.Generator) -> Tuple[ActorParams, CriticParams, LossReport]:
        hyper = self.hyper
        advantages, returns = gae_advantages(batch, hyper.gamma, hyper.gae_lambda)
        flat_adv = advantages.reshape(-1)
        flat_ret = returns.reshape(-1)
        obs = batch.flat("obs")
        hidden = batch.flat("hidden")
        actions = batch.flat("actions")
        old_log_probs = batch.flat("log_probs")
        old_values = batch.flat("values")
        states = batch.flat_states()
        decisions = batch.decisions if self.comm_enabled else []

        totals = LossReport()
        updates = 0
        for _ in range(hyper.epochs):
            sample_chunks = np.array_split(rng.permutation(batch.sample_count), hyper.num_minibatch)
            decision_chunks = np.array_split(rng.permutation(len(decisions)), hyper.num_minibatch)
            for idx, d_idx in zip(sample_chunks, decision_chunks):
                if len(idx) == 0:
                    continue
                report = LossReport()

                # actor
                output = actor_forward(self.actor, obs[idx], batch.buffer_rows(idx), hidden[idx], with_comm=False)
                new_log_probs = log_prob_of(output.action_probs, actions[idx])
                l_a = ppo_actor_loss(old_log_probs[idx], new_log_probs, flat_adv[idx], hyper.clip_eps)
                l_e = entropy_loss(output.action_probs)
                total = l_a + l_e * hyper.lambda_e
                if len(d_idx):
                    chunk = [decisions[i] for i in d_idx]
                    gammas = causal_effects(chunk, self.actor, self.capacity)
                    expected, silence = comm_terms(chunk, self.actor, gammas)
                    l_m = mean(expected + silence * hyper.delta)
                    total = total + l_m * hyper.lambda_m
                    report.comm_expected_effect = float(np.mean(expected.data))
                    report.comm_silence = float(np.mean(silence.data))
                report.actor_ppo = l_a.item()
                report.entropy = l_e.item()
                report.total_actor = total.item()

                # critic
                values = critic_value(states[idx], self.critic)
                l_c = critic_loss(values, old_values[idx], flat_ret[idx], hyper.clip_eps)
                report.critic = l_c.item()

                # both losses are checked before either optimizer moves
                if not np.isfinite(report.total_actor):
                    self._abort("non-finite actor loss", report)
                if not np.isfinite(report.critic):
                    self._abort("non-finite critic loss", report)

                self.actor.zero_grad()
                backward(-total)
                clip_grad_norm(self.actor.values(), hyper.max_grad_norm)
                self.actor_opt.step()

                self.critic.zero_grad()
                backward(l_c)
                clip_grad_norm(self.critic.values(), hyper.max_grad_norm)
                self.critic_opt.step()

                if not (self.actor.all_finite() and self.critic.all_finite()):
                    bad = [n for n, t in list(self.actor.items()) + list(self.critic.items())
                           if not np.all(np.isfinite(t.data))]
                    self._abort("non-finite parameters after update", report, {"tensors": bad})

                for name, value in report.to_dict().items():
                    setattr(totals, name, getattr(totals, name) + value)
                updates += 1

        if updates:
            for name, value in totals.to_dict().items():
                setattr(totals, name, value / updates)
        self.iteration += 1
        return self.actor, self.critic, totals


def update_step(batch: RolloutBatch, actor: ActorParams, critic: CriticParams, hyper: Hyperparams,
                rng: np.random.Generator, capacity: int = DEFAULT_BUFFER_CAPACITY,
                comm_enabled: bool = True) -> Tuple[ActorParams, CriticParams, LossReport]:
    """One-shot update with fresh optimizer state"""
    return Learner(actor, critic, hyper, capacity, comm_enabled).update_step(batch, rng)
