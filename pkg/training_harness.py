#!/usr/bin/env python3
"""
Training Harness
Rollout collection, PPO iterations and the experiment runners:
- train / evaluate / transfer_eval / finetune
- MAPPO (no comm), Full Communication and Randomly-stop Communication baselines
- random-policy reference, comparative run, silence-weight sweep
- metrics.csv / eval.csv / checkpoint.bin / run_config.txt per run directory
"""

import argparse
import csv
import dataclasses
import logging
import os
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import psutil

from autodiff_core import DimensionError, no_grad
from checkpoint_store import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from comm_protocol import (
    GREEDY,
    SAMPLE,
    ChainLog,
    ChainLogWriter,
    CommDecision,
    CommPolicy,
    CommRequest,
    MessageBuffer,
    begin_step,
    make_buffers,
    pick_choice,
    run_comm_phase,
)
from learning import Learner, LossReport, RolloutBatch, TrainingAborted
from metrics_report import PAPER_REFERENCE, summary_table
from particle_env import (
    NUM_ACTIONS,
    PREDATOR_PREY,
    ScenarioConfig,
    StepResult,
    TrajectoryRecorder,
    WorldState,
    global_state,
    observe_all,
    parse_scenario,
    reset,
    step,
)
from run_config import (
    ALGO_FC,
    ALGO_RC,
    ALGO_TEM,
    ALGORITHMS,
    CONFIG_FILENAME,
    RunConfig,
    load_config,
    save_config,
)
from tem_networks import ActorParams, CriticParams, HiddenState, NetworkCommPolicy, actor_forward, critic_value

# Configure logging
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger = logging.getLogger(__name__)

METRICS_FILENAME = "metrics.csv"
EVAL_FILENAME = "eval.csv"
CHECKPOINT_FILENAME = "checkpoint.bin"
MANIFEST_FILENAME = "actor_manifest.txt"

METRICS_COLUMNS = [
    "iteration", "env_steps", "mean_episode_reward", "capture_events", "collision_events",
    "occupied_landmarks", "comm_rate", "mean_chain_len", "actor_ppo_loss", "comm_effect",
    "comm_silence", "entropy", "critic_loss",
]
EVAL_COLUMNS = ["iteration", "env_steps", "R", "S", "C", "comm_rate", "mean_chain_len"]

# held-out seed range for training-time evaluation
EVAL_SEED_OFFSET = 1_000_003


class RuleCommPolicy:
    """
    Rule-based comm head replacing the learned decoder
    FC: always forward to a uniformly random valid neighbor that has not sent this step
    RC: stop with probability stop_prob, otherwise as FC
    """

    def __init__(self, algo: str, stop_prob: float = 0.5):
        if algo not in (ALGO_FC, ALGO_RC):
            raise ValueError(f"Rule policy needs FC or RC, got {algo}")
        self.algo = algo
        self.stop_prob = stop_prob if algo == ALGO_RC else 0.0

    def decide(self, request: CommRequest) -> Tuple[np.ndarray, np.ndarray]:
        rng = request.rng
        choices = np.zeros(len(request.agent_ids), dtype=np.int64)
        dists = []
        for idx, obs in enumerate(request.observations):
            ids = obs.neighbor_ids
            fresh = [slot for slot, j in enumerate(ids) if j >= 0 and not request.already_sent[j]]
            dist = np.zeros(len(ids) + 1)
            if not fresh:
                dist[0] = 1.0
            else:
                dist[0] = self.stop_prob
                dist[[s + 1 for s in fresh]] = (1.0 - self.stop_prob) / len(fresh)
                # the stop coin is only drawn when it can come up
                stopped = self.stop_prob > 0 and rng.random() < self.stop_prob
                if not stopped:
                    choices[idx] = fresh[int(rng.integers(len(fresh)))] + 1
            dists.append(dist)
        return choices, np.array(dists)


def baseline_comm_policy(algo: str, state: WorldState, buffers: List[MessageBuffer],
                         rng: np.random.Generator, stop_prob: float = 0.5,
                         mode: str = SAMPLE) -> Tuple[List[MessageBuffer], List[CommDecision], ChainLog]:
    """Run one comm phase with the FC/RC rule in place of the message-network decoder"""
    return run_comm_phase(state, RuleCommPolicy(algo, stop_prob), buffers, mode, rng, record_decisions=False)


def make_comm_policy(algo: str, actor: ActorParams, stop_prob: float = 0.5) -> Optional[CommPolicy]:
    if algo == ALGO_TEM:
        return NetworkCommPolicy(actor)
    if algo in (ALGO_FC, ALGO_RC):
        return RuleCommPolicy(algo, stop_prob)
    return None


@dataclass
class StepOutcome:
    obs: np.ndarray
    snapshots: List[np.ndarray]
    hidden_before: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    probs: np.ndarray
    decisions: List[CommDecision]
    chain_log: ChainLog
    world: WorldState
    result: StepResult


def policy_step(actor: ActorParams, world: WorldState, buffers: List[MessageBuffer], hidden: HiddenState,
                comm: Optional[CommPolicy], mode: str, rng: np.random.Generator,
                record_decisions: bool = False, env_index: int = 0) -> StepOutcome:
    """Communication stage then action stage for one environment step"""
    observations = observe_all(world)
    begin_step(buffers)
    decisions: List[CommDecision] = []
    chain_log = ChainLog()
    if comm is not None:
        buffers, decisions, chain_log = run_comm_phase(
            world, comm, buffers, mode, rng, hidden=hidden.h, observations=observations,
            record_decisions=record_decisions, env_index=env_index)
    obs = np.stack([o.vector for o in observations])
    snapshots = [b.snapshot() for b in buffers]
    hidden_before = hidden.h.copy()
    with no_grad():
        output = actor_forward(actor, obs, snapshots, hidden_before, with_comm=False)
    probs = output.action_probs.data
    actions = np.array([pick_choice(p, mode, rng) for p in probs], dtype=np.int64)
    log_probs = np.log(np.maximum(probs[np.arange(len(actions)), actions], 1e-10))
    hidden.h = output.hidden.data.copy()
    next_world, result = step(world, actions)
    return StepOutcome(obs, snapshots, hidden_before, actions, log_probs, probs,
                       decisions, chain_log, next_world, result)


@dataclass
class EpisodeStats:
    reward: float = 0.0
    captures: int = 0
    collisions: int = 0
    occupied: int = 0
    sends: int = 0
    agent_steps: int = 0

    def add(self, result: StepResult, chain_log: ChainLog):
        self.reward += float(np.mean(result.rewards))
        self.captures += result.capture_count
        self.collisions += result.collision_count
        self.occupied += result.occupied_count
        self.sends += chain_log.send_count
        self.agent_steps += len(result.rewards)


@dataclass
class EvalReport:
    """Greedy evaluation summary: R (episode reward), S (captures or occupations), C (collisions)"""
    scenario: str
    algo: str
    seed: int
    episodes: List[EpisodeStats] = field(default_factory=list)
    chain_histogram: Dict[int, int] = field(default_factory=dict)

    @property
    def is_predator_prey(self) -> bool:
        return self.scenario.startswith(PREDATOR_PREY)

    def _values(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.episodes], dtype=np.float64)

    @property
    def R(self) -> float:
        return float(self._values("reward").mean()) if self.episodes else 0.0

    @property
    def S(self) -> float:
        if not self.episodes:
            return 0.0
        return float(self._values("captures" if self.is_predator_prey else "occupied").mean())

    @property
    def C(self) -> float:
        return float(self._values("collisions").mean()) if self.episodes else 0.0

    def std(self, metric: str) -> float:
        return float(self._values(self._metric_field(metric)).std()) if self.episodes else 0.0

    def _metric_field(self, metric: str) -> str:
        return {"R": "reward", "S": "captures" if self.is_predator_prey else "occupied", "C": "collisions"}[metric]

    def total(self, metric: str) -> float:
        """Sum over every evaluation episode"""
        return float(self._values(self._metric_field(metric)).sum()) if self.episodes else 0.0

    @property
    def R_total(self) -> float:
        return self.total("R")

    @property
    def S_total(self) -> float:
        return self.total("S")

    @property
    def C_total(self) -> float:
        return self.total("C")

    @property
    def comm_rate(self) -> float:
        agent_steps = sum(e.agent_steps for e in self.episodes)
        return sum(e.sends for e in self.episodes) / agent_steps if agent_steps else 0.0

    @property
    def mean_chain_len(self) -> float:
        total = sum(self.chain_histogram.values())
        if not total:
            return 0.0
        return sum(depth * count for depth, count in self.chain_histogram.items()) / total

    def summary_row(self, name: Optional[str] = None) -> Dict[str, Any]:
        return {
            "name": name or self.algo,
            "scenario": self.scenario,
            "R": self.R, "R_std": self.std("R"),
            "S": self.S, "S_std": self.std("S"),
            "C": self.C, "C_std": self.std("C"),
            "R_total": self.R_total, "S_total": self.S_total, "C_total": self.C_total,
            "comm_rate": self.comm_rate,
            "mean_chain_len": self.mean_chain_len,
        }

    def to_dict(self) -> Dict[str, Any]:
        data = self.summary_row()
        data.update(seed=self.seed, episodes=[asdict(e) for e in self.episodes],
                    chain_histogram={str(k): v for k, v in sorted(self.chain_histogram.items())})
        return data


def evaluate_actor(actor: ActorParams, scenario: ScenarioConfig, n_episodes: int = 10, seed: int = 0,
                   algo: str = ALGO_TEM, stop_prob: float = 0.5, capacity: int = 8,
                   export_dir: Optional[str] = None) -> EvalReport:
    """Greedy episodes; episode i resets with seed + i"""
    comm = make_comm_policy(algo, actor, stop_prob)
    rng = np.random.default_rng(seed)
    report = EvalReport(scenario=scenario.label, algo=algo, seed=seed)
    histogram: Counter = Counter()
    trajectories = TrajectoryRecorder() if export_dir else None
    chains = ChainLogWriter() if export_dir else None

    for episode in range(n_episodes):
        world = reset(scenario, seed + episode)
        buffers = make_buffers(scenario.n_agents, scenario.obs_len, capacity)
        hidden = HiddenState(scenario.n_agents, actor.dims.d_h)
        stats = EpisodeStats()
        if trajectories is not None and episode == 0:
            trajectories.record(world)
        done = False
        while not done:
            outcome = policy_step(actor, world, buffers, hidden, comm, GREEDY, rng)
            stats.add(outcome.result, outcome.chain_log)
            histogram[outcome.chain_log.depth] += 1
            if chains is not None:
                chains.add(episode, world.step_index, outcome.chain_log)
            world = outcome.world
            if trajectories is not None and episode == 0:
                trajectories.record(world)
            done = outcome.result.done
        report.episodes.append(stats)
    report.chain_histogram = dict(histogram)

    if export_dir:
        os.makedirs(export_dir, exist_ok=True)
        tag = scenario.label.replace(":", "_")
        trajectories.export_csv(os.path.join(export_dir, f"trajectory_{tag}.csv"))
        chains.export_csv(os.path.join(export_dir, f"chains_{tag}.csv"))
    logger.info(f"Evaluated {algo} on {scenario.label}: R={report.R:.2f} S={report.S:.2f} "
                f"C={report.C:.2f} comm_rate={report.comm_rate:.3f}")
    return report


def random_policy_report(scenario: ScenarioConfig, n_episodes: int = 20, seed: int = 0) -> EvalReport:
    """Uniform random actions, no communication"""
    rng = np.random.default_rng(seed)
    report = EvalReport(scenario=scenario.label, algo="random", seed=seed)
    steps = 0
    for episode in range(n_episodes):
        world = reset(scenario, seed + episode)
        stats = EpisodeStats()
        done = False
        while not done:
            world, result = step(world, rng.integers(NUM_ACTIONS, size=scenario.n_agents))
            stats.add(result, ChainLog())
            steps += 1
            done = result.done
        report.episodes.append(stats)
    report.chain_histogram = {0: steps}
    return report


class RolloutWorker:
    """One environment with its own RNG stream; episodes may span iterations"""

    def __init__(self, env_index: int, scenario: ScenarioConfig, d_h: int, capacity: int,
                 rng: np.random.Generator):
        self.env_index = env_index
        self.scenario = scenario
        self.capacity = capacity
        self.rng = rng
        self.world: Optional[WorldState] = None
        self.buffers = make_buffers(scenario.n_agents, scenario.obs_len, capacity)
        self.hidden = HiddenState(scenario.n_agents, d_h)
        self.episode = EpisodeStats()
        self.finished: List[EpisodeStats] = []
        self.sends = 0
        self.chain_depths: List[int] = []

    def _start_episode(self):
        self.world = reset(self.scenario, int(self.rng.integers(2 ** 62)))
        self.hidden.reset()
        self.episode = EpisodeStats()

    def collect(self, actor: ActorParams, critic: CriticParams, comm: Optional[CommPolicy],
                batch: RolloutBatch, record_decisions: bool):
        for t in range(batch.n_steps):
            if self.world is None:
                self._start_episode()
            state_vec = global_state(self.world)
            with no_grad():
                value = critic_value(state_vec, critic).item()
            outcome = policy_step(actor, self.world, self.buffers, self.hidden, comm, SAMPLE, self.rng,
                                  record_decisions=record_decisions, env_index=self.env_index)
            batch.add(t, self.env_index, outcome.obs, outcome.snapshots, outcome.hidden_before,
                      outcome.actions, outcome.log_probs, outcome.probs, outcome.result.rewards,
                      np.full(self.scenario.n_agents, value), outcome.result.done, state_vec)
            batch.decisions.extend(outcome.decisions)
            self.episode.add(outcome.result, outcome.chain_log)
            self.sends += outcome.chain_log.send_count
            self.chain_depths.append(outcome.chain_log.depth)
            self.world = outcome.world
            if outcome.result.done:
                self.finished.append(self.episode)
                self.world = None

        if self.world is not None:
            with no_grad():
                batch.bootstrap_values[self.env_index] = critic_value(global_state(self.world), critic).item()

    def drain(self) -> Tuple[List[EpisodeStats], int, List[int]]:
        finished, sends, depths = self.finished, self.sends, self.chain_depths
        self.finished, self.sends, self.chain_depths = [], 0, []
        return finished, sends, depths


class TrainingHarness:
    """Drives PPO iterations for one RunConfig"""

    def __init__(self, config: RunConfig):
        self.config = config
        scenario = config.scenario
        self.actor = ActorParams.build(scenario.obs_len, scenario.k_neighbors, config.net, seed=config.seed)
        self.critic = CriticParams.build(scenario.state_dim, config.net.critic_hidden, seed=config.seed + 1)
        self.learner = Learner(self.actor, self.critic, config.hyper, config.buffer_capacity,
                               comm_enabled=config.learns_comm)
        streams = np.random.SeedSequence(config.seed).spawn(config.n_rollout_envs + 1)
        self.learner_rng = np.random.default_rng(streams[0])
        self.workers = [RolloutWorker(e, scenario, config.net.d_h, config.buffer_capacity,
                                      np.random.default_rng(streams[e + 1]))
                        for e in range(config.n_rollout_envs)]
        self.iteration = 0
        self.env_steps = 0
        self.last_report: Optional[LossReport] = None
        self.last_eval: Optional[EvalReport] = None
        self.last_row: Dict[str, Any] = {}
        self.is_running = False
        self.process = psutil.Process()
        self._last_episode_means = (float("nan"), float("nan"), float("nan"), float("nan"))

    @property
    def comm(self) -> Optional[CommPolicy]:
        if not self.config.comm_enabled:
            return None
        return make_comm_policy(self.config.algo, self.actor, self.config.rc_stop_prob)

    def collect_batch(self) -> Tuple[RolloutBatch, Dict[str, float]]:
        config = self.config
        scenario = config.scenario
        batch = RolloutBatch(config.rollout_length, config.n_rollout_envs, scenario.n_agents,
                             scenario.obs_len, config.net.d_h, scenario.state_dim, config.buffer_capacity)
        comm = self.comm
        finished: List[EpisodeStats] = []
        sends = 0
        depths: List[int] = []
        for worker in self.workers:
            worker.collect(self.actor, self.critic, comm, batch, record_decisions=config.learns_comm)
            w_finished, w_sends, w_depths = worker.drain()
            finished.extend(w_finished)
            sends += w_sends
            depths.extend(w_depths)

        if finished:
            self._last_episode_means = (
                float(np.mean([e.reward for e in finished])),
                float(np.mean([e.captures for e in finished])),
                float(np.mean([e.collisions for e in finished])),
                float(np.mean([e.occupied for e in finished])),
            )
        reward, captures, collisions, occupied = self._last_episode_means
        agent_steps = batch.sample_count
        stats = {
            "mean_episode_reward": reward,
            "capture_events": captures,
            "collision_events": collisions,
            "occupied_landmarks": occupied,
            "comm_rate": sends / agent_steps if agent_steps else 0.0,
            "mean_chain_len": float(np.mean(depths)) if depths else 0.0,
        }
        return batch, stats

    def run_iteration(self) -> Dict[str, Any]:
        batch, stats = self.collect_batch()
        try:
            _, _, report = self.learner.update_step(batch, self.learner_rng)
        except TrainingAborted as e:
            e.diagnostics.setdefault("iteration", self.iteration)
            logger.error(f"Iteration {self.iteration} aborted: {e}")
            raise
        self.iteration += 1
        self.env_steps += self.config.steps_per_iteration
        self.last_report = report
        row = {
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            **stats,
            "actor_ppo_loss": report.actor_ppo,
            "comm_effect": report.comm_expected_effect,
            "comm_silence": report.comm_silence,
            "entropy": report.entropy,
            "critic_loss": report.critic,
        }
        self.last_row = row
        rss_mb = self.process.memory_info().rss / (1024 * 1024)
        cpu = self.process.cpu_percent(interval=None)
        logger.info(f"iter {self.iteration} steps {self.env_steps} R={row['mean_episode_reward']:.2f} "
                    f"comm_rate={row['comm_rate']:.3f} critic={report.critic:.4f} "
                    f"[rss {rss_mb:.0f} MB, cpu {cpu:.0f}%]")
        return row

    def evaluate(self, n_episodes: Optional[int] = None, seed: Optional[int] = None) -> EvalReport:
        config = self.config
        report = evaluate_actor(self.actor, config.scenario,
                                n_episodes or config.eval_episodes,
                                config.seed + EVAL_SEED_OFFSET if seed is None else seed,
                                config.algo, config.rc_stop_prob, config.buffer_capacity)
        self.last_eval = report
        return report

    def checkpoint(self) -> Checkpoint:
        optimizer = {}
        optimizer.update(self.learner.actor_opt.state_tensors("opt.actor"))
        optimizer.update(self.learner.critic_opt.state_tensors("opt.critic"))
        rng_states = {"learner": self.learner_rng.bit_generator.state}
        for worker in self.workers:
            rng_states[f"worker{worker.env_index}"] = worker.rng.bit_generator.state
        return Checkpoint(config=self.config, actor=self.actor.state_arrays(),
                          critic=self.critic.state_arrays(), optimizer=optimizer,
                          rng_states=rng_states, env_steps=self.env_steps, iteration=self.iteration)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: Optional[RunConfig] = None) -> "TrainingHarness":
        """Harness that continues where `ckpt` stopped (config defaults to the checkpoint's own)"""
        harness = cls(config or ckpt.config)
        harness.restore(ckpt)
        return harness

    def restore(self, ckpt: Checkpoint):
        """Load parameters, optimizer moments, RNG streams and counters; rollout workers start fresh episodes"""
        expected = {"learner"} | {f"worker{w.env_index}" for w in self.workers}
        if set(ckpt.rng_states) != expected:
            raise CheckpointError(f"RNG streams {sorted(ckpt.rng_states)} do not match {sorted(expected)}")
        try:
            self.actor.load_arrays(ckpt.actor)
            self.critic.load_arrays(ckpt.critic)
            self.learner.actor_opt.load_state_tensors("opt.actor", ckpt.optimizer)
            self.learner.critic_opt.load_state_tensors("opt.critic", ckpt.optimizer)
        except DimensionError as e:
            raise CheckpointError(f"Checkpoint does not fit {self.config.scenario.label}: {e}")
        try:
            self.learner_rng.bit_generator.state = ckpt.rng_states["learner"]
            for worker in self.workers:
                worker.rng.bit_generator.state = ckpt.rng_states[f"worker{worker.env_index}"]
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"Invalid RNG state in checkpoint: {e}")
        self.iteration = self.learner.iteration = ckpt.iteration
        self.env_steps = ckpt.env_steps
        logger.info(f"Restored {self.config.algo} on {self.config.scenario.label} at iteration {self.iteration} "
                    f"({self.env_steps} env steps)")

    def train(self) -> Checkpoint:
        """Iterate until total_env_steps; writes the run directory"""
        config = self.config
        out_dir = config.out_dir
        os.makedirs(out_dir, exist_ok=True)
        save_config(config, os.path.join(out_dir, CONFIG_FILENAME))
        self.actor.export_manifest(os.path.join(out_dir, MANIFEST_FILENAME))
        logger.info(f"Training {config.algo} on {config.scenario.label} seed {config.seed}: "
                    f"{config.total_env_steps} env steps, {self.actor.parameter_count} actor parameters")

        self.is_running = True
        started = time.time()
        metrics_path = os.path.join(out_dir, METRICS_FILENAME)
        eval_path = os.path.join(out_dir, EVAL_FILENAME)
        # a restored run appends to the curves it already wrote
        append = self.iteration > 0 and os.path.exists(metrics_path) and os.path.exists(eval_path)
        mode = "a" if append else "w"
        try:
            with open(metrics_path, mode, newline="") as metrics_file, \
                    open(eval_path, mode, newline="") as eval_file:
                metrics = csv.DictWriter(metrics_file, fieldnames=METRICS_COLUMNS)
                evals = csv.writer(eval_file)
                if not append:
                    metrics.writeheader()
                    evals.writerow(EVAL_COLUMNS)
                while self.env_steps < config.total_env_steps:
                    metrics.writerow(self.run_iteration())
                    metrics_file.flush()
                    if self.iteration % config.eval_every == 0:
                        report = self.evaluate()
                        evals.writerow([self.iteration, self.env_steps, report.R, report.S, report.C,
                                        report.comm_rate, report.mean_chain_len])
                        eval_file.flush()
        finally:
            self.is_running = False

        ckpt = self.checkpoint()
        save_checkpoint(ckpt, os.path.join(out_dir, CHECKPOINT_FILENAME))
        logger.info(f"Training finished after {self.iteration} iterations in {time.time() - started:.1f}s")
        return ckpt

    def get_status(self) -> Dict[str, Any]:
        return {
            "running": self.is_running,
            "algo": self.config.algo,
            "scenario": self.config.scenario.label,
            "comm_enabled": self.config.comm_enabled,
            "learns_comm": self.config.learns_comm,
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "total_env_steps": self.config.total_env_steps,
            "last_losses": self.last_report.to_dict() if self.last_report else None,
            "last_eval": self.last_eval.summary_row() if self.last_eval else None,
            "actor_parameters": self.actor.parameter_count,
            "critic_parameters": self.critic.parameter_count,
        }


def train(config: RunConfig) -> Checkpoint:
    return TrainingHarness(config).train()


def resume(ckpt: Checkpoint, total_env_steps: Optional[int] = None, out_dir: Optional[str] = None) -> Checkpoint:
    """Continue a run from its checkpoint up to `total_env_steps`"""
    changes: Dict[str, Any] = {}
    if total_env_steps is not None:
        changes["total_env_steps"] = total_env_steps
    if out_dir:
        changes["out_dir"] = out_dir
    return TrainingHarness.from_checkpoint(ckpt, ckpt.config.replace(**changes)).train()


def actor_from_checkpoint(ckpt: Checkpoint, scenario: Optional[ScenarioConfig] = None) -> ActorParams:
    """Build an actor for `scenario` and load the checkpoint's actor tensors into it"""
    scenario = scenario or ckpt.config.scenario
    actor = ActorParams.build(scenario.obs_len, scenario.k_neighbors, ckpt.config.net)
    try:
        actor.load_arrays(ckpt.actor)
    except DimensionError as e:
        raise CheckpointError(f"Checkpoint actor does not fit {scenario.label}: {e}")
    return actor


def evaluate(ckpt: Checkpoint, scenario: Optional[ScenarioConfig] = None, n_episodes: int = 10,
             seed: int = 0, export_dir: Optional[str] = None) -> EvalReport:
    """Greedy evaluation of a checkpoint's actor; the critic is not used"""
    scenario = scenario or ckpt.config.scenario
    config = ckpt.config
    return evaluate_actor(actor_from_checkpoint(ckpt, scenario), scenario, n_episodes, seed,
                          config.algo, config.rc_stop_prob, config.buffer_capacity, export_dir)


def transfer_eval(ckpt: Checkpoint, target_scenarios: Sequence[ScenarioConfig], n_episodes: int = 10,
                  seed: int = 0, export_dir: Optional[str] = None) -> Dict[str, EvalReport]:
    """Zero-shot evaluation on other agent counts with the unchanged actor"""
    source = actor_from_checkpoint(ckpt)
    source_hash = source.manifest_hash()
    reports: Dict[str, EvalReport] = {}
    for scenario in target_scenarios:
        actor = actor_from_checkpoint(ckpt, scenario)
        before = actor.manifest_hash()
        if before != source_hash:
            raise RuntimeError(f"Actor manifest for {scenario.label} differs from the training scenario")
        config = ckpt.config
        reports[scenario.label] = evaluate_actor(actor, scenario, n_episodes, seed, config.algo,
                                                 config.rc_stop_prob, config.buffer_capacity, export_dir)
        if actor.manifest_hash() != before:
            raise RuntimeError(f"Actor parameters were reshaped while evaluating {scenario.label}")
        logger.info(f"Transfer {ckpt.config.scenario.label} -> {scenario.label}: manifest {before[:12]} unchanged")
    return reports


def finetune(ckpt: Checkpoint, scenario: ScenarioConfig, steps: int, out_dir: Optional[str] = None,
             seed: Optional[int] = None) -> Checkpoint:
    """Warm-start the actor on a new scenario; critic and optimizer state start fresh"""
    config = ckpt.config.replace(
        scenario=scenario,
        total_env_steps=steps,
        out_dir=out_dir or os.path.join(ckpt.config.out_dir, f"finetune_{scenario.label.replace(':', '_')}"),
        seed=ckpt.config.seed if seed is None else seed,
    )
    harness = TrainingHarness(config)
    harness.actor.load_arrays(actor_from_checkpoint(ckpt, scenario).state_arrays())
    return harness.train()


def compare(config: RunConfig, out_dir: str, algos: Sequence[str] = ALGORITHMS,
            n_episodes: Optional[int] = None) -> Dict[str, EvalReport]:
    """Train every algorithm with one seed on one scenario and tabulate R/S/C"""
    reports: Dict[str, EvalReport] = {}
    for algo in algos:
        run_config = config.replace(algo=algo, out_dir=os.path.join(out_dir, algo.lower()))
        harness = TrainingHarness(run_config)
        harness.train()
        reports[algo] = harness.evaluate(n_episodes=n_episodes)
    rows = [report.summary_row(algo) for algo, report in reports.items()]
    table = summary_table(rows, reference=PAPER_REFERENCE)
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as f:
        f.write(table)
    print(table)
    return reports


def final_comm_rate(out_dir: str, last_n: int = 5) -> float:
    """Mean comm_rate over the last iterations of a run's metrics.csv"""
    with open(os.path.join(out_dir, METRICS_FILENAME), newline="") as f:
        rates = [float(row["comm_rate"]) for row in csv.DictReader(f)]
    return float(np.mean(rates[-last_n:])) if rates else 0.0


def delta_sweep(config: RunConfig, out_dir: str, deltas: Tuple[float, float] = (0.0, 1.0),
                seeds: Sequence[int] = (0, 1, 2)) -> List[Dict[str, Any]]:
    """Pairs of TEM runs differing only in the silence weight"""
    low, high = deltas
    results = []
    for seed in seeds:
        rates = []
        for delta in (low, high):
            run_dir = os.path.join(out_dir, f"delta{delta:g}_seed{seed}")
            hyper = dataclasses.replace(config.hyper, delta=delta)
            TrainingHarness(config.replace(algo=ALGO_TEM, hyper=hyper, seed=seed, out_dir=run_dir)).train()
            rates.append(final_comm_rate(run_dir))
        results.append({"seed": seed, "comm_rate_low": rates[0], "comm_rate_high": rates[1],
                        "high_is_lower": rates[1] < rates[0]})
        logger.info(f"delta sweep seed {seed}: comm_rate {rates[0]:.3f} (delta={low}) vs {rates[1]:.3f} (delta={high})")
    return results


def learning_progress(config: RunConfig, n_episodes: int = 20) -> Dict[str, float]:
    """Trained greedy reward against the uniform random policy on the same seeds"""
    harness = TrainingHarness(config)
    harness.train()
    seed = config.seed + EVAL_SEED_OFFSET
    trained = harness.evaluate(n_episodes=n_episodes, seed=seed)
    baseline = random_policy_report(config.scenario, n_episodes, seed)
    improvement = (trained.R - baseline.R) / abs(baseline.R) if baseline.R else 0.0
    return {"random_R": baseline.R, "trained_R": trained.R, "improvement": improvement}


# Global harness instance
_harness: Optional[TrainingHarness] = None


def get_harness(config: Optional[RunConfig] = None) -> TrainingHarness:
    """Get global harness instance (created on first use)"""
    global _harness
    if _harness is None or config is not None:
        _harness = TrainingHarness(config or RunConfig())
    return _harness


def _print_report(report: EvalReport):
    print(summary_table([report.summary_row()]))
    hist = ", ".join(f"{depth}:{count}" for depth, count in sorted(report.chain_histogram.items()))
    print(f"Chain length histogram (rounds with deliveries per step): {hist}")


def main():
    """Main entry point for the training harness"""
    parser = argparse.ArgumentParser(description="Email-style communication for multi-agent PPO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train from a config file")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--seed", type=int, help="Override seed")
    p.add_argument("--out", help="Override output directory")

    p = sub.add_parser("resume", help="Continue training from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, help="New total env steps (default: the checkpoint's target)")
    p.add_argument("--out", help="Output directory (default: the checkpoint's run directory)")

    p = sub.add_parser("eval", help="Greedy evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", help="e.g. pp:7-3 (default: training scenario)")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--export", help="Directory for trajectory / chain CSVs")

    p = sub.add_parser("transfer", help="Zero-shot evaluation on other agent counts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenarios", required=True, help="Comma separated, e.g. pp:3-1,pp:9-3")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("finetune", help="Continue training a checkpoint on a new scenario")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("report", help="Render learning curves and summary for a run directory")
    p.add_argument("--dir", required=True)

    p = sub.add_parser("compare", help="TEM vs MAPPO vs FC vs RC on one scenario")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="Silence-weight sweep (delta low vs high)")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--deltas", default="0,1.0")
    p.add_argument("--seeds", default="0,1,2")

    p = sub.add_parser("random", help="Random-policy reference on a scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    args = parser.parse_args()

    try:
        if args.command in ("train", "compare"):
            overrides = {}
            if args.seed is not None:
                overrides["seed"] = args.seed
            if args.command == "train" and args.out:
                overrides["out_dir"] = args.out
            config = load_config(args.config, overrides)
            if args.command == "train":
                ckpt = train(config)
                print(f"Training complete: {ckpt.iteration} iterations, {ckpt.env_steps} env steps -> {config.out_dir}")
            else:
                compare(config, args.out)

        elif args.command == "resume":
            ckpt = resume(load_checkpoint(args.checkpoint), args.steps, args.out)
            print(f"Training resumed to {ckpt.iteration} iterations, {ckpt.env_steps} env steps")

        elif args.command == "eval":
            ckpt = load_checkpoint(args.checkpoint)
            scenario = parse_scenario(args.scenario, ckpt.config.scenario) if args.scenario else None
            _print_report(evaluate(ckpt, scenario, args.episodes, args.seed, args.export))

        elif args.command == "transfer":
            ckpt = load_checkpoint(args.checkpoint)
            targets = [parse_scenario(s, ckpt.config.scenario) for s in args.scenarios.split(",")]
            reports = transfer_eval(ckpt, targets, args.episodes, args.seed)
            print(summary_table([r.summary_row(label) for label, r in reports.items()]))

        elif args.command == "finetune":
            ckpt = load_checkpoint(args.checkpoint)
            scenario = parse_scenario(args.scenario, ckpt.config.scenario)
            result = finetune(ckpt, scenario, args.steps, args.out, args.seed)
            print(f"Finetune complete: {result.env_steps} env steps")

        elif args.command == "report":
            from metrics_report import report
            result = report(args.dir)
            print(result.table)

        elif args.command == "sweep":
            config = load_config(args.config)
            deltas = tuple(float(v) for v in args.deltas.split(","))
            seeds = [int(v) for v in args.seeds.split(",")]
            for row in delta_sweep(config, args.out, deltas, seeds):
                print(f"seed {row['seed']}: {row['comm_rate_low']:.3f} vs {row['comm_rate_high']:.3f} "
                      f"{'lower' if row['high_is_lower'] else 'NOT lower'}")

        elif args.command == "random":
            _print_report(random_policy_report(parse_scenario(args.scenario), args.episodes, args.seed))

    except Exception as e:
        print(f"Error: {str(e)}")
        logger.error(f"Command {args.command} failed: {str(e)}")
        return 1

    return 0


if __name__ == "__main__":
    exit(main())
