#!/usr/bin/env python3
"""
Communication Protocol Module
Email-style message chains between agents:
- per-agent FIFO message buffers, cleared at the start of every step
- round-based send/forward/stop decisions, one send per agent per step
- delivery log (ChainLog) with CSV export and replay
"""

import csv
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from particle_env import Observation, WorldState, observe_all

logger = logging.getLogger(__name__)

DEFAULT_BUFFER_CAPACITY = 8

SAMPLE = "sample"
GREEDY = "greedy"


class PayloadError(ValueError):
    """Raised when a message does not have observation length"""


@dataclass
class Message:
    """One chain element: an agent's observation vector"""
    payload: np.ndarray


class MessageBuffer:
    """Bounded FIFO queue of messages, oldest first"""

    def __init__(self, obs_len: int, capacity: int = DEFAULT_BUFFER_CAPACITY):
        if capacity < 1:
            raise ValueError(f"Buffer capacity must be >= 1, got {capacity}")
        self.obs_len = obs_len
        self.capacity = capacity
        self.queue: deque = deque(maxlen=capacity)

    def push(self, payload: np.ndarray):
        payload = np.asarray(payload, dtype=np.float64)
        if payload.shape != (self.obs_len,):
            raise PayloadError(f"Payload length {payload.shape} != observation length {self.obs_len}")
        self.queue.append(Message(payload.copy()))

    def clear(self):
        self.queue.clear()

    def snapshot(self) -> np.ndarray:
        """Copy of the contents as a (len, obs_len) array"""
        if not self.queue:
            return np.zeros((0, self.obs_len))
        return np.stack([m.payload for m in self.queue])

    def __len__(self) -> int:
        return len(self.queue)


def make_buffers(n_agents: int, obs_len: int, capacity: int = DEFAULT_BUFFER_CAPACITY) -> List[MessageBuffer]:
    return [MessageBuffer(obs_len, capacity) for _ in range(n_agents)]


def begin_step(buffers: List[MessageBuffer]) -> List[MessageBuffer]:
    for buffer in buffers:
        buffer.clear()
    return buffers


def compose_outgoing(sender_buffer: MessageBuffer, sender_obs: np.ndarray) -> List[np.ndarray]:
    """Buffer contents in FIFO order with the sender's own observation appended"""
    vector = sender_obs.vector if isinstance(sender_obs, Observation) else np.asarray(sender_obs)
    return [m.payload.copy() for m in sender_buffer.queue] + [np.array(vector, dtype=np.float64)]


def deliver(payloads: Sequence[np.ndarray], receiver_buffer: MessageBuffer) -> MessageBuffer:
    for payload in payloads:
        receiver_buffer.push(payload)
    return receiver_buffer


def append_fifo(buffer_rows: np.ndarray, payload_rows: np.ndarray, capacity: int) -> np.ndarray:
    """Array form of deliver(): push rows, keep the newest `capacity`"""
    merged = np.concatenate([buffer_rows, payload_rows], axis=0)
    return merged[-capacity:] if len(merged) > capacity else merged


@dataclass
class CommDecision:
    """One communication choice plus the snapshots needed to score it later"""
    sender: int
    round: int
    choice: int
    target: Optional[int]
    dist_params: np.ndarray
    sender_obs: np.ndarray
    sender_buffer: np.ndarray
    payload: np.ndarray
    neighbor_ids: np.ndarray
    neighbor_obs: np.ndarray
    neighbor_buffers: List[np.ndarray]
    neighbor_hidden: np.ndarray
    env_index: int = 0
    step_index: int = 0

    @property
    def valid_mask(self) -> np.ndarray:
        return self.neighbor_ids >= 0


@dataclass
class DeliveryRecord:
    round: int
    sender: int
    target: int


@dataclass
class ChainLog:
    """Ordered deliveries for one environment step"""
    records: List[DeliveryRecord] = field(default_factory=list)

    def add(self, round_index: int, sender: int, target: int):
        if self.records and round_index < self.records[-1].round:
            raise ValueError(f"Round {round_index} logged after round {self.records[-1].round}")
        self.records.append(DeliveryRecord(round_index, sender, target))

    def senders(self) -> List[int]:
        return [r.sender for r in self.records]

    @property
    def send_count(self) -> int:
        return len(self.records)

    @property
    def depth(self) -> int:
        """Number of rounds that produced at least one delivery"""
        return len({r.round for r in self.records})

    def to_rows(self, episode: int, step: int) -> List[List[int]]:
        return [[episode, step, r.round, r.sender, r.target] for r in self.records]

    def to_dict(self) -> Dict[str, Any]:
        return {"records": [asdict(r) for r in self.records]}


class ChainLogWriter:
    """Accumulates ChainLogs of an evaluation for CSV export"""

    COLUMNS = ["episode", "step", "round", "sender", "target"]

    def __init__(self):
        self.rows: List[List[int]] = []

    def add(self, episode: int, step: int, chain_log: ChainLog):
        self.rows.extend(chain_log.to_rows(episode, step))

    def export_csv(self, filename: str) -> bool:
        try:
            with open(filename, "w", newline="") as csvfile:
                writer = csv.writer(csvfile)
                writer.writerow(self.COLUMNS)
                writer.writerows(self.rows)
            return True
        except OSError as e:
            logger.error(f"Failed to export chain log CSV {filename}: {e}")
            return False


@dataclass
class CommRequest:
    """What a communication policy sees for one round"""
    agent_ids: List[int]
    observations: List[Observation]
    buffer_snapshots: List[np.ndarray]
    already_sent: np.ndarray
    round: int
    mode: str
    rng: np.random.Generator


class CommPolicy(Protocol):
    def decide(self, request: CommRequest) -> Tuple[np.ndarray, np.ndarray]:
        """Return (choices, distributions) for request.agent_ids, in order"""
        ...


def pick_choice(dist: np.ndarray, mode: str, rng: np.random.Generator) -> int:
    """Argmax in greedy mode, categorical sample otherwise"""
    if mode == GREEDY:
        return int(np.argmax(dist))
    return int(rng.choice(len(dist), p=dist / dist.sum()))


def run_comm_phase(world: WorldState, policy: CommPolicy, buffers: List[MessageBuffer],
                   mode: str, rng: np.random.Generator,
                   hidden: Optional[np.ndarray] = None,
                   observations: Optional[List[Observation]] = None,
                   record_decisions: bool = True,
                   env_index: int = 0) -> Tuple[List[MessageBuffer], List[CommDecision], ChainLog]:
    """
    Execute one step's communication stage
    Round 0: every agent decides. Round r >= 1: agents that received in round r-1
    and have not sent yet. Ends on a round without deliveries or after n rounds.
    """
    if observations is None:
        observations = observe_all(world)
    n = len(observations)
    obs_len = buffers[0].obs_len if buffers else 0
    sent = np.zeros(n, dtype=bool)
    decisions: List[CommDecision] = []
    chain_log = ChainLog()
    active = list(range(n))

    for round_index in range(n):
        if not active:
            break
        snapshots = [b.snapshot() for b in buffers]
        request = CommRequest(
            agent_ids=active,
            observations=[observations[i] for i in active],
            buffer_snapshots=[snapshots[i] for i in active],
            already_sent=sent.copy(),
            round=round_index,
            mode=mode,
            rng=rng,
        )
        choices, dists = policy.decide(request)

        deliveries: List[Tuple[int, int, List[np.ndarray]]] = []
        for idx, i in enumerate(active):
            choice = int(choices[idx])
            neighbor_ids = observations[i].neighbor_ids
            target = None
            if choice > 0:
                target = int(neighbor_ids[choice - 1])
                if target < 0:
                    raise ValueError(f"Agent {i} chose empty neighbor slot {choice}")
            payload = compose_outgoing(buffers[i], observations[i])

            if record_decisions:
                valid = neighbor_ids >= 0
                neighbor_obs = np.zeros((len(neighbor_ids), obs_len))
                neighbor_hidden = None
                if hidden is not None:
                    neighbor_hidden = np.zeros((len(neighbor_ids), hidden.shape[-1]))
                neighbor_buffers = []
                for slot, j in enumerate(neighbor_ids):
                    if j < 0:
                        neighbor_buffers.append(np.zeros((0, obs_len)))
                        continue
                    neighbor_obs[slot] = observations[j].vector
                    neighbor_buffers.append(snapshots[j].copy())
                    if hidden is not None:
                        neighbor_hidden[slot] = hidden[j]
                decisions.append(CommDecision(
                    sender=i,
                    round=round_index,
                    choice=choice,
                    target=target,
                    dist_params=np.asarray(dists[idx], dtype=np.float64).copy(),
                    sender_obs=observations[i].vector.copy(),
                    sender_buffer=snapshots[i].copy(),
                    payload=np.stack(payload),
                    neighbor_ids=neighbor_ids.copy(),
                    neighbor_obs=neighbor_obs,
                    neighbor_buffers=neighbor_buffers,
                    neighbor_hidden=neighbor_hidden if neighbor_hidden is not None else np.zeros((len(valid), 0)),
                    env_index=env_index,
                    step_index=world.step_index,
                ))

            if target is not None:
                sent[i] = True
                deliveries.append((i, target, payload))

        if not deliveries:
            break
        for sender, target, payload in deliveries:
            deliver(payload, buffers[target])
            chain_log.add(round_index, sender, target)
        received = sorted({target for _, target, _ in deliveries})
        active = [j for j in received if not sent[j]]

    logger.debug(f"Comm phase: {chain_log.send_count} sends over {chain_log.depth} rounds")
    return buffers, decisions, chain_log


def replay_chain_log(chain_log: ChainLog, observations: List[Observation], obs_len: int,
                     capacity: int = DEFAULT_BUFFER_CAPACITY) -> List[MessageBuffer]:
    """Rebuild end-of-phase buffers from a ChainLog and the step's observations"""
    buffers = make_buffers(len(observations), obs_len, capacity)
    by_round: Dict[int, List[DeliveryRecord]] = {}
    for record in chain_log.records:
        by_round.setdefault(record.round, []).append(record)
    for round_index in sorted(by_round):
        outgoing = [(r.target, compose_outgoing(buffers[r.sender], observations[r.sender]))
                    for r in by_round[round_index]]
        for target, payload in outgoing:
            deliver(payload, buffers[target])
    return buffers
