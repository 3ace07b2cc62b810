#!/usr/bin/env python3
"""
Test script for the communication protocol
FIFO buffers, forwarding chains, round limits and ChainLog replay
"""

import csv
import os
import tempfile

import numpy as np
import numpy.testing as npt

from comm_protocol import (
    GREEDY,
    SAMPLE,
    ChainLog,
    ChainLogWriter,
    CommRequest,
    MessageBuffer,
    PayloadError,
    append_fifo,
    begin_step,
    compose_outgoing,
    make_buffers,
    pick_choice,
    replay_chain_log,
    run_comm_phase,
)
from particle_env import PREDATOR_PREY, ScenarioConfig, WorldState, observe_all, reset
from tem_networks import ActorParams, NetworkCommPolicy, NetworkDims


class ScriptedPolicy:
    """Sends along a fixed (round, sender) -> target script, otherwise stays silent"""

    def __init__(self, script):
        self.script = script

    def decide(self, request: CommRequest):
        choices = []
        for i, obs in zip(request.agent_ids, request.observations):
            target = self.script.get((request.round, i))
            choices.append(0 if target is None else list(obs.neighbor_ids).index(target) + 1)
        dists = np.zeros((len(choices), len(request.observations[0].neighbor_ids) + 1))
        dists[np.arange(len(choices)), choices] = 1.0
        return np.array(choices), dists


class AlwaysSendPolicy:
    """Adversarial: every active agent sends to a random valid slot whenever it can"""

    def decide(self, request: CommRequest):
        choices, dists = [], []
        for obs in request.observations:
            valid = np.flatnonzero(obs.valid_mask)
            dist = np.zeros(len(obs.neighbor_ids) + 1)
            if len(valid):
                dist[valid + 1] = 1.0 / len(valid)
                choices.append(int(request.rng.choice(valid)) + 1)
            else:
                dist[0] = 1.0
                choices.append(0)
            dists.append(dist)
        return np.array(choices), np.array(dists)


class RecordingPolicy:
    """Wraps another policy and keeps every (round, choices, dists) it returned"""

    def __init__(self, inner):
        self.inner = inner
        self.calls = []

    def decide(self, request: CommRequest):
        choices, dists = self.inner.decide(request)
        self.calls.append((request.round, np.array(choices), np.array(dists)))
        return choices, dists


def _line_world():
    config = ScenarioConfig(n_agents=3, n_targets=0)
    agents = np.array([[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]])
    return WorldState(config, agents, np.zeros_like(agents), np.zeros((0, 2)), np.zeros((0, 2)),
                      np.random.default_rng(0))


def test_buffer_is_bounded_fifo():
    buffer = MessageBuffer(obs_len=2, capacity=2)
    for value in (1.0, 2.0, 3.0):
        buffer.push(np.full(2, value))
    assert len(buffer) == 2
    npt.assert_array_equal(buffer.snapshot(), [[2.0, 2.0], [3.0, 3.0]])
    try:
        buffer.push(np.zeros(3))
    except PayloadError as e:
        print(f"   Expected error: {e}")
    else:
        raise AssertionError("wrong payload length accepted")
    begin_step([buffer])
    assert len(buffer) == 0 and buffer.snapshot().shape == (0, 2)


def test_compose_and_append():
    buffer = MessageBuffer(obs_len=2, capacity=4)
    buffer.push(np.array([1.0, 1.0]))
    payload = compose_outgoing(buffer, np.array([9.0, 9.0]))
    npt.assert_array_equal(np.stack(payload), [[1.0, 1.0], [9.0, 9.0]])
    merged = append_fifo(np.ones((3, 2)), np.stack(payload), capacity=4)
    npt.assert_array_equal(merged, [[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [9.0, 9.0]])


def test_forwarding_chain_expands():
    world = _line_world()
    observations = observe_all(world)
    buffers = make_buffers(3, world.config.obs_len)
    policy = ScriptedPolicy({(0, 0): 1, (1, 1): 2, (2, 2): 1})
    buffers, decisions, chain_log = run_comm_phase(world, policy, buffers, SAMPLE, np.random.default_rng(0))
    o0, o1, o2 = (o.vector for o in observations)

    assert chain_log.senders() == [0, 1, 2]
    assert [r.round for r in chain_log.records] == [0, 1, 2]
    assert chain_log.depth == 3 and chain_log.send_count == 3
    npt.assert_array_equal(buffers[2].snapshot(), np.stack([o0, o1]))
    npt.assert_array_equal(buffers[1].snapshot(), np.stack([o0, o0, o1, o2]))
    assert len(buffers[0]) == 0
    # round 0 records every agent, later rounds only the receivers
    assert [(d.round, d.sender, d.choice) for d in decisions][:3] == [(0, 0, 1), (0, 1, 0), (0, 2, 0)]
    assert [(d.round, d.sender) for d in decisions[3:]] == [(1, 1), (2, 2)]
    npt.assert_array_equal(decisions[4].payload, np.stack([o0, o1, o2]))


def test_silent_policy_has_no_deliveries():
    world = reset(ScenarioConfig(n_agents=5, n_targets=0, obs_radius=3.0), 0)
    buffers = make_buffers(5, world.config.obs_len)
    hidden = np.arange(5 * 2, dtype=np.float64).reshape(5, 2)
    _, decisions, chain_log = run_comm_phase(world, ScriptedPolicy({}), buffers, GREEDY,
                                             np.random.default_rng(0), hidden=hidden)
    assert chain_log.send_count == 0 and chain_log.depth == 0
    assert len(decisions) == 5 and all(d.choice == 0 and d.target is None for d in decisions)
    first = decisions[0]
    slot = int(np.flatnonzero(first.neighbor_ids >= 0)[0])
    npt.assert_array_equal(first.neighbor_hidden[slot], hidden[first.neighbor_ids[slot]])


def test_empty_slot_choice_rejected():
    world = _line_world()

    class BadPolicy:
        def decide(self, request):
            return np.full(len(request.agent_ids), 3), np.zeros((len(request.agent_ids), 4))

    try:
        run_comm_phase(world, BadPolicy(), make_buffers(3, world.config.obs_len), SAMPLE, np.random.default_rng(0))
    except ValueError as e:
        print(f"   Expected error: {e}")
    else:
        raise AssertionError("empty neighbor slot accepted")


def test_randomized_protocol_invariants():
    rng = np.random.default_rng(2024)
    policy = AlwaysSendPolicy()
    for sim in range(10_000):
        n = int(rng.integers(2, 13))
        capacity = int(rng.integers(1, 9))
        config = ScenarioConfig(n_agents=n, n_targets=0, obs_radius=float(rng.uniform(0.3, 3.0)))
        world = reset(config, sim)
        observations = observe_all(world)
        buffers = make_buffers(n, config.obs_len, capacity)
        buffers, _, chain_log = run_comm_phase(world, policy, buffers, SAMPLE, rng, observations=observations,
                                               record_decisions=False)
        senders = chain_log.senders()
        assert len(senders) == len(set(senders)), "agent sent twice in one step"
        assert all(r.round < n for r in chain_log.records)
        for record in chain_log.records:
            assert record.target in observations[record.sender].neighbor_ids
        assert all(len(b) <= capacity for b in buffers)
        replayed = replay_chain_log(chain_log, observations, config.obs_len, capacity)
        for original, rebuilt in zip(buffers, replayed):
            npt.assert_array_equal(original.snapshot(), rebuilt.snapshot())


def test_chain_log_order_and_export():
    log = ChainLog()
    log.add(0, 1, 2)
    log.add(1, 2, 0)
    try:
        log.add(0, 3, 1)
    except ValueError as e:
        print(f"   Expected error: {e}")
    else:
        raise AssertionError("out-of-order round accepted")
    writer = ChainLogWriter()
    writer.add(episode=4, step=7, chain_log=log)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "chains.csv")
        assert writer.export_csv(path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    assert rows == [ChainLogWriter.COLUMNS, ["4", "7", "0", "1", "2"], ["4", "7", "1", "2", "0"]]
    assert log.to_dict()["records"][1] == {"round": 1, "sender": 2, "target": 0}


def test_greedy_network_phase_is_deterministic():
    config = ScenarioConfig(kind=PREDATOR_PREY, n_agents=5, n_targets=2, obs_radius=3.0)
    actor = ActorParams.build(config.obs_len, config.k_neighbors,
                              NetworkDims(d_h=4, d_model=4, d_ff=8, critic_hidden=8), seed=1)
    world = reset(config, 3)
    runs = []
    for seed in (0, 99):
        policy = RecordingPolicy(NetworkCommPolicy(actor))
        buffers = make_buffers(config.n_agents, config.obs_len)
        buffers, _, chain_log = run_comm_phase(world, policy, buffers, GREEDY, np.random.default_rng(seed),
                                               record_decisions=False)
        runs.append((policy.calls, chain_log.to_dict(), [b.snapshot() for b in buffers]))
    (calls_a, log_a, buffers_a), (calls_b, log_b, buffers_b) = runs
    assert log_a == log_b
    assert len(calls_a) == len(calls_b) >= 1
    for (round_a, choices_a, dists_a), (round_b, choices_b, dists_b) in zip(calls_a, calls_b):
        assert round_a == round_b
        npt.assert_array_equal(choices_a, choices_b)
        npt.assert_array_equal(dists_a, dists_b)
        npt.assert_array_equal(choices_a, np.argmax(dists_a, axis=-1))
    for a, b in zip(buffers_a, buffers_b):
        npt.assert_array_equal(a, b)


def test_pick_choice():
    rng = np.random.default_rng(0)
    dist = np.array([0.1, 0.7, 0.2, 0.0])
    assert pick_choice(dist, GREEDY, rng) == 1
    samples = [pick_choice(dist, SAMPLE, rng) for _ in range(500)]
    assert 3 not in samples and set(samples) <= {0, 1, 2}


if __name__ == "__main__":
    print("=" * 60)
    print("Communication Protocol Test")
    print("=" * 60)
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith("test_") and callable(fn)]
    for index, (name, fn) in enumerate(tests, start=1):
        print(f"\n{index}. {name}...")
        fn()
        print("   OK")
    print("\n" + "=" * 60)
    print("Communication Protocol Test Complete")
    print("=" * 60)
