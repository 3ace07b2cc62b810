#!/usr/bin/env python3
"""
Test script for the particle environments
Physics, prey policy, events, reward oracle and observation layout
"""

import csv
import math
import os
import tempfile

import numpy as np
import numpy.testing as npt

from particle_env import (
    ActionError,
    COOPERATIVE_NAVIGATION,
    PREDATOR_PREY,
    ScenarioConfig,
    TrajectoryRecorder,
    WorldState,
    compute_reward,
    detect_events,
    global_state,
    observe,
    observe_all,
    parse_scenario,
    prey_policy,
    reset,
    step,
)


def _world(config, agents, targets=(), agent_vel=None):
    agents = np.array(agents, dtype=np.float64).reshape(-1, 2)
    targets = np.array(targets, dtype=np.float64).reshape(-1, 2)
    return WorldState(
        config=config,
        agent_pos=agents,
        agent_vel=np.zeros_like(agents) if agent_vel is None else np.array(agent_vel, dtype=np.float64),
        target_pos=targets,
        target_vel=np.zeros_like(targets),
        rng=np.random.default_rng(0),
    )


def test_observation_length_is_count_free():
    cn = ScenarioConfig(kind=COOPERATIVE_NAVIGATION)
    pp = ScenarioConfig(kind=PREDATOR_PREY, n_agents=7, n_targets=3)
    assert cn.obs_len == 4 + 5 * 3 + 3 * 2 == 25
    assert pp.obs_len == 4 + 5 * 3 + 5 * 2 == 29
    assert pp.with_counts(3, 1).obs_len == pp.with_counts(9, 3).obs_len == pp.obs_len
    assert pp.state_dim == 4 * 7 + 4 * 3
    assert cn.state_dim == 4 * 3 + 2 * 3


def test_parse_scenario():
    config = parse_scenario("pp:7-3")
    assert (config.kind, config.n_agents, config.n_targets) == (PREDATOR_PREY, 7, 3)
    assert config.label == "pp:7-3"
    base = ScenarioConfig(obs_radius=0.9)
    assert parse_scenario("cn:6-6", base).obs_radius == 0.9
    for bad in ("pp7-3", "xx:3-3", "cn:a-b"):
        try:
            parse_scenario(bad)
        except ValueError as e:
            print(f"   Expected error: {e}")
        else:
            raise AssertionError(f"{bad!r} accepted")


def test_reset_is_seeded():
    config = ScenarioConfig(kind=PREDATOR_PREY, n_agents=7, n_targets=3)
    a, b, c = reset(config, 5), reset(config, 5), reset(config, 6)
    npt.assert_array_equal(a.agent_pos, b.agent_pos)
    npt.assert_array_equal(a.target_pos, b.target_pos)
    assert not np.array_equal(a.agent_pos, c.agent_pos)
    assert np.all(np.abs(a.agent_pos) <= config.world_half_extent)
    assert np.all(a.agent_vel == 0.0)


def test_agent_dynamics():
    config = ScenarioConfig(n_agents=2, n_targets=0)
    world = _world(config, [[0.0, 0.0], [0.5, 0.5]])
    nxt, _ = step(world, [1, 0])
    npt.assert_allclose(nxt.agent_vel[0], [0.3, 0.0])
    npt.assert_allclose(nxt.agent_pos[0], [0.03, 0.0])
    npt.assert_array_equal(nxt.agent_pos[1], [0.5, 0.5])
    assert nxt.step_index == 1 and world.step_index == 0

    for _ in range(60):
        nxt, _ = step(nxt, [3, 0])
    speed = np.linalg.norm(nxt.agent_vel[0])
    assert speed <= config.agent_max_speed + 1e-12
    assert nxt.agent_pos[0, 1] <= config.world_half_extent


def test_invalid_actions():
    config = ScenarioConfig(n_agents=3, n_targets=3)
    world = reset(config, 0)
    for actions in ([0, 1], [0, 1, 5], [-1, 0, 0]):
        try:
            step(world, actions)
        except ActionError as e:
            print(f"   Expected error: {e}")
        else:
            raise AssertionError(f"{actions} accepted")


def test_prey_flees_and_respects_walls():
    config = ScenarioConfig(kind=PREDATOR_PREY, n_agents=2, n_targets=1)
    world = _world(config, [[0.0, 0.0], [-0.9, -0.9]], [[0.5, 0.0]])
    npt.assert_allclose(prey_policy(world, 0), [config.prey_max_speed, 0.0])

    world = _world(config, [[0.5, 0.0], [-0.9, -0.9]], [[1.0, 0.0]])
    npt.assert_allclose(prey_policy(world, 0), [0.0, 0.0])

    # equidistant predators: the lower index wins
    world = _world(config, [[0.0, 0.3], [0.0, -0.3]], [[0.0, 0.0]])
    npt.assert_allclose(prey_policy(world, 0), [0.0, -config.prey_max_speed])


def test_capture_needs_three_predators():
    config = ScenarioConfig(kind=PREDATOR_PREY, n_agents=4, n_targets=1)
    near = [[0.2, 0.0], [-0.2, 0.0], [0.0, 0.2]]
    captures, _, _ = detect_events(_world(config, near + [[0.9, 0.9]], [[0.0, 0.0]]))
    assert captures == 1
    captures, _, _ = detect_events(_world(config, near[:2] + [[0.9, 0.9], [-0.9, 0.9]], [[0.0, 0.0]]))
    assert captures == 0


def test_collisions_and_occupation():
    config = ScenarioConfig(kind=COOPERATIVE_NAVIGATION, n_agents=3, n_targets=2)
    world = _world(config, [[0.0, 0.0], [0.05, 0.0], [0.8, 0.8]], [[0.8, 0.85], [-0.5, -0.5]])
    captures, collisions, occupied = detect_events(world)
    assert (captures, collisions, occupied) == (0, 1, 1)
    rewards = compute_reward(world)
    assert rewards[0] == rewards[1] == rewards[2] - config.collision_penalty


def _naive_reward(world):
    config = world.config
    team = 0.0
    if config.kind == COOPERATIVE_NAVIGATION:
        for target in world.target_pos:
            team -= min(math.dist(target, agent) for agent in world.agent_pos)
    else:
        for agent in world.agent_pos:
            team -= min(math.dist(agent, target) for target in world.target_pos)
    rewards = []
    for i, a in enumerate(world.agent_pos):
        hits = sum(1 for j, b in enumerate(world.agent_pos) if j != i and math.dist(a, b) < config.collision_dist)
        rewards.append(team - config.collision_penalty * hits)
    return np.array(rewards)


def test_reward_matches_naive_loop():
    rng = np.random.default_rng(3)
    for instance in range(120):
        kind = PREDATOR_PREY if instance % 2 else COOPERATIVE_NAVIGATION
        config = ScenarioConfig(kind=kind, n_agents=int(rng.integers(1, 8)), n_targets=int(rng.integers(1, 5)),
                                collision_dist=0.3)
        world = reset(config, int(rng.integers(1 << 30)))
        npt.assert_allclose(compute_reward(world), _naive_reward(world), rtol=0, atol=1e-12)


def test_observation_layout():
    config = ScenarioConfig(kind=COOPERATIVE_NAVIGATION, n_agents=4, n_targets=1)
    world = _world(config, [[0.0, 0.0], [0.3, 0.0], [0.1, 0.0], [0.9, 0.9]], [[0.0, 0.2]])
    obs = observe(world, 0)
    npt.assert_array_equal(obs.neighbor_ids, [2, 1, -1])
    npt.assert_array_equal(obs.valid_mask, [True, True, False])
    assert obs.vector.shape == (config.obs_len,)
    npt.assert_allclose(obs.vector[4:9], [1.0, 0.1, 0.0, 0.0, 0.0])
    npt.assert_allclose(obs.vector[9:14], [1.0, 0.3, 0.0, 0.0, 0.0])
    npt.assert_array_equal(obs.vector[14:19], 0.0)
    target_base = 4 + 5 * config.k_neighbors
    npt.assert_allclose(obs.vector[target_base:target_base + 3], [1.0, 0.0, 0.2])
    npt.assert_array_equal(obs.vector[target_base + 3:], 0.0)
    assert len(observe_all(world)) == 4


def test_episode_terminates():
    config = ScenarioConfig(kind=PREDATOR_PREY, n_agents=3, n_targets=1, episode_len=5)
    world = reset(config, 1)
    done_flags = []
    for _ in range(5):
        world, result = step(world, [1, 2, 3])
        done_flags.append(result.done)
    assert done_flags == [False, False, False, False, True]
    assert global_state(world).shape == (config.state_dim,)


def test_trajectory_export():
    config = ScenarioConfig(kind=PREDATOR_PREY, n_agents=2, n_targets=1, episode_len=3)
    world = reset(config, 0)
    recorder = TrajectoryRecorder()
    recorder.record(world)
    world, _ = step(world, [0, 1])
    recorder.record(world)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "trajectory.csv")
        assert recorder.export_csv(path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    assert rows[0] == TrajectoryRecorder.COLUMNS
    assert len(rows) == 1 + 2 * 3
    assert rows[3][2] == "prey"


if __name__ == "__main__":
    print("=" * 60)
    print("Particle Environment Test")
    print("=" * 60)
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith("test_") and callable(fn)]
    for index, (name, fn) in enumerate(tests, start=1):
        print(f"\n{index}. {name}...")
        fn()
        print("   OK")
    print("\n" + "=" * 60)
    print("Particle Environment Test Complete")
    print("=" * 60)
