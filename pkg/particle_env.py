#!/usr/bin/env python3
"""
Particle Environment Module
Partially-observed 2D particle world with two scenarios:
- Predator Prey (pp): agents chase scripted prey that flee the closest predator
- Cooperative Navigation (cn): agents spread over stationary landmarks
Observations have a fixed length that does not depend on the agent count
"""

import copy
import csv
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

PREDATOR_PREY = "pp"
COOPERATIVE_NAVIGATION = "cn"

# noop, +x, -x, +y, -y
ACTION_DIRECTIONS = np.array([
    [0.0, 0.0],
    [1.0, 0.0],
    [-1.0, 0.0],
    [0.0, 1.0],
    [0.0, -1.0],
])
NUM_ACTIONS = len(ACTION_DIRECTIONS)

WALL_TOLERANCE = 1e-9


class ActionError(ValueError):
    """Raised for a malformed joint action"""


@dataclass
class ScenarioConfig:
    """Scenario and physics configuration"""
    kind: str = COOPERATIVE_NAVIGATION
    n_agents: int = 3
    n_targets: int = 3
    episode_len: int = 50
    world_half_extent: float = 1.0
    obs_radius: float = 0.6
    k_neighbors: int = 3
    l_targets: int = 2
    dt: float = 0.1
    damping: float = 0.25
    accel: float = 3.0
    agent_max_speed: float = 1.0
    prey_speed_factor: float = 1.3
    capture_radius: float = 0.3
    capture_min_predators: int = 3
    occupy_radius: float = 0.1
    collision_dist: float = 0.1
    collision_penalty: float = 1.0

    def __post_init__(self):
        if self.kind not in (PREDATOR_PREY, COOPERATIVE_NAVIGATION):
            raise ValueError(f"Unknown scenario kind: {self.kind}")
        if self.n_agents < 1 or self.n_targets < 0:
            raise ValueError(f"Invalid entity counts: {self.n_agents}-{self.n_targets}")
        for name in ("obs_radius", "capture_radius", "occupy_radius", "collision_dist"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError(f"damping must be in [0, 1), got {self.damping}")

    @property
    def label(self) -> str:
        return f"{self.kind}:{self.n_agents}-{self.n_targets}"

    @property
    def target_slot_width(self) -> int:
        return 5 if self.kind == PREDATOR_PREY else 3

    @property
    def obs_len(self) -> int:
        return 4 + 5 * self.k_neighbors + self.target_slot_width * self.l_targets

    @property
    def state_dim(self) -> int:
        target_width = 4 if self.kind == PREDATOR_PREY else 2
        return 4 * self.n_agents + target_width * self.n_targets

    @property
    def prey_max_speed(self) -> float:
        return self.prey_speed_factor * self.agent_max_speed

    def with_counts(self, n_agents: int, n_targets: int) -> "ScenarioConfig":
        data = asdict(self)
        data.update(n_agents=n_agents, n_targets=n_targets)
        return ScenarioConfig(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def parse_scenario(text: str, base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    """Parse '<pp|cn>:<N>-<M>' into a ScenarioConfig"""
    try:
        kind, counts = text.strip().lower().split(":")
        n_agents, n_targets = (int(v) for v in counts.split("-"))
    except ValueError:
        raise ValueError(f"Scenario must look like 'pp:7-3' or 'cn:3-3', got {text!r}")
    data = asdict(base) if base is not None else {}
    data.update(kind=kind, n_agents=n_agents, n_targets=n_targets)
    return ScenarioConfig(**data)


@dataclass
class WorldState:
    """Full simulator state; the critic's global state is derived from it"""
    config: ScenarioConfig
    agent_pos: np.ndarray
    agent_vel: np.ndarray
    target_pos: np.ndarray
    target_vel: np.ndarray
    rng: np.random.Generator
    step_index: int = 0

    def copy(self) -> "WorldState":
        return WorldState(
            config=self.config,
            agent_pos=self.agent_pos.copy(),
            agent_vel=self.agent_vel.copy(),
            target_pos=self.target_pos.copy(),
            target_vel=self.target_vel.copy(),
            rng=copy.deepcopy(self.rng),
            step_index=self.step_index,
        )


@dataclass
class Observation:
    """Local observation of one agent plus the neighbor slot bookkeeping"""
    vector: np.ndarray
    neighbor_ids: np.ndarray  # (k_neighbors,), -1 for an empty slot

    @property
    def valid_mask(self) -> np.ndarray:
        return self.neighbor_ids >= 0


@dataclass
class StepResult:
    """Rewards and event counts for one transition"""
    rewards: np.ndarray
    capture_count: int = 0
    collision_count: int = 0
    occupied_count: int = 0
    done: bool = False

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["rewards"] = self.rewards.tolist()
        return data


def reset(config: ScenarioConfig, seed: int) -> WorldState:
    """Place every entity uniformly at random, velocities zero"""
    rng = np.random.default_rng(seed)
    extent = config.world_half_extent
    agent_pos = rng.uniform(-extent, extent, size=(config.n_agents, 2))
    target_pos = rng.uniform(-extent, extent, size=(config.n_targets, 2))
    return WorldState(
        config=config,
        agent_pos=agent_pos,
        agent_vel=np.zeros((config.n_agents, 2)),
        target_pos=target_pos,
        target_vel=np.zeros((config.n_targets, 2)),
        rng=rng,
    )


def _clamp_speed(vel: np.ndarray, max_speed: float) -> np.ndarray:
    speed = np.linalg.norm(vel, axis=-1, keepdims=True)
    scale = np.where(speed > max_speed, max_speed / np.maximum(speed, 1e-12), 1.0)
    return vel * scale


def prey_policy(state: WorldState, prey_index: int) -> np.ndarray:
    """Flee straight away from the closest predator at prey speed"""
    config = state.config
    prey = state.target_pos[prey_index]
    offsets = prey - state.agent_pos
    distances = np.linalg.norm(offsets, axis=1)
    nearest = int(np.argmin(distances))  # argmin keeps the lowest index on ties
    away = offsets[nearest]
    norm = np.linalg.norm(away)
    direction = away / norm if norm > 1e-12 else np.array([1.0, 0.0])
    velocity = direction * config.prey_max_speed

    extent = config.world_half_extent
    for axis in range(2):
        at_high = prey[axis] >= extent - WALL_TOLERANCE and velocity[axis] > 0
        at_low = prey[axis] <= -extent + WALL_TOLERANCE and velocity[axis] < 0
        if at_high or at_low:
            velocity[axis] = 0.0
    return velocity


def _pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)


def _collision_matrix(state: WorldState) -> np.ndarray:
    config = state.config
    dist = _pairwise_distances(state.agent_pos, state.agent_pos)
    hits = dist < config.collision_dist
    np.fill_diagonal(hits, False)
    return hits


def compute_reward(state: WorldState) -> np.ndarray:
    """Shared distance term for every agent, minus that agent's collision penalties"""
    config = state.config
    n = config.n_agents
    team = 0.0
    if config.n_targets > 0:
        dist = _pairwise_distances(state.agent_pos, state.target_pos)
        if config.kind == COOPERATIVE_NAVIGATION:
            team = -float(dist.min(axis=0).sum())
        else:
            team = -float(dist.min(axis=1).sum())
    collisions = _collision_matrix(state).sum(axis=1)
    return np.full(n, team) - config.collision_penalty * collisions


def detect_events(state: WorldState) -> Tuple[int, int, int]:
    """(capture_count, collision_count, occupied_count) for the current state"""
    config = state.config
    collisions = int(np.triu(_collision_matrix(state), k=1).sum())
    captures = 0
    occupied = 0
    if config.n_targets > 0:
        dist = _pairwise_distances(state.agent_pos, state.target_pos)
        if config.kind == PREDATOR_PREY:
            near = (dist < config.capture_radius).sum(axis=0)
            captures = int((near >= config.capture_min_predators).sum())
        else:
            occupied = int((dist < config.occupy_radius).any(axis=0).sum())
    return captures, collisions, occupied


def step(state: WorldState, joint_actions: Sequence[int]) -> Tuple[WorldState, StepResult]:
    """Advance the world by one dt"""
    config = state.config
    actions = np.asarray(joint_actions)
    if actions.shape != (config.n_agents,):
        raise ActionError(f"Expected {config.n_agents} actions, got shape {actions.shape}")
    if actions.size and (actions.min() < 0 or actions.max() >= NUM_ACTIONS):
        raise ActionError(f"Action index out of range 0..{NUM_ACTIONS - 1}: {actions.tolist()}")

    nxt = state.copy()
    extent = config.world_half_extent

    vel = nxt.agent_vel * (1.0 - config.damping) + config.accel * ACTION_DIRECTIONS[actions] * config.dt
    nxt.agent_vel = _clamp_speed(vel, config.agent_max_speed)
    nxt.agent_pos = np.clip(nxt.agent_pos + nxt.agent_vel * config.dt, -extent, extent)

    if config.kind == PREDATOR_PREY and config.n_targets > 0:
        prey_vel = np.stack([prey_policy(nxt, j) for j in range(config.n_targets)])
        nxt.target_vel = _clamp_speed(prey_vel, config.prey_max_speed)
        nxt.target_pos = np.clip(nxt.target_pos + nxt.target_vel * config.dt, -extent, extent)

    nxt.step_index = state.step_index + 1
    captures, collisions, occupied = detect_events(nxt)
    result = StepResult(
        rewards=compute_reward(nxt),
        capture_count=captures,
        collision_count=collisions,
        occupied_count=occupied,
        done=nxt.step_index >= config.episode_len,
    )
    return nxt, result


def _sorted_within(distances: np.ndarray, radius: float, exclude: Optional[int] = None) -> List[int]:
    """Indices within radius, nearest first, ties by index"""
    candidates = [i for i in range(len(distances))
                  if i != exclude and distances[i] <= radius]
    return sorted(candidates, key=lambda i: (distances[i], i))


def observe(state: WorldState, agent: int) -> Observation:
    config = state.config
    pos = state.agent_pos[agent]
    vel = state.agent_vel[agent]
    vector = np.zeros(config.obs_len)
    vector[0:2] = pos
    vector[2:4] = vel

    neighbor_ids = np.full(config.k_neighbors, -1, dtype=np.int64)
    agent_dist = np.linalg.norm(state.agent_pos - pos, axis=1)
    neighbors = _sorted_within(agent_dist, config.obs_radius, exclude=agent)[:config.k_neighbors]
    offset = 4
    for slot, j in enumerate(neighbors):
        base = offset + 5 * slot
        vector[base] = 1.0
        vector[base + 1:base + 3] = state.agent_pos[j] - pos
        vector[base + 3:base + 5] = state.agent_vel[j] - vel
        neighbor_ids[slot] = j

    offset = 4 + 5 * config.k_neighbors
    width = config.target_slot_width
    if config.n_targets > 0:
        target_dist = np.linalg.norm(state.target_pos - pos, axis=1)
        targets = _sorted_within(target_dist, config.obs_radius)[:config.l_targets]
        for slot, j in enumerate(targets):
            base = offset + width * slot
            vector[base] = 1.0
            vector[base + 1:base + 3] = state.target_pos[j] - pos
            if config.kind == PREDATOR_PREY:
                vector[base + 3:base + 5] = state.target_vel[j] - vel
    return Observation(vector=vector, neighbor_ids=neighbor_ids)


def observe_all(state: WorldState) -> List[Observation]:
    return [observe(state, i) for i in range(state.config.n_agents)]


def global_state(state: WorldState) -> np.ndarray:
    """Concatenated entity positions/velocities (critic input)"""
    parts = [state.agent_pos.reshape(-1), state.agent_vel.reshape(-1), state.target_pos.reshape(-1)]
    if state.config.kind == PREDATOR_PREY:
        parts.append(state.target_vel.reshape(-1))
    return np.concatenate(parts)


class TrajectoryRecorder:
    """Collects entity positions per step for CSV export"""

    COLUMNS = ["step", "entity_id", "kind", "x", "y", "vx", "vy"]

    def __init__(self):
        self.rows: List[List[Any]] = []

    def record(self, state: WorldState):
        config = state.config
        target_kind = "prey" if config.kind == PREDATOR_PREY else "landmark"
        for i in range(config.n_agents):
            x, y = state.agent_pos[i]
            vx, vy = state.agent_vel[i]
            self.rows.append([state.step_index, i, "agent", x, y, vx, vy])
        for j in range(config.n_targets):
            x, y = state.target_pos[j]
            vx, vy = state.target_vel[j]
            self.rows.append([state.step_index, config.n_agents + j, target_kind, x, y, vx, vy])

    def export_csv(self, filename: str) -> bool:
        try:
            with open(filename, "w", newline="") as csvfile:
                writer = csv.writer(csvfile)
                writer.writerow(self.COLUMNS)
                writer.writerows(self.rows)
            return True
        except OSError as e:
            logger.error(f"Failed to export trajectory CSV {filename}: {e}")
            return False
