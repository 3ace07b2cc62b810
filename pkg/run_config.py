#!/usr/bin/env python3
"""
Run Configuration Module
RunConfig dataclass plus the flat key=value file format:
- dotted keys matching RunConfig field paths (scenario.n_agents, hyper.delta, net.d_model)
- values coerced by field type, unknown keys rejected
- nested dict validated against a JSON schema before construction
"""

import dataclasses
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import jsonschema

from learning import Hyperparams
from particle_env import COOPERATIVE_NAVIGATION, PREDATOR_PREY, ScenarioConfig
from tem_networks import NetworkDims

logger = logging.getLogger(__name__)

ALGO_TEM = "TEM"
ALGO_MAPPO = "MAPPO"
ALGO_FC = "FC"
ALGO_RC = "RC"
ALGORITHMS = (ALGO_TEM, ALGO_MAPPO, ALGO_FC, ALGO_RC)

CONFIG_FILENAME = "run_config.txt"

# Accepted spellings mapped to the field they set
KEY_ALIASES = {
    "net.literal_fig2_kqv": "net.swapped_decoder_kqv",
}


class ConfigError(ValueError):
    """Raised for an invalid config file or value"""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if line is not None:
            location += f"line {line}: "
        if key is not None:
            location += f"{key}: "
        super().__init__(location + message)
        self.key = key
        self.line = line


@dataclass
class RunConfig:
    """Everything needed to reproduce a training run"""
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    algo: str = ALGO_TEM
    rc_stop_prob: float = 0.5
    hyper: Hyperparams = field(default_factory=Hyperparams)
    net: NetworkDims = field(default_factory=NetworkDims)
    total_env_steps: int = 200_000
    n_rollout_envs: int = 4
    rollout_length: int = 50
    eval_every: int = 20
    eval_episodes: int = 10
    buffer_capacity: int = 8
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ValueError(f"algo must be one of {ALGORITHMS}, got {self.algo}")
        if self.algo == ALGO_RC and not 0.0 <= self.rc_stop_prob <= 1.0:
            raise ValueError(f"rc_stop_prob must be in [0, 1], got {self.rc_stop_prob}")

    @property
    def comm_enabled(self) -> bool:
        """Agents run a communication phase (every algorithm except MAPPO)"""
        return self.algo != ALGO_MAPPO

    @property
    def learns_comm(self) -> bool:
        """Only TEM trains its communication head; FC and RC use fixed rules"""
        return self.algo == ALGO_TEM

    @property
    def steps_per_iteration(self) -> int:
        return self.n_rollout_envs * self.rollout_length

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


_NESTED = {"scenario": ScenarioConfig, "hyper": Hyperparams, "net": NetworkDims}

_PROBABILITY = {"type": "number", "minimum": 0.0, "maximum": 1.0}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0.0}
_COUNT = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "algo": {"enum": list(ALGORITHMS)},
        "rc_stop_prob": _PROBABILITY,
        "total_env_steps": {"type": "integer", "minimum": 0},
        "n_rollout_envs": _COUNT,
        "rollout_length": _COUNT,
        "eval_every": _COUNT,
        "eval_episodes": _COUNT,
        "buffer_capacity": _COUNT,
        "seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string", "minLength": 1},
        "scenario": {
            "type": "object",
            "properties": {
                "kind": {"enum": [PREDATOR_PREY, COOPERATIVE_NAVIGATION]},
                "n_agents": _COUNT,
                "n_targets": {"type": "integer", "minimum": 0},
                "episode_len": _COUNT,
                "world_half_extent": _POSITIVE,
                "obs_radius": _POSITIVE,
                "k_neighbors": _COUNT,
                "l_targets": {"type": "integer", "minimum": 0},
                "dt": _POSITIVE,
                "damping": {"type": "number", "minimum": 0.0, "exclusiveMaximum": 1.0},
                "capture_radius": _POSITIVE,
                "capture_min_predators": _COUNT,
                "occupy_radius": _POSITIVE,
                "collision_dist": _POSITIVE,
                "collision_penalty": {"type": "number", "minimum": 0.0},
            },
        },
        "hyper": {
            "type": "object",
            "properties": {
                "gamma": {"type": "number", "exclusiveMinimum": 0.0, "maximum": 1.0},
                "gae_lambda": _PROBABILITY,
                "clip_eps": _POSITIVE,
                "lambda_m": {"type": "number", "minimum": 0.0},
                "lambda_e": {"type": "number", "minimum": 0.0},
                "delta": {"type": "number", "minimum": 0.0},
                "actor_lr": {"type": "number", "minimum": 0.0},
                "critic_lr": {"type": "number", "minimum": 0.0},
                "epochs": _COUNT,
                "num_minibatch": _COUNT,
                "max_grad_norm": {"type": "number", "minimum": 0.0},
            },
        },
        "net": {
            "type": "object",
            "properties": {
                "d_h": _COUNT,
                "d_model": _COUNT,
                "n_encoders": {"type": "integer", "minimum": 0},
                "n_decoders": {"type": "integer", "minimum": 0},
                "d_ff": _COUNT,
                "critic_hidden": _COUNT,
            },
        },
    },
}


def field_table() -> Dict[str, type]:
    """Dotted key -> Python type for every settable field"""
    table: Dict[str, type] = {}
    for f in dataclasses.fields(RunConfig):
        if f.name in _NESTED:
            for sub in dataclasses.fields(_NESTED[f.name]):
                table[f"{f.name}.{sub.name}"] = sub.type
        else:
            table[f.name] = f.type
    return table


def coerce_value(text: str, kind: type, key: str, line: Optional[int] = None) -> Any:
    text = text.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is int:
            return int(text.replace("_", ""))
        if kind is float:
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"cannot parse value ({e})", key=key, line=line)


def parse_config_lines(text: str) -> List[Tuple[int, str, str]]:
    """(line number, key, raw value) for every setting line"""
    entries = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected key=value", line=number)
        key, value = line.split("=", 1)
        entries.append((number, key.strip(), value.strip()))
    return entries


def validate_config_dict(data: Dict[str, Any]):
    try:
        jsonschema.validate(data, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        key = ".".join(str(p) for p in e.absolute_path) or None
        raise ConfigError(e.message, key=key)


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """Validate a nested dict and build the RunConfig"""
    validate_config_dict(data)
    try:
        nested = {name: cls(**data.get(name, {})) for name, cls in _NESTED.items()}
        flat = {k: v for k, v in data.items() if k not in _NESTED}
        return RunConfig(**flat, **nested)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e))


def parse_config(text: str, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Build a RunConfig from key=value text on top of the defaults"""
    table = field_table()
    data = RunConfig().to_dict()
    seen: Dict[str, int] = {}
    for number, key, value in parse_config_lines(text):
        key = KEY_ALIASES.get(key, key)
        if key not in table:
            raise ConfigError("unknown key", key=key, line=number)
        if key in seen:
            raise ConfigError(f"duplicate key (first set on line {seen[key]})", key=key, line=number)
        seen[key] = number
        _assign(data, key, coerce_value(value, table[key], key, number))
    for key, value in (overrides or {}).items():
        key = KEY_ALIASES.get(key, key)
        if key not in table:
            raise ConfigError("unknown key", key=key)
        if isinstance(value, str):
            value = coerce_value(value, table[key], key)
        _assign(data, key, value)
    return config_from_dict(data)


def _assign(data: Dict[str, Any], key: str, value: Any):
    if "." in key:
        group, name = key.split(".", 1)
        data[group][name] = value
    else:
        data[key] = value


def load_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")
    config = parse_config(text, overrides)
    logger.info(f"Loaded config {path}: {config.algo} on {config.scenario.label}, seed {config.seed}")
    return config


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(config: RunConfig) -> str:
    """Flat key=value text that parse_config() reads back to an equal RunConfig"""
    data = config.to_dict()
    lines = []
    for key in field_table():
        if "." in key:
            group, name = key.split(".", 1)
            value = data[group][name]
        else:
            value = data[key]
        lines.append(f"{key}={_format_value(value)}")
    return "\n".join(lines) + "\n"


def save_config(config: RunConfig, path: str):
    with open(path, "w", encoding="utf-8") as f:
        f.write(config_to_text(config))
