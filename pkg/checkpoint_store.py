#!/usr/bin/env python3
"""
Checkpoint Store Module
Little-endian binary checkpoints:

    magic "TEMCKPT1" | u32 version | str config text | str rng-state JSON
    | u64 env_steps | u64 iteration | u32 tensor count
    | per tensor: str name, u64 rank, u64 dims[rank], f64 data[prod(dims)]

where str is a u32 byte length followed by UTF-8 bytes. Tensor names are
"act.*" / "msg.*" (actor), "critic.*" and "opt.*" (optimizer moments).
"""

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

import numpy as np

from run_config import ConfigError, RunConfig, config_to_text, parse_config

logger = logging.getLogger(__name__)

MAGIC = b"TEMCKPT1"
FORMAT_VERSION = 1

CRITIC_PREFIX = "critic."
OPTIMIZER_PREFIX = "opt."


class CheckpointError(ValueError):
    """Raised for an unreadable or incompatible checkpoint"""


@dataclass
class Checkpoint:
    config: RunConfig
    actor: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    critic: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    optimizer: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    rng_states: Dict[str, Any] = field(default_factory=dict)
    env_steps: int = 0
    iteration: int = 0

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        merged: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for group in (self.actor, self.critic, self.optimizer):
            merged.update(group)
        return merged


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"Truncated checkpoint at byte {self.offset} (need {size} more)")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (length,) = self.unpack("<I")
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"Invalid UTF-8 in checkpoint: {e}")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION),
             _pack_str(config_to_text(ckpt.config)),
             _pack_str(json.dumps(ckpt.rng_states, sort_keys=True)),
             struct.pack("<QQ", ckpt.env_steps, ckpt.iteration)]
    tensors = ckpt.tensors()
    parts.append(struct.pack("<I", len(tensors)))
    for name, array in tensors.items():
        array = np.asarray(array, dtype="<f8")
        parts.append(_pack_str(name))
        parts.append(struct.pack(f"<Q{array.ndim}Q", array.ndim, *array.shape))
        parts.append(np.ascontiguousarray(array).tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("Not a checkpoint file (bad magic)")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    try:
        config = parse_config(reader.string())
    except ConfigError as e:
        raise CheckpointError(f"Embedded config rejected: {e}")
    try:
        rng_states = json.loads(reader.string())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Corrupt RNG state block: {e}")
    env_steps, iteration = reader.unpack("<QQ")
    ckpt = Checkpoint(config=config, rng_states=rng_states, env_steps=env_steps, iteration=iteration)

    (count,) = reader.unpack("<I")
    for _ in range(count):
        name = reader.string()
        (rank,) = reader.unpack("<Q")
        shape = reader.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        array = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if name.startswith(OPTIMIZER_PREFIX):
            ckpt.optimizer[name] = array
        elif name.startswith(CRITIC_PREFIX):
            ckpt.critic[name] = array
        else:
            ckpt.actor[name] = array
    if reader.offset != len(data):
        raise CheckpointError(f"{len(data) - reader.offset} trailing bytes after last tensor")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str) -> str:
    with open(path, "wb") as f:
        f.write(encode_checkpoint(ckpt))
    logger.info(f"Checkpoint written: {path} ({len(ckpt.actor)} actor, {len(ckpt.critic)} critic tensors)")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    ckpt = decode_checkpoint(data)
    logger.info(f"Checkpoint loaded: {path} (env_steps={ckpt.env_steps})")
    return ckpt
