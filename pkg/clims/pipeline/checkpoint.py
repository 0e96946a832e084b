# clims/pipeline/checkpoint.py
"""
Versioned checkpoint container.

    b"CLIMSCKP"                  magic, 8 bytes
    uint16 little-endian         format version
    uint32 little-endian         header length N
    N bytes                      UTF-8 JSON header
    ...                          raw little-endian tensor bytes

The header carries the architecture tag, class names, the full TrainConfig
and its hash, epoch / step counters and a tensor table
(name, group, dtype, shape, offset, nbytes). Groups are "param" for model
parameters and "velocity" for SGD momentum buffers.
"""

import hashlib
import json
import logging
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch

from clims.core.config import TrainConfig, config_hash, parse_config
from clims.exceptions import (
    CheckpointError,
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigError,
    ConfigHashMismatchWarning,
)
from clims.models.backbone import CAMNet

logger = logging.getLogger(__name__)

MAGIC = b"CLIMSCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sHI")


@dataclass
class TrainState:
    arch: str
    class_names: List[str]
    config: TrainConfig
    parameters: Dict[str, torch.Tensor]
    velocity: Dict[str, torch.Tensor] = field(default_factory=dict)
    epoch: int = 0  # completed epochs
    step: int = 0  # completed optimizer steps
    config_hash: str = ""

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


# ────────────────────────────────
# Model / optimizer <-> state
# ────────────────────────────────
def capture_state(model: CAMNet, optimizer: Optional[torch.optim.Optimizer], config: TrainConfig,
                  class_names, epoch: int, step: int) -> TrainState:
    parameters = {name: t.detach().clone() for name, t in model.state_dict().items()}
    velocity = {}
    if optimizer is not None:
        for name, p in model.named_parameters():
            buf = optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                velocity[name] = buf.detach().clone()
    return TrainState(
        arch=model.arch,
        class_names=list(class_names),
        config=config,
        parameters=parameters,
        velocity=velocity,
        epoch=epoch,
        step=step,
    )


def model_from_state(state: TrainState) -> CAMNet:
    model = CAMNet(state.num_classes, state.arch)
    try:
        model.load_state_dict(state.parameters)
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint parameters do not fit a {state.arch} model: {e}") from e
    model.ready = True
    return model


def build_optimizer(model: CAMNet, config: TrainConfig, state: Optional[TrainState] = None) -> torch.optim.SGD:
    # weight decay is applied separately (decoupled), so the optimizer itself runs without it
    optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=config.momentum, weight_decay=0.0)
    if state is not None and state.velocity:
        for name, p in model.named_parameters():
            if name in state.velocity:
                optimizer.state[p]["momentum_buffer"] = state.velocity[name].clone()
    return optimizer


def parameter_checksum(source: Union[TrainState, CAMNet, Dict[str, torch.Tensor]]) -> str:
    """SHA-256 over parameter names and bytes in state-dict order."""
    if isinstance(source, TrainState):
        tensors = source.parameters
    elif isinstance(source, torch.nn.Module):
        tensors = source.state_dict()
    else:
        tensors = source
    digest = hashlib.sha256()
    for name, tensor in tensors.items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# ────────────────────────────────
# Save / load
# ────────────────────────────────
def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    table = []
    blobs = []
    offset = 0
    for group, tensors in (("param", state.parameters), ("velocity", state.velocity)):
        for name, tensor in tensors.items():
            array = tensor.detach().cpu().contiguous().numpy()
            raw = array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes()
            table.append({
                "name": name,
                "group": group,
                "dtype": array.dtype.name,
                "shape": list(array.shape),
                "offset": offset,
                "nbytes": len(raw),
            })
            blobs.append(raw)
            offset += len(raw)

    header = {
        "arch": state.arch,
        "class_names": state.class_names,
        "config": state.config.model_dump(mode="json"),
        "config_hash": state.config_hash,
        "epoch": state.epoch,
        "step": state.step,
        "seed": state.seed,
        "losses": list(state.config.losses),
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
            fh.write(header_bytes)
            for raw in blobs:
                fh.write(raw)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e

    logger.debug(f"Checkpoint saved: {path} (epoch {state.epoch}, step {state.step})")
    return path


def load_checkpoint(path, expected_config: Optional[TrainConfig] = None) -> TrainState:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint not found: {path}")
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    if len(data) < _PREFIX.size:
        raise CheckpointFormatError(f"{path} is too short to be a checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path} has format version {version}, expected {FORMAT_VERSION}")

    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"Corrupt checkpoint header in {path}: {e}") from e

    body = memoryview(data)[start + header_len:]
    groups: Dict[str, Dict[str, torch.Tensor]] = {"param": {}, "velocity": {}}
    try:
        for entry in header["tensors"]:
            lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
            if hi > len(body):
                raise CheckpointFormatError(f"Truncated checkpoint {path}: tensor {entry['name']} runs past end of file")
            dtype = np.dtype(entry["dtype"]).newbyteorder("<")
            array = np.frombuffer(body[lo:hi], dtype=dtype).reshape(entry["shape"])
            groups[entry["group"]][entry["name"]] = torch.from_numpy(array.astype(array.dtype.newbyteorder("="), copy=True))
        config = parse_config(header["config"])
        state = TrainState(
            arch=header["arch"],
            class_names=list(header["class_names"]),
            config=config,
            parameters=groups["param"],
            velocity=groups["velocity"],
            epoch=int(header["epoch"]),
            step=int(header["step"]),
            config_hash=header["config_hash"],
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise CheckpointFormatError(f"Corrupt checkpoint {path}: {e}") from e

    if state.config_hash != config_hash(config):
        _warn_hash(f"Checkpoint {path} stores a config hash that does not match its own config")
    if expected_config is not None and state.config_hash != config_hash(expected_config):
        _warn_hash(
            f"Checkpoint {path} was written under config {state.config_hash[:12]}, "
            f"current config is {config_hash(expected_config)[:12]}; loading anyway"
        )
    logger.debug(f"Checkpoint loaded: {path} (epoch {state.epoch}, step {state.step})")
    return state


def _warn_hash(message: str) -> None:
    logger.warning(message)
    warnings.warn(message, ConfigHashMismatchWarning, stacklevel=3)
