"""
Checkpoint Container
Single-file checkpoints with a versioned header and endianness-fixed arrays.

Layout (all integers little-endian):

    8 bytes   magic  b"CGCKPT\\r\\n"
    u32       schema version
    u64       header length N
    N bytes   UTF-8 JSON header (sorted keys)
    ...       tensor body; each entry of header["tensors"] names its dtype,
              shape, byte offset and byte length relative to the body start
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch

from ..config.schema import RunConfig, run_config_from_dict
from ..core.errors import CheckpointFormatError, ConfigError

MAGIC = b"CGCKPT\r\n"
SCHEMA_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"<f4", "<f8", "<i8", "<i4"}

ROLE_MODEL = "model"
ROLE_COMPREHENDER = "comprehender"  # F: expression -> box
ROLE_GENERATOR = "generator"        # G: box -> expression


@dataclass
class Checkpoint:
    """In-memory checkpoint: run config, lineage, counters and named arrays."""
    config: RunConfig
    vocab_hash: str
    step: int = 0
    epoch: int = 0
    stages: Tuple[str, ...] = ()
    lineage: Dict[str, Any] = field(default_factory=dict)
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_meta: Dict[str, Any] = field(default_factory=dict)
    id: Optional[str] = None

    @property
    def roles(self) -> List[str]:
        return sorted({name.split("/", 1)[0] for name in self.arrays if not name.startswith("optim/")})

    def model_state(self, role: str) -> Dict[str, torch.Tensor]:
        prefix = f"{role}/"
        state = {
            name[len(prefix):]: _native_tensor(arr)
            for name, arr in self.arrays.items() if name.startswith(prefix)
        }
        if not state:
            raise CheckpointFormatError(f"checkpoint has no parameters for role {role!r} (roles: {self.roles})")
        return state

    def load_into(self, role: str, model: torch.nn.Module) -> None:
        try:
            model.load_state_dict(self.model_state(role), strict=True)
        except RuntimeError as e:
            raise CheckpointFormatError(f"parameters for role {role!r} do not fit the model: {e}") from e


def _native_tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.array(arr, dtype=arr.dtype.newbyteorder("="), order="C", copy=True))


def pack_model(role: str, model: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {f"{role}/{name}": tensor.detach().cpu().numpy() for name, tensor in model.state_dict().items()}


def pack_optimizer(role: str, model: torch.nn.Module, optimizer: torch.optim.Optimizer,
                   scheduler: Optional[Any] = None) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Optimizer moments as arrays named ``optim/<role>/<param>/<key>`` plus the
    JSON-able hyperparameters. Assumes the optimizer was built over
    ``model.parameters()`` in order.
    """
    names = [name for name, _ in model.named_parameters()]
    state = optimizer.state_dict()
    arrays: Dict[str, np.ndarray] = {}
    for index, slots in state["state"].items():
        for key, value in slots.items():
            arrays[f"optim/{role}/{names[index]}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    meta: Dict[str, Any] = {"param_groups": state["param_groups"]}
    if scheduler is not None:
        meta["scheduler"] = {
            k: v for k, v in scheduler.state_dict().items()
            if isinstance(v, (int, float, bool, list, type(None)))
        }
    return arrays, {role: meta}


def restore_optimizer(checkpoint: Checkpoint, role: str, model: torch.nn.Module,
                      optimizer: torch.optim.Optimizer, scheduler: Optional[Any] = None) -> None:
    meta = checkpoint.optimizer_meta.get(role)
    if meta is None:
        raise CheckpointFormatError(f"checkpoint holds no optimizer state for role {role!r}")
    index_of = {name: i for i, (name, _) in enumerate(model.named_parameters())}
    prefix = f"optim/{role}/"
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for name, arr in checkpoint.arrays.items():
        if not name.startswith(prefix):
            continue
        param_name, key = name[len(prefix):].rsplit("/", 1)
        value = _native_tensor(arr)
        state.setdefault(index_of[param_name], {})[key] = value
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
    if scheduler is not None and "scheduler" in meta:
        scheduler.load_state_dict({**scheduler.state_dict(), **meta["scheduler"]})


def _little_endian(arr: np.ndarray) -> np.ndarray:
    if arr.dtype.kind == "f":
        dtype = np.dtype("<f8") if arr.dtype.itemsize == 8 else np.dtype("<f4")
    elif arr.dtype.kind in "iub":
        dtype = np.dtype("<i8")
    else:
        raise CheckpointFormatError(f"cannot store arrays of dtype {arr.dtype}")
    # keeps 0-d arrays 0-d
    return np.array(arr, dtype=dtype, order="C", copy=True)


def save_checkpoint(path: str, checkpoint: Checkpoint) -> str:
    """Write ``checkpoint`` to ``path`` atomically; returns the checkpoint id."""
    table = []
    chunks = []
    offset = 0
    for name in sorted(checkpoint.arrays):
        arr = _little_endian(checkpoint.arrays[name])
        data = arr.tobytes(order="C")
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "config": checkpoint.config.model_dump(mode="json"),
        "vocab_hash": checkpoint.vocab_hash,
        "step": checkpoint.step,
        "epoch": checkpoint.epoch,
        "stages": list(checkpoint.stages),
        "lineage": checkpoint.lineage,
        "optimizer": checkpoint.optimizer_meta,
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = path + ".tmp"
    hasher = hashlib.sha256()
    with open(tmp_path, "wb") as f:
        for blob in (_PREFIX.pack(MAGIC, SCHEMA_VERSION, len(header_bytes)), header_bytes, *chunks):
            f.write(blob)
            hasher.update(blob)
    os.replace(tmp_path, path)
    checkpoint.id = hasher.hexdigest()[:16]
    return checkpoint.id


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _PREFIX.size:
        raise CheckpointFormatError(f"{path}: file too short for a checkpoint header")
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != SCHEMA_VERSION:
        raise CheckpointFormatError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
    body_start = _PREFIX.size + header_len
    try:
        header = json.loads(blob[_PREFIX.size:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable header ({e})") from e

    arrays: Dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        if entry["dtype"] not in _DTYPES:
            raise CheckpointFormatError(f"{path}: unsupported dtype {entry['dtype']} for {entry['name']}")
        start = body_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise CheckpointFormatError(f"{path}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(blob[start:end], dtype=np.dtype(entry["dtype"]))
        if arr.size != int(np.prod(entry["shape"], dtype=np.int64)):
            raise CheckpointFormatError(f"{path}: tensor {entry['name']} has inconsistent shape")
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()

    try:
        config = run_config_from_dict(header["config"])
    except (ConfigError, KeyError) as e:
        raise CheckpointFormatError(f"{path}: embedded config is invalid ({e})") from e
    return Checkpoint(
        config=config,
        vocab_hash=header.get("vocab_hash", ""),
        step=int(header.get("step", 0)),
        epoch=int(header.get("epoch", 0)),
        stages=tuple(header.get("stages", ())),
        lineage=header.get("lineage", {}),
        arrays=arrays,
        optimizer_meta=header.get("optimizer", {}),
        id=hashlib.sha256(blob).hexdigest()[:16],
    )
