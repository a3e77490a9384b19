"""Self-describing checkpoint container.

Layout: 8-byte magic, u32 format version, u64 header length, JSON header, raw
little-endian tensor bytes, and a trailing SHA-256 over everything before it.
The header records dtype/shape/offset per tensor plus free-form metadata
(step counter, config fingerprint, checkpoint kind), so files are
language-portable and corruption-detecting.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"MSFLCKPT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """File written by an incompatible format version."""


class CheckpointIntegrityError(CheckpointError):
    """Checksum mismatch or truncated file."""


@dataclass
class Checkpoint:
    """Named float/int arrays plus metadata, as read from disk."""

    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    @property
    def kind(self) -> str:
        return str(self.meta.get("kind", ""))

    @property
    def config_fingerprint(self) -> str:
        return str(self.meta.get("config_fingerprint", ""))

    def groups(self) -> set[str]:
        return {name.split("/", 1)[0] for name in self.tensors}

    def group_state_dict(self, prefix: str) -> dict[str, torch.Tensor]:
        head = prefix + "/"
        out = {}
        for name, arr in self.tensors.items():
            if name.startswith(head):
                out[name[len(head):]] = torch.from_numpy(arr.copy())
        return out


def _as_array(value) -> np.ndarray:
    if torch.is_tensor(value):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def save_checkpoint(path: str | Path, tensors: Mapping[str, object], meta: dict | None = None) -> Path:
    """Write tensors and metadata; returns the path written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    # np.array (not ascontiguousarray) keeps 0-dim scalars 0-dim
    arrays = {name: np.array(_as_array(t), copy=True, order="C") for name, t in tensors.items()}
    entries = {}
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        entries[name] = {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": int(arr.nbytes),
        }
        offset += arr.nbytes

    header = {
        "format_version": FORMAT_VERSION,
        "meta": dict(meta or {}),
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    digest = hashlib.sha256()
    with open(path, "wb") as f:
        def write(chunk: bytes):
            digest.update(chunk)
            f.write(chunk)

        write(MAGIC)
        write(struct.pack("<I", FORMAT_VERSION))
        write(struct.pack("<Q", len(header_bytes)))
        write(header_bytes)
        for name in sorted(arrays):
            write(arrays[name].tobytes())
        f.write(digest.digest())
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and verify a checkpoint.

    Raises:
        CheckpointVersionError: written by a different format version.
        CheckpointIntegrityError: bad magic, truncation, or checksum mismatch.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 + 32:
        raise CheckpointIntegrityError(f"{path}: file too short to be a checkpoint")
    body, stored_digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != stored_digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch (corrupt or truncated file)")
    if body[: len(MAGIC)] != MAGIC:
        raise CheckpointIntegrityError(f"{path}: bad magic, not a checkpoint file")

    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    (header_len,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    header = json.loads(body[pos : pos + header_len].decode("utf-8"))
    pos += header_len

    tensors = {}
    for name, entry in header["tensors"].items():
        start = pos + entry["offset"]
        buf = body[start : start + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        tensors[name] = arr
    return Checkpoint(tensors=tensors, meta=header.get("meta", {}))


def module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    """Flatten a module state dict under ``prefix/``."""
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, ckpt: Checkpoint, prefix: str) -> None:
    state = ckpt.group_state_dict(prefix)
    if not state:
        raise CheckpointError(f"checkpoint has no '{prefix}' group (groups: {sorted(ckpt.groups())})")
    module.load_state_dict(state)


def optimizer_arrays(prefix: str, optimizer: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], dict]:
    """Split an optimizer state dict into tensors and JSON-safe metadata."""
    sd = optimizer.state_dict()
    tensors: dict[str, torch.Tensor] = {}
    scalars: dict[str, dict] = {}
    for pid, state in sd["state"].items():
        scalars[str(pid)] = {}
        for key, val in state.items():
            if torch.is_tensor(val):
                tensors[f"{prefix}/{pid}/{key}"] = val
            else:
                scalars[str(pid)][key] = val
    meta = {"param_groups": sd["param_groups"], "scalars": scalars}
    return tensors, meta


def load_optimizer(optimizer: torch.optim.Optimizer, ckpt: Checkpoint, prefix: str) -> None:
    meta = ckpt.meta.get("optimizer", None)
    if meta is None:
        raise CheckpointError("checkpoint carries no optimizer state")
    state: dict[int, dict] = {}
    head = prefix + "/"
    for name, arr in ckpt.tensors.items():
        if not name.startswith(head):
            continue
        pid_s, key = name[len(head):].split("/", 1)
        state.setdefault(int(pid_s), {})[key] = torch.from_numpy(arr.copy())
    for pid_s, scalars in meta.get("scalars", {}).items():
        state.setdefault(int(pid_s), {}).update(scalars)
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
