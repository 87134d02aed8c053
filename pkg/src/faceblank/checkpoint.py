"""Checkpoint container: a directory holding a JSON manifest (architecture
spec, step count, seed) plus one binary blob per parameter tensor.

Blob format: magic b"FBT1", uint32 ndim, ndim x uint32 dims, then the data
as little-endian float32, C order. File name is the dotted state-dict path,
one subdirectory per network.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"FBT1"


class CheckpointError(ValueError):
    pass


def write_blob(path: Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(array.astype("<f4").tobytes())


def read_blob(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path} is not a parameter blob")
        (ndim,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"{path}: payload does not match shape header {shape}")
    return data.reshape(shape).copy()


def save_checkpoint(ckpt_dir, nets: dict, *, step: int, seed: int, phase: str,
                    generator_spec=None, extra: dict | None = None) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "step": step,
        "seed": seed,
        "phase": phase,
        "generator_spec": generator_spec.to_dict() if generator_spec is not None else None,
        "networks": {},
    }
    if extra:
        manifest.update(extra)
    for net_name, net in nets.items():
        net_dir = ckpt_dir / "weights" / net_name
        net_dir.mkdir(parents=True, exist_ok=True)
        shapes = {}
        for key, tensor in net.state_dict().items():
            arr = tensor.detach().cpu().numpy()
            write_blob(net_dir / f"{key}.bin", arr)
            shapes[key] = list(arr.shape)
        manifest["networks"][net_name] = shapes
    with open(ckpt_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_checkpoint(ckpt_dir, nets: dict) -> dict:
    """Load blobs into the given networks; validates every tensor shape
    against both the manifest and the module. Returns the manifest."""
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no manifest.json under {ckpt_dir}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    for net_name, net in nets.items():
        if net_name not in manifest["networks"]:
            raise CheckpointError(f"checkpoint has no network {net_name!r}")
        shapes = manifest["networks"][net_name]
        state = net.state_dict()
        if set(shapes) != set(state):
            missing = set(state) ^ set(shapes)
            raise CheckpointError(f"{net_name}: parameter set mismatch: {sorted(missing)[:5]}")
        loaded = {}
        for key, tensor in state.items():
            arr = read_blob(ckpt_dir / "weights" / net_name / f"{key}.bin")
            if list(arr.shape) != list(tensor.shape) or list(arr.shape) != shapes[key]:
                raise CheckpointError(
                    f"{net_name}.{key}: blob shape {arr.shape} does not match module {tuple(tensor.shape)}"
                )
            loaded[key] = torch.from_numpy(arr).to(tensor.dtype)
        net.load_state_dict(loaded)
    return manifest


def weights_hash(net: torch.nn.Module) -> str:
    """SHA-256 over all parameter bytes, in state-dict order."""
    h = hashlib.sha256()
    for key, tensor in net.state_dict().items():
        h.update(key.encode())
        h.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
