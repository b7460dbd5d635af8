"""Binary parameter checkpoints.

Layout::

    b"PXCK" | uint32 version | uint64 header length | JSON header (utf-8) | blobs

Blobs are raw little-endian float32 arrays, concatenated in the order listed
under ``"tensors"`` in the header (module parameters and buffers in
declaration order, then optimizer moments if present).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

MAGIC = b"PXCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _blob(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def save_checkpoint(path, model: nn.Module, header: dict, optimizer: torch.optim.Optimizer | None = None) -> None:
    """Write `model` (and Adam moments) with the given header fields."""
    tensors = list(model.state_dict().items())
    opt_meta = None
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        state = optimizer.state_dict()["state"]
        steps = sorted({float(s["step"]) for s in state.values()}) or [0.0]
        if len(steps) > 1:
            raise CheckpointError("parameters have different optimizer step counts")
        for i, name in enumerate(names):
            if i in state:
                tensors.append((f"adam.exp_avg.{name}", state[i]["exp_avg"]))
                tensors.append((f"adam.exp_avg_sq.{name}", state[i]["exp_avg_sq"]))
        opt_meta = {"step": int(steps[0])}
    head = dict(header)
    head.update(
        format="panoexplore-checkpoint",
        version=VERSION,
        tensors=[{"name": n, "shape": list(t.shape)} for n, t in tensors],
        optimizer=opt_meta,
    )
    raw = json.dumps(head, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<IQ", VERSION, len(raw)) + raw)
        for _, t in tensors:
            f.write(_blob(t))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Parse a checkpoint into (header, name -> tensor)."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, n = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16 : 16 + n])
        specs = header["tensors"]
    except (ValueError, KeyError, TypeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    offset = 16 + n
    tensors = {}
    for spec in specs:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        if offset + 4 * count > len(data):
            raise CheckpointError(f"{path}: truncated at tensor {spec['name']!r}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors[spec["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(spec["shape"]))
        offset += 4 * count
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return header, tensors


def load_into(model: nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    own = model.state_dict()
    missing = [k for k in own if k not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {missing[:5]}")
    for k, v in own.items():
        if tuple(tensors[k].shape) != tuple(v.shape):
            raise CheckpointError(f"shape mismatch for {k}: {tuple(tensors[k].shape)} vs {tuple(v.shape)}")
    model.load_state_dict({k: tensors[k] for k in own})


def restore_optimizer(optimizer: torch.optim.Optimizer, model: nn.Module, header: dict, tensors) -> None:
    meta = header.get("optimizer")
    if not meta:
        return
    sd = optimizer.state_dict()
    state = {}
    for i, (name, _) in enumerate(model.named_parameters()):
        key = f"adam.exp_avg.{name}"
        if key in tensors:
            state[i] = {
                "step": torch.tensor(float(meta["step"])),
                "exp_avg": tensors[key].clone(),
                "exp_avg_sq": tensors[f"adam.exp_avg_sq.{name}"].clone(),
            }
    sd["state"] = state
    optimizer.load_state_dict(sd)
