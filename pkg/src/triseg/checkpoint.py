"""Single-file checkpoint container: JSON header (config, vocabulary, step
and metric snapshot) followed by raw little-endian float32 blobs, each named
by its stable dotted path."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, config_from_dict
from .data import Vocabulary

MAGIC = b"TRISEGC1"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: ExperimentConfig
    vocab: Vocabulary
    epoch: int
    step: int
    metrics: dict | None
    arrays: dict[str, np.ndarray]     # float32 blobs by dotted path
    int_state: dict[str, dict]        # non-float state: {"shape": [...], "values": [...]}


def _collect_state(model: torch.nn.Module, optimizer=None):
    arrays: dict[str, np.ndarray] = {}
    int_state: dict[str, dict] = {}
    for name, tensor in model.state_dict().items():
        if tensor.dtype.is_floating_point:
            arrays[name] = tensor.detach().cpu().to(torch.float32).numpy()
        else:
            int_state[name] = {
                "shape": list(tensor.shape),
                "values": tensor.detach().cpu().reshape(-1).tolist(),
            }
    if optimizer is not None:
        for name, moment in optimizer.first_moment.items():
            arrays[f"optim.exp_avg.{name}"] = moment.detach().cpu().numpy()
        for name, moment in optimizer.second_moment.items():
            arrays[f"optim.exp_avg_sq.{name}"] = moment.detach().cpu().numpy()
    return arrays, int_state


def save_checkpoint(path: str | Path, model: torch.nn.Module, vocab: Vocabulary,
                    epoch: int, step: int, optimizer=None,
                    metrics: dict | None = None) -> Path:
    arrays, int_state = _collect_state(model, optimizer)
    blobs = []
    offset = 0
    payload = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        blobs.append({"name": name, "shape": list(arr.shape),
                      "offset": offset, "numel": int(arr.size)})
        payload.append(data)
        offset += len(data)
    header = json.dumps({
        "config": model.config.to_dict(),
        "vocab": vocab.to_dict(),
        "epoch": epoch,
        "step": step,
        "metrics": metrics,
        "int_state": int_state,
        "blobs": blobs,
    }, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for data in payload:
            fh.write(data)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    base = 16 + header_len
    arrays = {}
    for blob in header["blobs"]:
        start = base + blob["offset"]
        flat = np.frombuffer(raw, dtype="<f4", count=blob["numel"], offset=start)
        arrays[blob["name"]] = flat.reshape(blob["shape"]).copy()
    return Checkpoint(
        config=config_from_dict(header["config"]),
        vocab=Vocabulary.from_dict(header["vocab"]),
        epoch=header["epoch"],
        step=header["step"],
        metrics=header["metrics"],
        arrays=arrays,
        int_state=header["int_state"],
    )


def restore_model(model: torch.nn.Module, ckpt: Checkpoint) -> None:
    state = {}
    reference = model.state_dict()
    for name, tensor in reference.items():
        if tensor.dtype.is_floating_point:
            if name not in ckpt.arrays:
                raise CheckpointError(f"checkpoint missing parameter {name}")
            state[name] = torch.from_numpy(ckpt.arrays[name]).to(tensor.dtype)
        else:
            entry = ckpt.int_state.get(name)
            if entry is None:
                raise CheckpointError(f"checkpoint missing state {name}")
            state[name] = torch.tensor(entry["values"], dtype=tensor.dtype).reshape(entry["shape"])
    model.load_state_dict(state)


def restore_optimizer(optimizer, ckpt: Checkpoint) -> None:
    for name in optimizer.first_moment:
        key_m = f"optim.exp_avg.{name}"
        key_v = f"optim.exp_avg_sq.{name}"
        if key_m not in ckpt.arrays or key_v not in ckpt.arrays:
            raise CheckpointError(f"checkpoint missing optimizer state for {name}")
        optimizer.first_moment[name] = torch.from_numpy(ckpt.arrays[key_m].copy())
        optimizer.second_moment[name] = torch.from_numpy(ckpt.arrays[key_v].copy())
    optimizer.step_count = ckpt.step
