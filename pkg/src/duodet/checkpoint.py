"""Single-file checkpoint container.

Layout::

    bytes 0..7    magic b"DUODETCP"
    bytes 8..11   format version, uint32 little-endian
    bytes 12..15  index block size, uint32 little-endian
    index block   UTF-8 JSON padded with spaces to the stated size
    payload       concatenated raw little-endian float32 tensor data

The index JSON holds the model config, whether auxiliary heads are present,
and one entry per state tensor: name (prefixed by its branch tag), shape,
payload offset and byte count. The index block has a fixed size for any
model that fits in it, so removing tensors (e.g. stripping auxiliary heads)
shrinks the file by exactly the removed payload bytes. Save/load round
trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .backbone import ModelConfig, model_config_from_dict
from .model import DualDetector

MAGIC = b"DUODETCP"
VERSION = 1
INDEX_BLOCK_SIZE = 262144


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be parsed."""


def save_checkpoint(model: DualDetector, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        blob = arr.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": dataclasses.asdict(model.cfg),
        "with_aux": model.with_aux,
        "entries": entries,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    block_size = INDEX_BLOCK_SIZE
    while len(header_bytes) > block_size:
        block_size *= 2
    header_bytes = header_bytes.ljust(block_size, b" ")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", block_size))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> tuple[DualDetector, ModelConfig]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint file not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version, block_size = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[16 : 16 + block_size].decode("utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt index block: {e}") from e
    cfg = model_config_from_dict(header["config"])
    model = DualDetector(cfg, with_aux=bool(header["with_aux"]))
    payload = raw[16 + block_size :]
    state = {}
    for entry in header["entries"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(
                f"{path}: entry {entry['name']} overruns the payload"
            )
        arr = np.frombuffer(payload[start : start + n], dtype="<f4").reshape(
            entry["shape"]
        )
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, cfg
