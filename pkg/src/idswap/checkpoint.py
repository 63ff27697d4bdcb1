"""Single-file checkpoint archive.

Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
header, then the concatenated named arrays as little-endian float32 in header
order. The header carries the stage tag, a config snapshot, RNG states and the
array index (name, shape, offset). Loading reproduces tensors bitwise.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"IDSWCKPT"
FORMAT_VERSION = 1


def rng_state_snapshot() -> dict[str, str]:
    state = torch.get_rng_state().numpy().tobytes()
    return {"torch": base64.b64encode(state).decode("ascii")}


def restore_rng_state(snapshot: dict[str, str]) -> None:
    raw = base64.b64decode(snapshot["torch"])
    torch.set_rng_state(torch.frombuffer(bytearray(raw), dtype=torch.uint8).clone())


def save_checkpoint(
    path: str | Path,
    stage: int,
    arrays: dict[str, torch.Tensor],
    config: dict[str, Any],
    extra_meta: dict[str, Any] | None = None,
    rng_state: dict[str, str] | None = None,
) -> None:
    index = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name].detach().cpu().to(torch.float32).numpy()
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "config": config,
        "rng_state": rng_state or rng_state_snapshot(),
        "meta": extra_meta or {},
        "arrays": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


class Checkpoint:
    def __init__(self, stage: int, arrays: dict[str, torch.Tensor],
                 config: dict[str, Any], meta: dict[str, Any], rng_state: dict[str, str]):
        self.stage = stage
        self.arrays = arrays
        self.config = config
        self.meta = meta
        self.rng_state = rng_state

    def component(self, prefix: str) -> dict[str, torch.Tensor]:
        """Arrays under a component tag, with the tag stripped."""
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in self.arrays.items() if k.startswith(prefix + ".")}


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    hlen = struct.unpack("<Q", raw[12:20])[0]
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    body = raw[20 + hlen :]
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=entry["offset"]).reshape(shape)
        arrays[entry["name"]] = torch.from_numpy(arr.copy())
    return Checkpoint(
        stage=header["stage"],
        arrays=arrays,
        config=header["config"],
        meta=header.get("meta", {}),
        rng_state=header.get("rng_state", {}),
    )


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
