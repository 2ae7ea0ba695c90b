"""Versioned checkpoint container: JSON header + named binary weight sections.

Layout: 8-byte magic, 8-byte big-endian header length, canonical-JSON
header, then the concatenated little-endian weight blobs.  Serialization is
byte-deterministic, so save -> load -> save reproduces the file exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import CheckpointIoFailure, ConfigHashMismatch, MissingFile

MAGIC = b"IDSCKPT1"
FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    header: dict
    sections: dict[str, dict[str, torch.Tensor]]

    @property
    def iteration(self) -> int:
        return int(self.header["iteration"])


def save_checkpoint(path, *, config_hash: str, iteration: int, seed: int,
                    sections: dict, extra: dict | None = None) -> str:
    """Write named state dicts plus header metadata."""
    blobs = []
    offset = 0
    section_meta = []
    for name in sorted(sections):
        params = []
        state = sections[name]
        for key in state:  # state_dict preserves registration order
            arr = state[key].detach().cpu().numpy()
            arr = np.ascontiguousarray(arr)
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            raw = arr.tobytes()
            params.append({
                "key": key,
                "dtype": np.dtype(arr.dtype).str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            })
            blobs.append(raw)
            offset += len(raw)
        section_meta.append({"name": name, "params": params})
    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "iteration": int(iteration),
        "seed": int(seed),
        "extra": extra or {},
        "sections": section_meta,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(head).to_bytes(8, "big"))
            fh.write(head)
            for raw in blobs:
                fh.write(raw)
    except OSError as e:
        raise CheckpointIoFailure(f"cannot write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path, *, expect_config_hash: str | None = None,
                    force: bool = False) -> CheckpointData:
    """Read a checkpoint; optionally verify the config hash it was built with."""
    if not os.path.isfile(path):
        raise MissingFile(f"checkpoint not found: {path}")
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(MAGIC))
            if magic != MAGIC:
                raise CheckpointIoFailure(f"{path} is not a checkpoint file")
            head_len = int.from_bytes(fh.read(8), "big")
            header = json.loads(fh.read(head_len).decode())
            blob = fh.read()
    except OSError as e:
        raise CheckpointIoFailure(f"cannot read checkpoint {path}: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointIoFailure(
            f"unsupported checkpoint format version {header.get('format_version')}"
        )
    if expect_config_hash is not None and header["config_hash"] != expect_config_hash:
        if not force:
            raise ConfigHashMismatch(
                f"checkpoint built with config {header['config_hash']}, "
                f"expected {expect_config_hash} (pass force to override)"
            )
    sections = {}
    for sec in header["sections"]:
        state = {}
        for p in sec["params"]:
            raw = blob[p["offset"]:p["offset"] + p["nbytes"]]
            arr = np.frombuffer(raw, dtype=np.dtype(p["dtype"])).reshape(p["shape"]).copy()
            state[p["key"]] = torch.from_numpy(arr)
        sections[sec["name"]] = state
    return CheckpointData(header, sections)
