"""Self-describing checkpoint container.

Layout:
    bytes 0..7    magic  b"MDCP\\x01\\x00\\x00\\x00"
    bytes 8..15   uint64 little-endian header length N
    bytes 16..16+N-1   UTF-8 JSON header:
        {"kind": ..., "config": {...}, "metadata": {...},
         "tensors": {name: {"offset": byte offset into data, "shape": [...]}}}
    remaining     concatenated float32 little-endian parameter blocks

The header's config must match the loader's expectations; offsets are
relative to the start of the data section.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .util import file_fingerprint

MAGIC = b"MDCP\x01\x00\x00\x00"


def save_checkpoint(path: str | Path, kind: str, config: dict, metadata: dict, tensors: dict) -> str:
    """Write the container; returns the file fingerprint (sha256 hex)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = {}
    blocks = []
    offset = 0
    for name, tensor in tensors.items():
        arr = np.asarray(tensor, dtype="<f4")
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        raw = arr.tobytes()  # C-order copy regardless of input layout
        blocks.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "config": config, "metadata": metadata, "tensors": index}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for raw in blocks:
            f.write(raw)
    return file_fingerprint(path)


def load_checkpoint(path: str | Path):
    """Read the container; returns (kind, config, metadata, tensors, fingerprint)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a maskdiff checkpoint (bad magic)")
    header_len = int.from_bytes(blob[8:16], "little")
    if 16 + header_len > len(blob):
        raise CheckpointError(f"{path} is truncated (header extends past end of file)")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    for key in ("kind", "config", "metadata", "tensors"):
        if key not in header:
            raise CheckpointError(f"{path} header is missing {key!r}")
    data = blob[16 + header_len :]
    tensors = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(data):
            raise CheckpointError(f"{path} is truncated (tensor {name!r} extends past end of file)")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(shape).copy()
    return header["kind"], header["config"], header["metadata"], tensors, file_fingerprint(path)
