"""Small shared helpers: canonical hashing and line-delimited JSON progress events."""
from __future__ import annotations

import hashlib
import json
import sys
import time
from pathlib import Path


def canonical_json(obj) -> str:
    """Serialize ``obj`` with sorted keys and no whitespace so hashes are stable."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def fingerprint_obj(obj) -> str:
    """Hex fingerprint of any JSON-serializable object."""
    return sha256_hex(canonical_json(obj).encode("utf-8"))


def file_fingerprint(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def log_event(event: str, **fields) -> None:
    """Emit one machine-parsable progress event to stderr.

    Events are line-delimited JSON: {"event": ..., "ts": ..., **fields}.
    """
    record = {"event": event, "ts": round(time.time(), 3)}
    record.update(fields)
    print(json.dumps(record), file=sys.stderr, flush=True)
