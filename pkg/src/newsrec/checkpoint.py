"""Binary parameter checkpoints.

Layout: 8-byte magic, little-endian u64 header length, UTF-8 JSON header,
then the raw little-endian float64 payload of every parameter in header
order.  Nothing time- or host-dependent is written, so identical parameters
give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from newsrec.errors import DataError

MAGIC = b"NRCKPT01"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, params: dict[str, np.ndarray], *, config: dict, seed: int,
                    extra: dict | None = None) -> None:
    entries = []
    offset = 0
    for name in params:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "config": config,
        "config_hash": config_hash(config),
        "seed": int(seed),
        "dtype": "<f8",
        "params": entries,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in params:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    params = {}
    for e in header["params"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise DataError(f"{path}: truncated payload for {e['name']}")
        params[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    if header["config_hash"] != config_hash(header["config"]):
        raise DataError(f"{path}: config hash mismatch")
    return params, header
