"""Self-describing binary container for named float tensors.

Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
header, then the concatenated little-endian tensor payloads. The header
carries an arbitrary JSON manifest (hyperparameters, seeds) plus one entry
per tensor with name, dtype, shape and byte offset into the payload block.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EXSGTNSR"
VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64}


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray],
                 manifest: dict | None = None) -> None:
    """Write named arrays plus a JSON manifest to a single file."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"checkpoint: unsupported dtype {arr.dtype} for tensor {name!r}")
        le = "<f8" if arr.dtype.name == "float64" else "<f4"
        blob = np.ascontiguousarray(arr, dtype=le).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name,
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"manifest": manifest or {}, "tensors": entries}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (tensors, manifest). Refuses unknown magic or version."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise ValueError(f"checkpoint: bad magic {raw[:8]!r} in {path}")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise ValueError(f"checkpoint: unsupported version {version} in {path}")
    header = json.loads(raw[20:20 + hlen].decode())
    payload = raw[20 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]]).newbyteorder("<")
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        got = e["nbytes"]
        want = n * dt.itemsize
        if got != want:
            raise ValueError(f"checkpoint: tensor {e['name']!r} expects {want} bytes, header says {got}")
        chunk = payload[e["offset"]:e["offset"] + got]
        if len(chunk) != got:
            raise ValueError(f"checkpoint: truncated payload for {e['name']!r}: "
                             f"need {got} bytes, have {len(chunk)}")
        arr = np.frombuffer(chunk, dtype=dt).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(e["dtype"])
    return tensors, header["manifest"]
