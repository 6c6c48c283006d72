"""Binary checkpoint container: magic, JSON header, little-endian f32 blobs.

Layout::

    magic            4 bytes (e.g. b"MVQ1")
    header_len       u32 little endian
    header           UTF-8 JSON, keys sorted; "tensors" lists
                     {"name", "shape", "offset", "nbytes"} with offsets
                     relative to the first blob byte
    blobs            concatenated row-major float32 arrays
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


def write_container(path, magic, header, tensors):
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        data = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    head = dict(header)
    head["tensors"] = entries
    head_bytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    Path(path).write_bytes(magic + struct.pack("<I", len(head_bytes)) + head_bytes + b"".join(blobs))


def read_container(path, magic):
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise ValueError(f"{path}: expected magic {magic!r}, found {data[:4]!r}")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8:8 + hlen].decode())
    base = 8 + hlen
    tensors = {}
    for e in header.pop("tensors"):
        count = e["nbytes"] // 4
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=base + e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return header, tensors
