"""Array container, JSON sidecars and content hashing.

Container layout (little endian)::

    b"DPARR\\n"            6-byte magic
    uint32                 format version (currently 1)
    uint64                 header length in bytes
    header                 UTF-8 JSON: {"arrays": [{"name", "dtype", "shape", "offset", "nbytes"}]}
    payload                raw C-order array bytes, offsets relative to payload start

Files are byte-for-byte reproducible for equal inputs (no timestamps), so
their SHA-256 can be used as an artifact identity. Each container ``x.arr``
has a sidecar ``x.json`` holding free-form metadata.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ValidationError

MAGIC = b"DPARR\n"
VERSION = 1


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name]))
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str,
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    if meta is not None:
        write_json(path.with_suffix(".json"), dict(meta))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValidationError(f"{path} is not an array container")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != VERSION:
        raise ValidationError(f"unsupported container version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen])
    payload = start + hlen
    out = {}
    for e in header["arrays"]:
        buf = data[payload + e["offset"]: payload + e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return out


def write_json(path: str | Path, obj, indent: int | None = 2):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=indent, sort_keys=True)
        fh.write("\n")


def read_json(path: str | Path):
    with open(path) as fh:
        return json.load(fh)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tree(root: str | Path, pattern: str = "**/*") -> str:
    """Hash every file under ``root`` (relative path + content), order independent."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.glob(pattern) if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(sha256_file(p).encode())
    return h.hexdigest()


def sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()
