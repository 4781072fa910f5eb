"""Named-array checkpoint container.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"SWBTCK01"
    offset 8   u32       manifest length M
    offset 12  M bytes   manifest, UTF-8 JSON:
                         {"arrays": [{"name", "shape", "dtype"}, ...],
                          "meta": {...}}
    ...        payload   each array's raw bytes, C order, dtype as named
                         ("<f8" or "<f4"), concatenated in manifest order
    last 4     u32       CRC-32 of every byte after the magic
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SWBTCK01"


class CheckpointError(IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs = [], []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str})
        blobs.append(le.tobytes())
    manifest = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    body = struct.pack("<I", len(manifest)) + manifest + b"".join(blobs)
    Path(path).write_bytes(MAGIC + body + struct.pack("<I", zlib.crc32(body)))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointVersionError(f"{path}: not a SWBTCK01 checkpoint (header {raw[:8]!r})")
    if len(raw) < 16:
        raise CheckpointTruncatedError(f"{path}: file ends inside the header")
    body, (crc,) = raw[8:-4], struct.unpack("<I", raw[-4:])
    (mlen,) = struct.unpack("<I", body[:4])
    if 4 + mlen > len(body):
        raise CheckpointTruncatedError(f"{path}: manifest runs past end of file")
    try:
        manifest = json.loads(body[4 : 4 + mlen])
    except ValueError:
        if zlib.crc32(body) != crc:
            raise CheckpointChecksumError(f"{path}: checksum mismatch") from None
        raise CheckpointTruncatedError(f"{path}: unreadable manifest") from None
    need = sum(np.dtype(e["dtype"]).itemsize * int(np.prod(e["shape"], dtype=np.int64)) for e in manifest["arrays"])
    if 4 + mlen + need != len(body):
        raise CheckpointTruncatedError(f"{path}: payload is {len(body) - 4 - mlen} bytes, manifest needs {need}")
    if zlib.crc32(body) != crc:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")
    out, pos = {}, 4 + mlen
    for e in manifest["arrays"]:
        dt = np.dtype(e["dtype"])
        n = dt.itemsize * int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body[pos : pos + n], dtype=dt).reshape(e["shape"])
        out[e["name"]] = arr.astype(dt.newbyteorder("="))
        pos += n
    return out, manifest["meta"]
