"""Binary checkpoint container.

Layout (all integers little-endian uint32 unless noted):

    magic      6 ascii bytes (e.g. ``MMMVQ1``)
    version    1 byte
    len(config_json), config_json   utf-8, model/config metadata
    len(manifest_json), manifest_json
    blob bytes

The manifest lists ``{"name", "dtype", "shape", "offset", "nbytes"}``
per array; offsets are relative to the start of the blob section.
Arrays are stored raw (little-endian), so save -> load round-trips
bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, magic: str, config: dict, arrays: dict[str, np.ndarray]):
    if len(magic) != 6:
        raise CheckpointError(f"magic must be 6 bytes, got {magic!r}")
    manifest = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        if arr.dtype == np.float32:
            dt = "<f4"
        elif np.issubdtype(arr.dtype, np.integer):
            dt = "<i8"
            arr = arr.astype(np.int64)
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(arr).astype(_DTYPES[dt], copy=False).tobytes()
        manifest.append(
            {"name": name, "dtype": dt, "shape": list(arr.shape),
             "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    cfg_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    man_bytes = json.dumps(manifest, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(magic.encode("ascii"))
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(man_bytes)))
        fh.write(man_bytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, expected_magic: str):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < 11:
        raise CheckpointError(f"truncated checkpoint: {path}")
    magic = data[:6].decode("ascii", errors="replace")
    if magic != expected_magic:
        raise CheckpointError(f"bad magic {magic!r}, expected {expected_magic!r}")
    version = data[6]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 7
    (cfg_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    config = json.loads(data[pos : pos + cfg_len].decode())
    pos += cfg_len
    (man_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    manifest = json.loads(data[pos : pos + man_len].decode())
    pos += man_len
    arrays = {}
    for entry in manifest:
        start = pos + entry["offset"]
        raw = data[start : start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return config, arrays
