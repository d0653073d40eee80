"""Binary checkpoint format.

Layout (all integers little-endian):

    bytes 0..3   magic "SCVM"
    bytes 4..7   u32 format version (currently 1)
    bytes 8..11  u32 byte length of the JSON header
    header       UTF-8 JSON: {"format_version", "config", "step",
                 "tensors": [{"name", "dtype", "shape", "offset"}, ...]}
    payload      contiguous little-endian float32 values

Tensors are written sorted by name and the header JSON is canonical
(sorted keys, compact separators), so save -> load -> save reproduces
the file byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"SCVM"
FORMAT_VERSION = 1
_DTYPE_TAG = "<f4"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, config: dict, step: int) -> None:
    """Write named float arrays plus the full config. Names must be unique."""
    names = sorted(arrays)
    if len(names) != len(set(names)):
        raise CheckpointError("duplicate tensor names")
    manifest = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=_DTYPE_TAG)
        manifest.append(
            {"name": name, "dtype": _DTYPE_TAG, "shape": list(arr.shape), "offset": offset}
        )
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "config": config,
            "step": int(step),
            "tensors": manifest,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (arrays dict, config dict, step)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})"
            )
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            payload, dtype=entry["dtype"], count=count, offset=entry["offset"]
        )
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return arrays, header["config"], header["step"]


def split_model_and_optim(arrays: dict):
    model = {k: v for k, v in arrays.items() if not k.startswith("optim.")}
    optim = {k: v for k, v in arrays.items() if k.startswith("optim.")}
    return model, optim
