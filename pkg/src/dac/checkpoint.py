"""Binary checkpoint format.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header
(format version, training config echo, ordered tensor manifest with name/
shape/dtype), then the raw parameter payload concatenated in manifest order
as little-endian 32-bit reals. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ConfigError

MAGIC = b"DACCKPT1"
FORMAT_VERSION = 1


def save_checkpoint(path, named_params, config_dict):
    manifest = []
    blobs = []
    for name, tensor in named_params.items():
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        blobs.append(arr.tobytes())
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "config": config_dict,
        "manifest": manifest,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns (config dict, ordered dict name -> float32 array)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    names = [m["name"] for m in header["manifest"]]
    if len(names) != len(set(names)):
        raise ConfigError(f"{path}: duplicate tensor names in manifest")
    params = {}
    offset = 12 + hlen
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[entry["name"]] = arr.copy()
        offset += count * 4
    if offset != len(raw):
        raise ConfigError(f"{path}: payload size mismatch")
    return header["config"], params
