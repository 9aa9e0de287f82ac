"""Single-file checkpoint format with a byte-exact round trip.

Layout: magic line, 8-byte little-endian header length, UTF-8 JSON header
(version, config echo, tensor manifest with shapes), then the raw
little-endian float64 tensor payloads concatenated in manifest order.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import CheckpointError

MAGIC = b"PIVOTASR-CKPT\n"
FORMAT_VERSION = 1


def save_checkpoint(path, model, config_echo=None):
    names = model.param_names()
    header = {
        "format_version": FORMAT_VERSION,
        "config": config_echo or {},
        "tensors": [
            {"name": n, "shape": list(model.params[n].data.shape)} for n in names
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Returns (config echo, {tensor name: float64 array})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = len(MAGIC)
    if len(blob) < off + 8:
        raise CheckpointError(f"{path}: truncated header length")
    hlen = int.from_bytes(blob[off : off + 8], "little")
    off += 8
    if len(blob) < off + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    off += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}"
        )
    arrays = {}
    for spec in header["tensors"]:
        name, shape = spec["name"], tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(blob) < off + nbytes:
            raise CheckpointError(f"{path}: truncated payload for tensor {name}")
        arrays[name] = np.frombuffer(
            blob, dtype="<f8", count=count, offset=off
        ).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes after payload")
    return header.get("config", {}), arrays


def load_checkpoint(path, model):
    """Load tensors into an existing model; returns the config echo."""
    config, arrays = read_checkpoint(path)
    model.load_state_dict(arrays)
    return config
