"""Versioned named-tensor checkpoint format.

Layout: magic "TPMB" | u32 format version | u32 header length | header JSON
(UTF-8, sorted keys) | raw little-endian payload.  The header carries the
tensor manifest (name, dtype, shape, byte offset/length), a flat config
snapshot, the RNG seed and a CRC32 of the payload.  Round trips are
bit-exact; any mismatch fails loudly naming the offending tensor.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import CheckpointError

MAGIC = b"TPMB"
FORMAT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def save_checkpoint(path, named_arrays: dict, config: dict, seed: int) -> None:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in named_arrays.items():
        dtype_name = _DTYPE_NAMES.get(np.dtype(arr.dtype))
        if dtype_name is None:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr).astype(_DTYPES[dtype_name]).tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": dtype_name,
                "shape": list(arr.shape),
                "byte_offset": offset,
                "byte_len": len(blob),
            }
        )
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    header = {
        "manifest": manifest,
        "config": config,
        "seed": seed,
        "payload_crc32": zlib.crc32(payload) & 0xFFFFFFFF,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)


def load_checkpoint(path) -> tuple[dict, dict, int]:
    """Returns (named arrays, config snapshot, seed)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    header_end = 12 + header_len
    try:
        header = json.loads(blob[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    payload = blob[header_end:]
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != header["payload_crc32"]:
        raise CheckpointError(f"{path}: payload CRC mismatch (corrupt file)")

    covered = 0
    arrays = {}
    prev_end = 0
    for entry in header["manifest"]:
        off, ln = entry["byte_offset"], entry["byte_len"]
        if off != prev_end:
            raise CheckpointError(f"{path}: manifest offsets have gaps at {entry['name']}")
        if off + ln > len(payload):
            raise CheckpointError(f"{path}: truncated payload at tensor {entry['name']}")
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: tensor {entry['name']} has unknown dtype {entry['dtype']}")
        arr = np.frombuffer(payload, dtype=dtype, count=ln // dtype.itemsize, offset=off)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
        prev_end = off + ln
        covered += ln
    if covered != len(payload):
        raise CheckpointError(f"{path}: payload has {len(payload) - covered} unaccounted bytes")
    return arrays, header["config"], header["seed"]


def load_into_model(model, path) -> tuple[dict, int]:
    """Restore every model parameter from a checkpoint, strictly by name."""
    arrays, config, seed = load_checkpoint(path)
    params = model.named_parameters()
    for name in params:
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
    for name in arrays:
        if name not in params:
            raise CheckpointError(f"{path}: unknown tensor {name}")
    for name, p in params.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(
                f"{path}: tensor {name} has shape {tuple(arr.shape)}, model expects {tuple(p.shape)}"
            )
        p.data = arr.astype(p.data.dtype)
    return config, seed
