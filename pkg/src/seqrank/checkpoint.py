"""Parameter checkpoint file: a manifest of named tensors followed by packed
little-endian float32 data. Shared by the encoder, trainer, and server."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SRCK"
VERSION = 1

_HEADER = struct.Struct("<4sHI")  # magic, version, tensor count
_ENTRY_FIXED = struct.Struct("<HB")  # name length, ndim


class CheckpointError(ValueError):
    """Raised on a malformed checkpoint file."""


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors as float32 little-endian with a manifest header."""
    manifest = bytearray()
    entries = []
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        entries.append((name, arr))

    # Manifest size must be known before offsets can be laid down; sizes are
    # fixed per entry, so compute them in one pass.
    manifest_size = _HEADER.size
    for name, arr in entries:
        manifest_size += _ENTRY_FIXED.size + len(name.encode()) + 4 * arr.ndim + 8

    offset = manifest_size
    manifest += _HEADER.pack(MAGIC, VERSION, len(entries))
    for name, arr in entries:
        raw = name.encode()
        manifest += _ENTRY_FIXED.pack(len(raw), arr.ndim)
        manifest += raw
        for dim in arr.shape:
            manifest += struct.pack("<I", dim)
        manifest += struct.pack("<Q", offset)
        offset += arr.nbytes

    with open(path, "wb") as fh:
        fh.write(manifest)
        for _, arr in entries:
            fh.write(arr.tobytes())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by :func:`save_tensors`."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"truncated checkpoint header at byte {len(blob)}")
    magic, version, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r} at byte 0")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    pos = _HEADER.size
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, ndim = _ENTRY_FIXED.unpack_from(blob, pos)
        pos += _ENTRY_FIXED.size
        name = blob[pos : pos + name_len].decode()
        pos += name_len
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<I", blob, pos)
            shape.append(dim)
            pos += 4
        (offset,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        nbytes = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        if offset + nbytes > len(blob):
            raise CheckpointError(f"tensor {name!r} overruns file at byte {offset}")
        flat = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset)
        tensors[name] = flat.reshape(shape).copy()
    return tensors
