"""Versioned binary container for named tensors plus JSON metadata.

Layout (all integers little-endian):

    magic   4 bytes  b"SWYC"
    version u32      (currently 1)
    meta    u64 length + UTF-8 JSON (sorted keys -> byte-stable)
    count   u32
    entry*  u32 name length, name bytes,
            u8 dtype tag (0=f32, 1=f64, 2=i64),
            u32 rank, u64 * rank dims,
            raw values

Round trips are bit-exact; metadata is validated before any tensor
payload is materialized, so config mismatches are rejected early.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SWYC"
VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(Exception):
    pass


def _canonical_json(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()


def write_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    names = sorted(tensors)
    if len(names) != len(set(names)):
        raise CheckpointError("duplicate tensor names")
    meta_bytes = _canonical_json(meta)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(tensors[name])
            dt = arr.dtype.newbyteorder("<")
            if dt not in _DTYPE_TAGS:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", _DTYPE_TAGS[dt]))
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.astype(dt, copy=False).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated file while reading {what}")
    return buf


def read_meta(path) -> dict:
    """Parse magic/version/metadata only; no tensor payload is read."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: bad magic (not a SWYC container)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported container version {version}")
        (mlen,) = struct.unpack("<Q", _read_exact(fh, 8, "meta length"))
        try:
            return json.loads(_read_exact(fh, mlen, "metadata"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt metadata block") from exc


def read_container(path, validate_meta=None) -> tuple[dict, dict[str, np.ndarray]]:
    """Load a container; ``validate_meta(meta)`` runs before tensors load."""
    meta = read_meta(path)
    if validate_meta is not None:
        validate_meta(meta)
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        fh.seek(4 + 4)
        (mlen,) = struct.unpack("<Q", _read_exact(fh, 8, "meta length"))
        fh.seek(mlen, 1)
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, nlen, "name").decode()
            if name in tensors:
                raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
            (tag,) = struct.unpack("<B", _read_exact(fh, 1, "dtype tag"))
            if tag not in _TAG_DTYPES:
                raise CheckpointError(f"{path}: unknown dtype tag {tag}")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "dims"))
            dt = _TAG_DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if rank else dt.itemsize
            raw = _read_exact(fh, nbytes, f"tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last entry")
    return meta, tensors
