"""Binary container for named arrays: scenes, embeddings, checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"U3DT"
    version u32      currently 1
    entries until end of file, each:
        name_len u32, name utf-8 bytes
        dtype    u32  (1: f64, 2: f32, 3: u32)
        ndim     u32
        dims     ndim x u64
        payload  row-major little-endian element bytes

Round trips are bit-exact for every supported dtype.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"U3DT"
VERSION = 1

_DTYPE_TAGS = {
    np.dtype("<f8"): 1,
    np.dtype("<f4"): 2,
    np.dtype("<u4"): 3,
}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}


class ContainerError(ValueError):
    """Malformed container file or unsupported content."""


def container_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    """Serialize named arrays (in insertion order) to container bytes."""
    seen = set()
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, array in arrays.items():
        if name in seen:
            raise ContainerError(f"duplicate entry name {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(array)
        if arr.dtype not in _DTYPE_TAGS:
            if arr.dtype.kind == "f":
                arr = arr.astype("<f8")
            elif arr.dtype.kind in "iu":
                if arr.size and (arr.min() < 0 or arr.max() > np.iinfo("<u4").max):
                    raise ContainerError(f"entry {name!r}: integer values out of u32 range")
                arr = arr.astype("<u4")
            else:
                raise ContainerError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<II", _DTYPE_TAGS[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def parse_container(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    """Parse container bytes into named arrays, preserving dtypes and order."""
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise ContainerError(f"{source}: bad magic, not a U3DT container")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ContainerError(f"{source}: unsupported container version {version}")

    out: dict[str, np.ndarray] = {}
    offset = 8
    total = len(blob)

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > total:
            raise ContainerError(f"{source}: truncated while reading {what}")
        piece = blob[offset:offset + n]
        offset += n
        return piece

    while offset < total:
        (name_len,) = struct.unpack("<I", take(4, "entry name length"))
        name = take(name_len, "entry name").decode("utf-8")
        if name in out:
            raise ContainerError(f"{source}: duplicate entry name {name!r}")
        tag, ndim = struct.unpack("<II", take(8, f"{name}: header"))
        if tag not in _TAG_DTYPES:
            raise ContainerError(f"{source}: entry {name!r} has unknown dtype tag {tag}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, f"{name}: dims"))
        dtype = _TAG_DTYPES[tag]
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = take(count * dtype.itemsize, f"{name}: payload ({count} elements)")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return out


def write_container(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays to ``path`` in insertion order."""
    Path(path).write_bytes(container_bytes(arrays))


def read_container(path) -> dict[str, np.ndarray]:
    """Read every entry of a container file."""
    return parse_container(Path(path).read_bytes(), source=str(path))
