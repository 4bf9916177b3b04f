"""Writer (and verification reader) for the U3DT array container format.

Layout, all little-endian: magic ``U3DT``, version u32, then per entry
name_len u32 + utf-8 name, dtype tag u32 (1: f64, 2: f32, 3: u32), ndim u32,
dims as u64 each, raw row-major payload. This mirrors the format the
segmentation pipeline reads; the exporter keeps its own implementation so the
file format itself stays the only coupling between the two packages.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"U3DT"
VERSION = 1

_TAGS = {np.dtype("<f8"): 1, np.dtype("<f4"): 2, np.dtype("<u4"): 3}


class ContainerFormatError(ValueError):
    pass


def container_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    seen = set()
    for name, array in arrays.items():
        if name in seen:
            raise ContainerFormatError(f"duplicate entry {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(array)
        if arr.dtype not in _TAGS:
            if arr.dtype.kind == "f":
                arr = arr.astype("<f8")
            else:
                raise ContainerFormatError(f"unsupported dtype {arr.dtype} for {name!r}")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<II", _TAGS[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def write_container(path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(container_bytes(arrays))


def read_entry_shapes(path) -> dict[str, tuple]:
    """Shapes of every entry; enough to sanity-check an exported container."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ContainerFormatError(f"{path}: unsupported version {version}")
    out = {}
    offset = 8
    tag_sizes = {1: 8, 2: 4, 3: 4}
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        tag, ndim = struct.unpack_from("<II", blob, offset)
        offset += 8
        dims = struct.unpack_from(f"<{ndim}Q", blob, offset)
        offset += 8 * ndim
        offset += int(np.prod(dims)) * tag_sizes[tag]
        out[name] = tuple(dims)
    return out
