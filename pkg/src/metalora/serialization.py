"""MTK1 tensor blobs and flat checkpoint directories.

Blob layout (all little-endian)::

    b"MTKTNSR1" | width:u8 (4 or 8) | order:u32 | extents:u32 * order | data

Checkpoint directory: ``manifest.json`` plus one MTK1 blob per named array,
the file name being the array's name.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MTKTNSR1"
_WIDTH_TO_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        width = 4
    elif arr.dtype == np.float64:
        width = 8
    else:
        arr = arr.astype(np.float64)
        width = 8
    header = MAGIC + struct.pack("<BI", width, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_WIDTH_TO_DTYPE[width]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < len(MAGIC) + 5 or buf[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic: not an MTK1 tensor blob")
    pos = len(MAGIC)
    width, order = struct.unpack_from("<BI", buf, pos)
    pos += 5
    if width not in _WIDTH_TO_DTYPE:
        raise FormatError(f"element width must be 4 or 8, got {width}")
    if len(buf) < pos + 4 * order:
        raise FormatError("truncated extents")
    shape = struct.unpack_from(f"<{order}I", buf, pos)
    pos += 4 * order
    count = int(np.prod(shape, dtype=np.int64)) if order else 1
    if len(buf) - pos != count * width:
        raise FormatError(
            f"data length {len(buf) - pos} bytes does not match shape {shape} x {width} bytes"
        )
    data = np.frombuffer(buf, dtype=_WIDTH_TO_DTYPE[width], offset=pos, count=count)
    return data.reshape(shape).astype(_WIDTH_TO_DTYPE[width].newbyteorder("="))


def write_tensor(path, arr) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def dump_json(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_checkpoint(directory, manifest: Mapping, arrays: Mapping[str, np.ndarray]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest["blobs"] = {name: list(np.shape(a)) for name, a in arrays.items()}
    for name, arr in arrays.items():
        write_tensor(directory / name, arr)
    dump_json(manifest, directory / "manifest.json")
    return directory


def read_checkpoint(directory) -> tuple[dict, dict[str, np.ndarray]]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = {}
    for name, shape in manifest.get("blobs", {}).items():
        arr = read_tensor(directory / name)
        if list(arr.shape) != list(shape):
            raise FormatError(f"blob {name!r} has shape {arr.shape}, manifest says {shape}")
        arrays[name] = arr
    return manifest, arrays
