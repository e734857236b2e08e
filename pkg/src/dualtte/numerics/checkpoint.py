"""Single-file checkpoint format.

Layout (all integers and floats little-endian)::

    b"DTTECKPT"                 magic
    u32                         format version
    u64 + bytes                 UTF-8 JSON configuration snapshot
    u32                         number of arrays
    per array:
      u32 + bytes               UTF-8 name
      u32                       ndim
      u64 * ndim                shape
      f64 * prod(shape)         row-major values
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DTTECKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(config: dict, arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<Q", len(blob)), blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes(order="C")]
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[int, dict, dict[str, np.ndarray]]:
    try:
        return _decode(buf)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None


def _decode(buf: bytes) -> tuple[int, dict, dict[str, np.ndarray]]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    config = json.loads(buf[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * size
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last array")
    return version, config, arrays


def save_checkpoint(path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(config, arrays))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    _, config, arrays = decode_checkpoint(Path(path).read_bytes())
    return config, arrays
