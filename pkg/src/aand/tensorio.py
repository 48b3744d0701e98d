"""Binary tensor container and multi-tensor checkpoint files.

Container layout (all little-endian)::

    b"AANDTNS1" | rank:u32 | dims:u32 * rank | payload:f32 * prod(dims)

Checkpoint layout::

    b"AANDCKP1" | count:u32 | count * (name_len:u32, name:utf-8, offset:u64) | containers

Offsets are absolute byte positions of each container in the file.
"""

from __future__ import annotations

import io
import os
import re
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

TENSOR_MAGIC = b"AANDTNS1"
CHECKPOINT_MAGIC = b"AANDCKP1"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed or truncated tensor/checkpoint file."""


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if any(d <= 0 for d in arr.shape):
        raise FormatError(f"tensor dims must be positive, got {arr.shape}")
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one container starting at ``offset``; returns (array, end offset)."""
    end = offset + len(TENSOR_MAGIC)
    if buf[offset:end] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic at byte {offset}")
    if len(buf) < end + 4:
        raise FormatError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", buf, end)
    end += 4
    if len(buf) < end + 4 * rank:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}I", buf, end)
    end += 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    nbytes = 4 * count
    if len(buf) < end + nbytes:
        raise FormatError(f"truncated tensor payload: need {nbytes} bytes, have {len(buf) - end}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=end).astype(np.float32).reshape(dims)
    return arr, end + nbytes


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, arr: np.ndarray) -> None:
    atomic_write(path, encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    names = list(tensors)
    encoded_names = [n.encode("utf-8") for n in names]
    header_len = len(CHECKPOINT_MAGIC) + 4 + sum(4 + len(n) + 8 for n in encoded_names)
    blobs = [encode_tensor(tensors[n]) for n in names]
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", len(names)))
    offset = header_len
    for name, blob in zip(encoded_names, blobs):
        out.write(struct.pack("<I", len(name)))
        out.write(name)
        out.write(struct.pack("<Q", offset))
        offset += len(blob)
    for blob in blobs:
        out.write(blob)
    return out.getvalue()


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)
    try:
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        records = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen]
            if len(name) != nlen:
                raise FormatError("truncated checkpoint manifest")
            pos += nlen
            (offset,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            records.append((name.decode("utf-8"), offset))
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint manifest: {exc}") from None
    out: dict[str, np.ndarray] = {}
    end = pos
    for name, offset in records:
        arr, end = decode_tensor(buf, offset)
        out[name] = arr
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after last tensor")
    return out


def save_checkpoint_file(path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, encode_checkpoint(tensors))


def load_checkpoint_file(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def text_to_array(text: str) -> np.ndarray:
    """Store short text (hashes, identifiers) as a float32 vector of byte values."""
    raw = text.encode("utf-8") or b"\0"
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def array_to_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8).tolist()).rstrip(b"\0").decode("utf-8")


def int_to_array(value: int) -> np.ndarray:
    """Exact encoding of a non-negative integer < 2**48 as three 16-bit limbs."""
    if not 0 <= value < 2 ** 48:
        raise ValueError(f"integer out of range: {value}")
    return np.array([(value >> s) & 0xFFFF for s in (0, 16, 32)], dtype=np.float32)


def array_to_int(arr: np.ndarray) -> int:
    limbs = [int(v) for v in np.asarray(arr).reshape(-1)]
    return limbs[0] | (limbs[1] << 16) | (limbs[2] << 32)


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM of an H x W array already scaled to [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w = img.shape
    pixels = np.round(img * 255).astype(np.uint8)
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if m is None:
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    data = buf[m.end():]
    if len(data) < w * h or maxval != 255:
        raise FormatError(f"{path}: truncated or unsupported PGM")
    return np.frombuffer(data[:w * h], dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0
