"""Binary tensor and checkpoint container formats.

Two little-endian formats live here:

``.dnt`` tensor file
    magic ``DNT1`` | dtype code u32 | rank u32 | dims u32 each |
    row-major payload | CRC32 u32 over all preceding bytes.
    Tensors on disk are float32 only.

``.dnfc`` checkpoint container
    magic ``DNFC`` | version u32 | entry count u32 | entries |
    CRC32 u32 over all preceding bytes.
    Each entry: name length u32 | name utf-8 | dtype code u32 | rank u32 |
    dims u32 each | payload. Entries keep insertion order, so a
    save -> load -> save round trip is byte-identical.

All writes are atomic (temp file in the target directory + rename).
"""

import os
import struct
import zlib

import numpy as np

from .errors import DataFormatError

TENSOR_MAGIC = b"DNT1"
CHECKPOINT_MAGIC = b"DNFC"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
    3: np.dtype("<i8"),
}
_CODE_FOR_DTYPE = {v: k for k, v in _DTYPE_CODES.items()}
_MAX_RANK = 8


def _code_for(arr):
    dt = np.dtype(arr.dtype).newbyteorder("<") if arr.dtype.itemsize > 1 else np.dtype(arr.dtype)
    code = _CODE_FOR_DTYPE.get(np.dtype(dt))
    if code is None:
        raise DataFormatError(f"unsupported dtype {arr.dtype}")
    return code


def atomic_write_bytes(path, data):
    """Write bytes to path via a same-directory temp file and rename."""
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


class _Reader:
    """Cursor over a byte buffer that reports offsets in format errors."""

    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise DataFormatError(
                f"truncated while reading {what}", path=self.path, offset=self.pos
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def _check_crc(data, path):
    if len(data) < 4:
        raise DataFormatError("file shorter than its CRC32 trailer", path=path, offset=0)
    stored = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise DataFormatError(
            f"CRC32 mismatch (stored {stored:#010x}, computed {actual:#010x})",
            path=path,
            offset=len(data) - 4,
        )
    return data[:-4]


def _encode_array(arr):
    arr = np.ascontiguousarray(arr)
    code = _code_for(arr)
    if arr.ndim > _MAX_RANK:
        raise DataFormatError(f"rank {arr.ndim} exceeds maximum {_MAX_RANK}")
    header = struct.pack("<II", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype).tobytes()
    return header + payload


def _decode_array(reader, what):
    code = reader.u32(f"{what} dtype")
    if code not in _DTYPE_CODES:
        raise DataFormatError(
            f"unknown dtype code {code} for {what}", path=reader.path, offset=reader.pos - 4
        )
    rank = reader.u32(f"{what} rank")
    if rank > _MAX_RANK:
        raise DataFormatError(
            f"rank {rank} exceeds maximum {_MAX_RANK} for {what}",
            path=reader.path,
            offset=reader.pos - 4,
        )
    dims = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"{what} dims"))
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = reader.take(count * dtype.itemsize, f"{what} payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.copy()


def write_tensor(path, arr):
    """Write a float32 array as a .dnt file."""
    arr = np.asarray(arr)
    if not np.issubdtype(arr.dtype, np.floating) and not np.issubdtype(arr.dtype, np.bool_):
        raise DataFormatError(f"tensor files hold float data, got {arr.dtype}")
    body = TENSOR_MAGIC + _encode_array(arr.astype(np.float32))
    crc = struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    atomic_write_bytes(path, body + crc)


def read_tensor(path):
    """Read a .dnt file, verifying magic, shape consistency, and CRC."""
    with open(path, "rb") as fh:
        data = fh.read()
    body = _check_crc(data, path)
    reader = _Reader(body, path)
    magic = reader.take(4, "magic")
    if magic != TENSOR_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}", path=path, offset=0)
    arr = _decode_array(reader, "tensor")
    if reader.pos != len(body):
        raise DataFormatError(
            f"{len(body) - reader.pos} trailing bytes after payload", path=path, offset=reader.pos
        )
    if arr.dtype != np.float32:
        raise DataFormatError(f"tensor files hold float32, got {arr.dtype}", path=path)
    return arr


def write_arrays(path, arrays, version=CHECKPOINT_VERSION):
    """Write an ordered name -> ndarray mapping as a .dnfc container."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", version, len(arrays))]
    for name, arr in arrays.items():
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(_encode_array(np.asarray(arr)))
    body = b"".join(chunks)
    crc = struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    atomic_write_bytes(path, body + crc)


def read_arrays(path, expect_version=CHECKPOINT_VERSION):
    """Read a .dnfc container back into an ordered name -> ndarray dict."""
    with open(path, "rb") as fh:
        data = fh.read()
    body = _check_crc(data, path)
    reader = _Reader(body, path)
    magic = reader.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(
            f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", path=path, offset=0
        )
    version = reader.u32("version")
    if version != expect_version:
        raise DataFormatError(
            f"format version {version} not supported (expected {expect_version})",
            path=path,
            offset=4,
        )
    count = reader.u32("entry count")
    arrays = {}
    for i in range(count):
        name_len = reader.u32(f"entry {i} name length")
        name = reader.take(name_len, f"entry {i} name").decode("utf-8")
        arrays[name] = _decode_array(reader, f"entry {i} ({name})")
    if reader.pos != len(body):
        raise DataFormatError(
            f"{len(body) - reader.pos} trailing bytes after last entry",
            path=path,
            offset=reader.pos,
        )
    return arrays
