"""Binary tensor-record files (checkpoints and exported datasets).

Layout, all integers little-endian::

    b"DICO"  u32 version=1  u32 record_count
    record*: u32 name_len, name (UTF-8), u8 dtype (0=f32, 1=f64), u8 ndim,
             ndim x u64 dims, payload (little-endian, row-major)
    u32 meta_len, meta (UTF-8 ``key=value`` lines)
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DICO"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    def __init__(self, found: bytes):
        super().__init__(f"bad magic: expected {MAGIC!r}, found {found!r}")


class VersionMismatchError(CheckpointError):
    def __init__(self, found: int):
        super().__init__(f"version mismatch: file has version {found}, reader supports {VERSION}")


class TruncatedError(CheckpointError):
    def __init__(self, what: str):
        super().__init__(f"truncated payload while reading {what}")


def encode(records: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype} (only float32/float64)")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    text = "".join(f"{k}={v}\n" for k, v in (meta or {}).items()).encode("utf-8")
    out.append(struct.pack("<I", len(text)))
    out.append(text)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(what)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    r = _Reader(buf)
    magic = buf[:4]
    if magic != MAGIC:
        raise BadMagicError(magic)
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(version)
    (count,) = r.unpack("<I", "record count")
    records: dict[str, np.ndarray] = {}
    for i in range(count):
        (n,) = r.unpack("<I", f"record {i} name length")
        name = r.take(n, f"record {i} name").decode("utf-8")
        code, ndim = r.unpack("<BB", f"{name} header")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}Q", f"{name} dims")
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        payload = r.take(nbytes, f"{name} payload")
        records[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    (n,) = r.unpack("<I", "metadata length")
    text = r.take(n, "metadata").decode("utf-8")
    meta = {}
    for line in text.splitlines():
        if line:
            k, _, v = line.partition("=")
            meta[k] = v
    return records, meta


def write(path: str | Path, records, meta=None) -> None:
    Path(path).write_bytes(encode(records, meta))


def read(path: str | Path):
    return decode(Path(path).read_bytes())
