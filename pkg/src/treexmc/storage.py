"""Deterministic little-endian binary serialization for sparse matrices.

Each ``.bin`` file is: magic, version, endianness tag, shape/nnz header,
CSR payload (int64 offsets, int64 indices, float64 values), CRC32 footer
over everything after the magic. Model and ensemble directories pair these
files with a sorted-keys ``meta.json`` so identical inputs produce
byte-identical artifacts.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import StorageError
from .sparse import SparseMatrix

MAGIC = b"TXMCSPR1"
VERSION = 1
ENDIAN_TAG = 0x01020304
_HEADER = struct.Struct("<II qqq")  # version, endian tag, rows, cols, nnz


def matrix_to_bytes(m: SparseMatrix) -> bytes:
    body = _HEADER.pack(VERSION, ENDIAN_TAG, m.rows, m.cols, m.nnz)
    body += m.indptr.astype("<i8", copy=False).tobytes()
    body += m.indices.astype("<i8", copy=False).tobytes()
    body += m.values.astype("<f8", copy=False).tobytes()
    return MAGIC + body + struct.pack("<I", zlib.crc32(body))


def matrix_from_bytes(buf: bytes) -> SparseMatrix:
    if len(buf) < len(MAGIC) + _HEADER.size + 4:
        raise StorageError(f"file too short ({len(buf)} bytes)")
    if buf[: len(MAGIC)] != MAGIC:
        raise StorageError("bad magic string")
    version, endian, rows, cols, nnz = _HEADER.unpack_from(buf, len(MAGIC))
    if version != VERSION:
        raise StorageError(f"unsupported format version {version}")
    if endian != ENDIAN_TAG:
        raise StorageError("endianness tag mismatch")
    if rows < 0 or cols < 0 or nnz < 0:
        raise StorageError("negative header field")
    expected = len(MAGIC) + _HEADER.size + 8 * (rows + 1) + 16 * nnz + 4
    if len(buf) != expected:
        raise StorageError(f"length mismatch: expected {expected} bytes, got {len(buf)}")
    body, crc = buf[len(MAGIC):-4], struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(body) != crc:
        raise StorageError("checksum failure")
    off = len(MAGIC) + _HEADER.size
    indptr = np.frombuffer(buf, dtype="<i8", count=rows + 1, offset=off)
    off += 8 * (rows + 1)
    indices = np.frombuffer(buf, dtype="<i8", count=nnz, offset=off)
    off += 8 * nnz
    values = np.frombuffer(buf, dtype="<f8", count=nnz, offset=off)
    return SparseMatrix(rows, cols, indptr.copy(), indices.copy(), values.copy())


def save_matrix(m: SparseMatrix, path) -> None:
    Path(path).write_bytes(matrix_to_bytes(m))


def load_matrix(path) -> SparseMatrix:
    return matrix_from_bytes(Path(path).read_bytes())


def save_meta(meta: dict, path) -> None:
    Path(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_meta(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StorageError(f"cannot read metadata {path}: {exc}") from None
