"""Deterministic on-disk formats and provenance helpers."""

from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

MAGIC = b"LESIONLAB-ARRAYS\n"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def write_arrays(path, arrays: dict, meta: dict) -> str:
    """Write named float64/int64 arrays plus a JSON header. Returns the payload hash.

    Layout: magic line, 8-byte little-endian header length, UTF-8 JSON header,
    then the raw little-endian arrays in header order. No timestamps.
    """
    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        index.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    digest = sha256_bytes(payload)
    header = canonical_json({"version": FORMAT_VERSION, "meta": meta, "arrays": index,
                             "payload_sha256": digest}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        f.write(payload)
    return digest


def read_arrays(path):
    """Inverse of :func:`write_arrays`; verifies the payload hash."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise FormatError(f"{path}: not a lesionlab array file")
    pos = len(MAGIC)
    hlen = int.from_bytes(blob[pos:pos + 8], "little")
    pos += 8
    header = json.loads(blob[pos:pos + hlen])
    payload = blob[pos + hlen:]
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')}")
    if sha256_bytes(payload) != header["payload_sha256"]:
        raise FormatError(f"{path}: payload hash mismatch")
    arrays = {}
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=entry["dtype"], count=n, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header["meta"]


class LockError(RuntimeError):
    pass


@contextmanager
def dir_lock(directory):
    """Exclusive lock file inside ``directory``; removed on exit."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{directory} is locked by another command ({lock})") from None
    try:
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)
