"""Binary artifact container shared by datasets, pools, NIQE models and checkpoints.

Byte layout (all integers little-endian)::

    magic          5 bytes   ASCII, one per artifact kind (see MAGICS)
    version        uint16    format major version
    manifest_len   uint32
    manifest       bytes     UTF-8 JSON, sorted keys, compact separators
    digest         32 bytes  SHA-256 over manifest bytes + tensor block
    n_tensors      uint32
    tensor block   repeated:
        name_len   uint16
        name       bytes     UTF-8
        dtype      uint8     code from DTYPES
        ndim       uint8
        dims       uint32 * ndim
        data       raw little-endian, C order

Files are written to a sibling temp file and renamed into place.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import LoadError

FORMAT_VERSION = 1

# Registry of every magic this package writes.
MAGICS: dict[str, bytes] = {
    "dataset": b"CCGM1",
    "niqe_model": b"NIQE1",
    "negative_pool": b"NPOL1",
    "checkpoint": b"CKPT1",
    "eval_net": b"EVAL1",
    "fake_set": b"FAKE1",
    "batch_dump": b"DBAT1",
}

DTYPES: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
    4: np.dtype("<i4"),
}
_DTYPE_CODES = {(dt.kind, dt.itemsize): code for code, dt in DTYPES.items()}


class ArtifactError(LoadError):
    """Base class for load failures."""


class FormatError(ArtifactError):
    pass


class CorruptionError(ArtifactError):
    pass


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _tensor_block(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _DTYPE_CODES.get((arr.dtype.kind, arr.dtype.itemsize))
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        arr = np.ascontiguousarray(arr, dtype=DTYPES[code])
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def encode(kind: str, manifest: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> bytes:
    magic = MAGICS[kind]
    man = canonical_json(dict(manifest))
    block = _tensor_block(tensors)
    digest = hashlib.sha256(man + block).digest()
    head = magic + struct.pack("<HI", FORMAT_VERSION, len(man))
    return head + man + digest + block


def decode(kind: str, data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    magic = MAGICS[kind]
    if data[:5] != magic:
        raise FormatError(
            f"expected a {kind} artifact (magic {magic.decode()}), found {data[:5]!r}"
        )
    if len(data) < 11:
        raise FormatError(f"truncated {kind} artifact")
    version, man_len = struct.unpack_from("<HI", data, 5)
    if version > FORMAT_VERSION:
        raise FormatError(f"{kind} artifact has format version {version}; this build reads <= {FORMAT_VERSION}")
    pos = 11
    man = data[pos:pos + man_len]
    pos += man_len
    digest = data[pos:pos + 32]
    pos += 32
    block = data[pos:]
    if hashlib.sha256(man + block).digest() != digest:
        raise CorruptionError(f"{kind} artifact failed its integrity check")
    manifest = json.loads(man.decode("utf-8"))

    try:
        tensors = _read_tensors(block)
    except (struct.error, KeyError, ValueError) as e:
        raise FormatError(f"malformed tensor block in {kind} artifact: {e}") from None
    return manifest, tensors


def _read_tensors(block: bytes) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    (count,) = struct.unpack_from("<I", block, 0)
    off = 4
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", block, off)
        off += 2
        name = block[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", block, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", block, off)
        off += 4 * ndim
        dt = DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(block, dtype=dt, count=int(np.prod(shape, dtype=np.int64)), offset=off)
        tensors[name] = arr.reshape(shape).copy()
        off += nbytes
    if off != len(block):
        raise ValueError(f"{len(block) - off} trailing bytes")
    return tensors


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save(path, kind: str, manifest: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(kind, manifest, tensors))


def load(path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode(kind, fh.read())
