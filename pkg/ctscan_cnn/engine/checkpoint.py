"""Portable checkpoint files.

Layout (all integers little-endian):

    magic        4 bytes   b"LCDN"
    version      u16       FORMAT_VERSION
    fingerprint  32 bytes  SHA-256 digest of the run config
    count        u32       number of tensor records
    record × count:
        name_len u16, name (UTF-8)
        dtype    u8        1 = float32, 2 = float64
        rank     u8
        extents  u32 × rank
        data     product(extents) little-endian floats

A file must end exactly after the last record.
"""

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from ..errors import IntegrityError, UnsupportedVersionError
from .layers import ModelParams

logger = logging.getLogger(__name__)

MAGIC = b"LCDN"
FORMAT_VERSION = 1
_DTYPE_TAGS: Dict[int, np.dtype] = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_FOR_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


@dataclass
class Checkpoint:
    params: ModelParams
    fingerprint: str            # hex
    version: int = FORMAT_VERSION


class _Reader:
    """Cursor over the file bytes; every short read is an integrity error."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise IntegrityError(f"truncated checkpoint while reading {what}", self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def encode_checkpoint(params: ModelParams, fingerprint: str) -> bytes:
    digest = bytes.fromhex(fingerprint)
    if len(digest) != 32:
        raise ValueError("fingerprint must be a 64-character hex SHA-256 digest")

    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), digest, struct.pack("<I", len(params))]
    for name, tensor in params.items():
        tag = _TAG_FOR_DTYPE.get(tensor.dtype)
        if tag is None:
            raise ValueError(f"{name}: unsupported dtype {tensor.dtype}")
        encoded_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded_name)))
        parts.append(encoded_name)
        parts.append(struct.pack("<BB", tag, tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor, dtype=_DTYPE_TAGS[tag]).tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise IntegrityError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = reader.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})", 4)
    fingerprint = reader.take(32, "fingerprint").hex()
    (count,) = reader.unpack("<I", "record count")

    params: ModelParams = {}
    for _ in range(count):
        record_start = reader.offset
        (name_len,) = reader.unpack("<H", "name length")
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise IntegrityError("tensor name is not valid UTF-8", record_start)
        tag, rank = reader.unpack("<BB", f"{name} header")
        if tag not in _DTYPE_TAGS:
            raise IntegrityError(f"{name}: unknown dtype tag {tag}", reader.offset - 2)
        if not 1 <= rank <= 4:
            raise IntegrityError(f"{name}: invalid rank {rank}", reader.offset - 1)
        extents = reader.unpack(f"<{rank}I", f"{name} extents")
        if any(e < 1 for e in extents):
            raise IntegrityError(f"{name}: zero extent in {list(extents)}", reader.offset)
        dtype = _DTYPE_TAGS[tag]
        raw = reader.take(int(np.prod(extents)) * dtype.itemsize, f"{name} data")
        if name in params:
            raise IntegrityError(f"duplicate tensor {name}", record_start)
        params[name] = np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(extents)

    if reader.offset != len(data):
        raise IntegrityError(f"{len(data) - reader.offset} unexpected trailing bytes", reader.offset)
    return Checkpoint(params=params, fingerprint=fingerprint, version=version)


def checkpoint_save(params: ModelParams, path, fingerprint: str) -> None:
    """Write atomically: a temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(params, fingerprint))
    os.replace(tmp, path)
    logger.info("Saved checkpoint %s (%d tensors)", path.name, len(params))


def checkpoint_load(path, expected_fingerprint: Optional[str] = None) -> Checkpoint:
    """Load a checkpoint; a fingerprint mismatch is logged, not raised."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = decode_checkpoint(data)
    if expected_fingerprint is not None and ckpt.fingerprint != expected_fingerprint:
        logger.warning("Checkpoint %s was written under a different config "
                       "(fingerprint %s…, config %s…); evaluating anyway",
                       path.name, ckpt.fingerprint[:12], expected_fingerprint[:12])
    return ckpt
