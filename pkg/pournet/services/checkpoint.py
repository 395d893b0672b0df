"""Bit-exact parameter checkpoints.

Layout (little-endian): b"POUR", version u8, count u32, then per parameter: name length
u16, UTF-8 name, rank u8, one u32 per extent, float32 payload in C order.
"""

import hashlib
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from pournet.exceptions import CheckpointFormatError

MAGIC = b"POUR"
VERSION = 1


def encode_checkpoint(arrays: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(arrays))]
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointFormatError(f"parameter name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {raw[:4]!r}")
    try:
        version, count = struct.unpack_from("<BI", raw, 4)
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported version {version}")
        offset = 9
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if offset + nbytes > len(raw):
                raise CheckpointFormatError(f"payload of '{name}' is truncated")
            arrays[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset)
            arrays[name] = arrays[name].reshape(shape).astype(np.float32)
            offset += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"truncated or corrupt checkpoint: {exc}") from exc
    if offset != len(raw):
        raise CheckpointFormatError(f"{len(raw) - offset} trailing bytes")
    return arrays


def save_checkpoint(arrays: Mapping[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(arrays))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read {path}: {exc}") from exc
    return decode_checkpoint(raw)


def checkpoint_digest(arrays: Mapping[str, np.ndarray]) -> str:
    """SHA-256 of the encoded checkpoint, for stage-independence checks."""
    return hashlib.sha256(encode_checkpoint(arrays)).hexdigest()
