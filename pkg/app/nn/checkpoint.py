"""
Versioned binary checkpoints.

Layout (little-endian): 8-byte magic, uint32 version, 32-byte config digest,
uint32 blob count, then per blob: uint32 name length, UTF-8 name, uint32 rank,
rank x uint32 dims, float64 values in C order.
"""
import struct
from pathlib import Path

import numpy as np

from app.utils.errors import CheckpointError, InputOutputError

MAGIC = b'BEVRGCKP'
VERSION = 1
DIGEST_BYTES = 32


def encode_checkpoint(blobs, digest):
    if len(digest) != DIGEST_BYTES:
        raise CheckpointError(f"config digest must be {DIGEST_BYTES} bytes")
    parts = [MAGIC, struct.pack('<I', VERSION), digest, struct.pack('<I', len(blobs))]
    for name, value in blobs.items():
        raw_name = name.encode('utf-8')
        array = np.ascontiguousarray(value, dtype='<f8')
        parts.append(struct.pack('<I', len(raw_name)) + raw_name)
        parts.append(struct.pack(f'<I{array.ndim}I', array.ndim, *array.shape))
        parts.append(array.tobytes())
    return b''.join(parts)


def decode_checkpoint(raw, expected_digest=None):
    """Parse checkpoint bytes into (blobs dict, digest)."""
    try:
        offset = 0

        def take(fmt):
            nonlocal offset
            values = struct.unpack_from(fmt, raw, offset)
            offset += struct.calcsize(fmt)
            return values

        if raw[:len(MAGIC)] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        offset = len(MAGIC)
        (version,) = take('<I')
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        digest = bytes(raw[offset:offset + DIGEST_BYTES])
        offset += DIGEST_BYTES
        if expected_digest is not None and digest != expected_digest:
            raise CheckpointError("checkpoint was written for a different grid/model configuration")
        (count,) = take('<I')
        blobs = {}
        for _ in range(count):
            (name_len,) = take('<I')
            name = bytes(raw[offset:offset + name_len]).decode('utf-8')
            offset += name_len
            (rank,) = take('<I')
            shape = take(f'<{rank}I')
            size = int(np.prod(shape, dtype=np.int64))
            if offset + 8 * size > len(raw):
                raise CheckpointError(f"checkpoint truncated inside blob '{name}'")
            blobs[name] = np.frombuffer(raw, dtype='<f8', count=size, offset=offset).reshape(shape).astype(np.float64)
            offset += 8 * size
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from e
    if offset != len(raw):
        raise CheckpointError("trailing bytes after the last checkpoint blob")
    return blobs, digest


def save_checkpoint(path, blobs, digest):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(blobs, digest))
    except OSError as e:
        raise InputOutputError(path, e.strerror or str(e)) from e


def load_checkpoint(path, expected_digest=None):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise InputOutputError(path, e.strerror or str(e)) from e
    blobs, _ = decode_checkpoint(raw, expected_digest)
    return blobs
