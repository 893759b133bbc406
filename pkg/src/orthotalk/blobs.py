"""Raw tensor blobs: little-endian float32, row-major, no header.

Shapes and checksums live in whichever manifest references the blob.
"""

import hashlib
from pathlib import Path

import numpy as np

BLOB_DTYPE = np.dtype("<f4")


class ChecksumError(IOError):
    pass


def blob_bytes(array) -> bytes:
    return np.ascontiguousarray(np.asarray(array), dtype=BLOB_DTYPE).tobytes(order="C")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_blob(path, array) -> dict:
    """Write ``array`` and return its index record (shape, dtype, sha256)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = blob_bytes(array)
    path.write_bytes(data)
    return {"shape": list(np.shape(array)), "dtype": "float32", "sha256": sha256_hex(data)}


def read_blob(path, shape, sha256=None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing blob {path}")
    data = path.read_bytes()
    if sha256 is not None and sha256_hex(data) != sha256:
        raise ChecksumError(f"checksum mismatch for {path}")
    expected = int(np.prod(shape)) * BLOB_DTYPE.itemsize
    if len(data) != expected:
        raise ChecksumError(f"{path}: {len(data)} bytes, expected {expected} for shape {shape}")
    return np.frombuffer(data, dtype=BLOB_DTYPE).reshape(shape).astype(np.float32)
