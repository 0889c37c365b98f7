"""Reader/writer for the big-endian IDX format used by the MNIST files.

Layout::

    offset 0  uint32 BE  magic = 0x00000800 | ndim  (type byte 0x08 = unsigned byte)
    offset 4  uint32 BE  size of dimension 0
    ...       uint32 BE  size of dimension ndim-1
    then      prod(dims) unsigned bytes, row-major

Only the two MNIST layouts are accepted: 0x00000801 (labels, 1-D) and
0x00000803 (images, 3-D).
"""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, LengthError

LABELS_MAGIC = 0x00000801
IMAGES_MAGIC = 0x00000803
_ACCEPTED = {LABELS_MAGIC: 1, IMAGES_MAGIC: 3}


def parse_idx(data: bytes) -> tuple[tuple[int, ...], np.ndarray]:
    """Parse an IDX byte string into ``(shape, uint8 array of that shape)``."""
    if len(data) < 4:
        raise LengthError(f"IDX header truncated: expected at least 4 bytes, got {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in _ACCEPTED:
        raise FormatError(f"unsupported IDX magic 0x{magic:08x} (expected 0x{LABELS_MAGIC:08x} "
                          f"or 0x{IMAGES_MAGIC:08x})")
    ndim = _ACCEPTED[magic]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise LengthError(f"IDX header truncated: expected {header} bytes, got {len(data)}")
    shape = struct.unpack(f">{ndim}I", data[4:header])
    expected = header + int(np.prod(shape, dtype=np.int64))
    if len(data) != expected:
        raise LengthError(f"IDX payload length mismatch: expected {expected} bytes, got {len(data)}")
    values = np.frombuffer(data, dtype=np.uint8, offset=header).reshape(shape)
    return tuple(int(s) for s in shape), values


def serialize_idx(values: np.ndarray) -> bytes:
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        raise FormatError(f"IDX writer handles uint8 only, got {arr.dtype}")
    magic = 0x00000800 | arr.ndim
    if magic not in _ACCEPTED:
        raise FormatError(f"IDX writer handles 1-D or 3-D arrays, got {arr.ndim}-D")
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes(order="C")


def read_idx_file(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw)[1]


def load_mnist_idx(images_path: str | Path, labels_path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Images as float64 in [0, 1] with shape (N, 28, 28) and int64 labels."""
    images = read_idx_file(images_path)
    labels = read_idx_file(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError(f"expected 3-D images and 1-D labels, got {images.shape} and {labels.shape}")
    if images.shape[0] != labels.shape[0]:
        raise LengthError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)
