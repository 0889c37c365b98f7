"""Binary cache for generated multi-domain tasks.

All integers are little-endian.

    b"ADRD"                 magic
    uint32                  version (1)
    uint32                  number of domains D
    uint32                  d_in
    uint32                  num_classes
    int32                   target index, -1 if none
    uint32 + utf-8 bytes    task name
    D times:
        int32               domain id
        uint32 + utf-8      domain name
        uint32              N
        N * d_in float64    inputs, row-major
        N int64             labels
        N int64             index
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, LengthError
from .domains import DomainDataset, MultiDomainTask

MAGIC = b"ADRD"
VERSION = 1


def _put_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise LengthError(f"container truncated: need {self.pos + n} bytes, have {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def dumps_task(task: MultiDomainTask) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    target = -1 if task.target_index is None else task.target_index
    buf.write(struct.pack("<IIIIi", VERSION, len(task.domains), task.d_in, task.num_classes, target))
    _put_str(buf, task.name)
    for d in task.domains:
        buf.write(struct.pack("<i", d.domain_id))
        _put_str(buf, d.domain_name)
        buf.write(struct.pack("<I", len(d)))
        buf.write(d.inputs.astype("<f8").tobytes())
        buf.write(d.labels.astype("<i8").tobytes())
        buf.write(d.index.astype("<i8").tobytes())
    return buf.getvalue()


def loads_task(data: bytes) -> MultiDomainTask:
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"not a dataset container: magic {magic!r}")
    version, n_dom, d_in, n_cls, target = r.unpack("<IIIIi")
    if version != VERSION:
        raise FormatError(f"unsupported dataset container version {version}")
    name = r.string()
    domains = []
    for _ in range(n_dom):
        (dom_id,) = r.unpack("<i")
        dom_name = r.string()
        (n,) = r.unpack("<I")
        x = r.array("<f8", n * d_in).reshape(n, d_in)
        y = r.array("<i8", n)
        idx = r.array("<i8", n)
        domains.append(DomainDataset(dom_id, dom_name, x, y, n_cls, index=idx))
    if r.pos != len(data):
        raise LengthError(f"{len(data) - r.pos} trailing bytes after dataset container")
    return MultiDomainTask(domains, None if target < 0 else target, name)


def save_task(task: MultiDomainTask, path: str | Path) -> None:
    Path(path).write_bytes(dumps_task(task))


def load_task(path: str | Path) -> MultiDomainTask:
    return loads_task(Path(path).read_bytes())
