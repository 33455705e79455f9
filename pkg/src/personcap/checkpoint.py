"""Binary checkpoint files for named float64 tensors.

Layout (little-endian throughout):

    magic   4 bytes  ``HCPT``
    version u16      currently 1
    count   u32      number of tensors
    then per tensor, in file order:
        name_len u16, name bytes (utf-8)
        ndim     u16
        dims     u32 * ndim
        payload  float64 * prod(dims), row-major

Write order follows dict insertion order, so identical param dicts produce
byte-identical files.  ``FormatError`` names the offset or field that broke.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"HCPT"
VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr).astype("<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<H", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    r = _Reader(blob, str(path))
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, expected {MAGIC!r}")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<H")
        dims = r.unpack(f"<{ndim}I")
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = r.take(8 * n)
        arr = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        if name in out:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        out[name] = arr
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes after tensor {count}")
    return out


class _Reader:
    def __init__(self, blob: bytes, label: str):
        self.blob = blob
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.label}: truncated at byte {self.pos} "
                              f"(needed {n} more)")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
