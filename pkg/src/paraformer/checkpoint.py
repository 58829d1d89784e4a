"""``PFCK`` checkpoint files.

Layout, all integers unsigned 32-bit little-endian::

    b"PFCK" | version | spec_len | spec text (UTF-8, key=value lines)
    then per parameter, in model order:
        name_len | name | rank | dim_0 .. dim_{rank-1} | values

Values are little-endian f32 or f64 according to the model spec's ``precision`` field.
The parameter list runs to end of file; its names and shapes must match the
model built from that model spec.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .models import Model, ModelSpec, build

MAGIC = b"PFCK"
VERSION = 1
_VALUE_DTYPE = {"f32": "<f4", "f64": "<f8"}


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def dumps(model: Model) -> bytes:
    spec = model.spec
    vdt = _VALUE_DTYPE[spec.precision]
    text = spec.to_text().encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(text)), text]
    for name, t in model.named_parameters():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype=vdt).tobytes())
    return b"".join(out)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(dumps(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def left(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int, what: str) -> bytes:
        if self.left() < n:
            raise CheckpointFormatError(f"truncated {what}: need {n} bytes, {self.left()} left", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def loads(buf: bytes) -> Model:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}; this reader handles {VERSION}", 4)
    spec_len = r.u32("spec length")
    spec_at = r.pos
    try:
        spec = ModelSpec.from_text(r.take(spec_len, "model spec").decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"unreadable model spec: {exc}", spec_at) from exc
    model = build(spec)
    vdt = np.dtype(_VALUE_DTYPE[spec.precision])
    for want_name, t in model.named_parameters():
        if r.left() == 0:
            raise CheckpointFormatError(f"file ends before parameter {want_name!r}", r.pos)
        at = r.pos
        name = r.take(r.u32(f"name length of {want_name!r}"), f"name of {want_name!r}").decode("utf-8", "replace")
        if name != want_name:
            raise CheckpointFormatError(f"expected parameter {want_name!r}, found {name!r}", at)
        rank = r.u32(f"rank of {name!r}")
        dims = tuple(r.u32(f"dims of {name!r}") for _ in range(rank))
        if dims != t.shape:
            raise CheckpointFormatError(f"parameter {name!r} has shape {dims}, model expects {t.shape}", at)
        n = int(np.prod(dims, dtype=np.int64)) * vdt.itemsize
        raw = r.take(n, f"values of {name!r}")
        t.data = np.frombuffer(raw, dtype=vdt).reshape(dims).astype(spec.dtype)
    if r.left():
        raise CheckpointFormatError(f"{r.left()} unexpected trailing bytes", r.pos)
    return model


def load_checkpoint(path) -> Model:
    return loads(Path(path).read_bytes())
