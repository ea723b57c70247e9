"""Binary checkpoint container and structured-text helpers.

Checkpoint layout (little-endian)::

    b"UNCM"  u8 version  4-byte section tag
    u32 len + utf-8 config text (key=value lines)
    u32 tensor count
    per tensor: u16 name len, name, u8 ndim, u32 dims..., f64 data
"""

from __future__ import annotations

import io
import json
import math
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"UNCM"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """A file does not follow its container format."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.what}: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, count: int, dtype: str) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * width), dtype=dtype).copy()


def format_kv(values: dict) -> str:
    return "".join(f"{k}={values[k]}\n" for k in values)


def parse_kv(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_checkpoint(path, section: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    tag = section.encode("ascii")
    if len(tag) != 4:
        raise ValueError(f"section tag must be 4 ASCII bytes, got {section!r}")
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<B", CHECKPOINT_VERSION))
    out.write(tag)
    cfg = format_kv(config).encode()
    out.write(struct.pack("<I", len(cfg)))
    out.write(cfg)
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    Path(path).write_bytes(out.getvalue())


def read_checkpoint(path, section: str | None = None):
    """Return ``(section, config_dict, tensors)``."""
    r = _Reader(Path(path).read_bytes(), f"checkpoint {path}")
    if r.take(4) != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<B")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    tag = r.take(4).decode("ascii")
    if section is not None and tag != section:
        raise FormatError(f"{path}: section {tag!r}, expected {section!r}")
    (n,) = r.unpack("<I")
    config = parse_kv(r.take(n).decode())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        tensors[name] = r.array(int(np.prod(shape)) if shape else 1, "<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return tag, config, tensors


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else repr(v)
    if isinstance(value, np.integer):
        return int(value)
    return value


def dump_report(fields: dict, path=None) -> str:
    """Serialize a report to deterministic JSON text (sorted keys, full precision)."""
    text = json.dumps(_jsonable(fields), indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def load_report(path_or_text) -> dict:
    text = path_or_text
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and not path_or_text.lstrip().startswith("{")):
        text = Path(path_or_text).read_text()
    return json.loads(text)
