"""Bit-exact tensor containers for checkpoints and registries.

Layout (all integers little-endian)::

    magic        4 bytes   b"SPTW" (checkpoint) or b"SPTR" (registry)
    version      u16
    digest       32 bytes  sha256 of the model config's canonical JSON
    config       u32 length + UTF-8 canonical JSON document
    count        u32 number of tensors
    tensors      name (u32 length + UTF-8), rank u8, dims u32 x rank, f32 data
    crc          u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .model import BaseModel, ModelConfig

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"SPTW"
REGISTRY_MAGIC = b"SPTR"


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_container(magic: bytes, digest: str, config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    raw = bytes.fromhex(digest)
    if len(raw) != 32:
        raise FormatError("config digest must be 32 bytes")
    buf.write(raw)
    buf.write(_text(canonical_json(config)))
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.ndim > 255:
            raise FormatError(f"tensor {name!r} has too many dimensions")
        buf.write(_text(name))
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("container ended unexpectedly")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode_container(data: bytes, magic: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    if len(data) < 4 + 2 + 32 + 4 + 4 + 4:
        raise FormatError("container too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checksum mismatch: file is corrupted")
    r = _Reader(body)
    if r.take(4) != magic:
        raise FormatError(f"bad magic, expected {magic!r}")
    (version,) = struct.unpack("<H", r.take(2))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    digest = r.take(32).hex()
    config = json.loads(r.text())
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.text()
        (rank,) = struct.unpack("<B", r.take(1))
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float64)
    if r.pos != len(body):
        raise FormatError("trailing bytes after tensor section")
    return digest, config, tensors


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(model: BaseModel, provenance: dict | None = None) -> bytes:
    cfg = model.config
    doc = {"model": cfg.to_dict(), "provenance": provenance or {}}
    return encode_container(CHECKPOINT_MAGIC, cfg.digest(), doc, model.state())


def save_checkpoint(path: str | Path, model: BaseModel, provenance: dict | None = None) -> None:
    atomic_write(path, checkpoint_bytes(model, provenance))


def load_checkpoint(path: str | Path) -> tuple[BaseModel, dict]:
    """Load a frozen model and its provenance document."""
    digest, doc, tensors = decode_container(Path(path).read_bytes(), CHECKPOINT_MAGIC)
    cfg = ModelConfig.from_dict(doc["model"])
    if cfg.digest() != digest:
        raise FormatError("config digest in header does not match the embedded config")
    return BaseModel(cfg, tensors).freeze(), doc.get("provenance", {})


def checkpoint_digest(path: str | Path) -> str:
    digest, _, _ = decode_container(Path(path).read_bytes(), CHECKPOINT_MAGIC)
    return digest
