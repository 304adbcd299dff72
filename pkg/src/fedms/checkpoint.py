"""Checkpoint container.

Layout (little-endian)::

    b"FMSCKPT1" | u64 header_len | header (UTF-8 JSON, sorted keys)
    | array payloads in header order (<f4, row-major) | u32 crc32 of all preceding bytes

The header lists every array's name and shape, so truncation and bit flips are
both detected before anything is handed back to the caller.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IntegrityError

MAGIC = b"FMSCKPT1"
FORMAT_VERSION = 1
MODEL_PREFIX = "model/"


@dataclass
class Checkpoint:
    header: dict
    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def section(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k[len(prefix):], v) for k, v in self.arrays.items() if k.startswith(prefix))

    def parameter_count(self, prefix: str = MODEL_PREFIX) -> int:
        return sum(v.size for k, v in self.arrays.items() if k.startswith(prefix))

    def check_model(self, model_cfg: dict):
        saved = self.header.get("config", {}).get("model")
        if saved != model_cfg:
            diff = sorted(k for k in set(saved or {}) | set(model_cfg)
                          if (saved or {}).get(k) != model_cfg.get(k))
            raise ConfigError(f"checkpoint model geometry differs in: {', '.join(diff)}")


def encode(ckpt: Checkpoint) -> bytes:
    arrays = [(k, np.asarray(v, dtype="<f4")) for k, v in ckpt.arrays.items()]
    header = dict(ckpt.header)
    header["format_version"] = FORMAT_VERSION
    header["arrays"] = [[k, list(a.shape)] for k, a in arrays]
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<Q", len(hbytes)), hbytes] + [a.tobytes() for _, a in arrays]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < len(MAGIC) + 12 or not blob.startswith(MAGIC):
        raise IntegrityError(f"{source}: not a checkpoint file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    (hlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    if start + hlen > len(body):
        raise IntegrityError(f"{source}: header length {hlen} exceeds file size")
    if zlib.crc32(body) != crc:
        raise IntegrityError(f"{source}: checksum mismatch")
    try:
        header = json.loads(body[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{source}: unreadable header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"{source}: unsupported format version {header.get('format_version')}")
    pos = start + hlen
    arrays = OrderedDict()
    for name, shape in header.pop("arrays"):
        n = int(np.prod(shape)) if shape else 1
        if pos + 4 * n > len(body):
            raise IntegrityError(f"{source}: array {name!r} truncated")
        arrays[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(body):
        raise IntegrityError(f"{source}: {len(body) - pos} trailing bytes")
    header.pop("format_version")
    return Checkpoint(header, arrays)


def save_checkpoint(path, ckpt: Checkpoint):
    """Atomic write: the file is either the old checkpoint or the new one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return decode(path.read_bytes(), str(path))
