"""Binary weights file: magic "SGNF", little-endian, CRC32C-sealed.

Layout: magic (4 bytes) | version u16 | spec-JSON length u32 + UTF-8 bytes |
tensor count u32 | per tensor: name length u16 + UTF-8 name, dtype tag u8
(0 = f32), rank u8, dims u32 each, raw payload | CRC32C (u32) of everything
after the magic. The table carries learnable parameters and BN running
stats, so a round trip restores inference behavior bit-exactly.
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

from .models import Model, ModelSpec, build

MAGIC = b"SGNF"
FORMAT_VERSION = 1
DTYPE_F32 = 0


class WeightsError(Exception):
    """Base error for weights-file problems."""


class MagicError(WeightsError):
    pass


class VersionError(WeightsError):
    pass


class TruncationError(WeightsError):
    pass


class ChecksumError(WeightsError):
    pass


# ---------------------------------------------------------------------------
# CRC32C (Castagnoli), slice-by-8 software implementation

_POLY = 0x82F63B78


def _make_tables() -> list[list[int]]:
    t0 = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ (_POLY if crc & 1 else 0)
        t0.append(crc)
    tables = [t0]
    for _ in range(7):
        prev = tables[-1]
        tables.append([t0[prev[i] & 0xFF] ^ (prev[i] >> 8) for i in range(256)])
    return tables


_TABLES = _make_tables()


def crc32c(data: bytes, crc: int = 0) -> int:
    """CRC32C checksum (slice-by-8)."""
    t0, t1, t2, t3, t4, t5, t6, t7 = _TABLES
    crc ^= 0xFFFFFFFF
    n = len(data)
    i = 0
    end8 = n & ~7
    while i < end8:
        crc ^= data[i] | (data[i + 1] << 8) | (data[i + 2] << 16) | (data[i + 3] << 24)
        crc = (t7[crc & 0xFF] ^ t6[(crc >> 8) & 0xFF]
               ^ t5[(crc >> 16) & 0xFF] ^ t4[(crc >> 24) & 0xFF]
               ^ t3[data[i + 4]] ^ t2[data[i + 5]] ^ t1[data[i + 6]] ^ t0[data[i + 7]])
        i += 8
    while i < n:
        crc = t0[(crc ^ data[i]) & 0xFF] ^ (crc >> 8)
        i += 1
    return crc ^ 0xFFFFFFFF


# ---------------------------------------------------------------------------

def _named_tensors(model: Model) -> list[tuple[str, np.ndarray]]:
    return list(model.named_parameters()) + list(model.named_bn_stats())


def save(model: Model, path: str) -> None:
    body = io.BytesIO()
    body.write(struct.pack("<H", FORMAT_VERSION))
    spec_json = json.dumps(model.spec.to_dict(), sort_keys=True).encode("utf-8")
    body.write(struct.pack("<I", len(spec_json)))
    body.write(spec_json)
    tensors = _named_tensors(model)
    body.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        body.write(struct.pack("<H", len(nb)))
        body.write(nb)
        body.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
        body.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = body.getvalue()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(payload)
        f.write(struct.pack("<I", crc32c(payload)))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError(
                f"file truncated: needed {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path: str) -> Model:
    """Rebuild a model from a weights file; bit-exact with the saved one."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) or raw[:4] != MAGIC:
        raise MagicError(f"not a SGNF weights file: bad magic {raw[:4]!r}")
    if len(raw) < 4 + 2 + 4:
        raise TruncationError(f"file too short ({len(raw)} bytes)")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    payload = raw[4:-4]
    if crc32c(payload) != stored_crc:
        raise ChecksumError("checksum mismatch: file corrupted")
    r = _Reader(payload)
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    (spec_len,) = r.unpack("<I")
    spec = ModelSpec.from_dict(json.loads(r.take(spec_len).decode("utf-8")))
    model = build(spec, seed=0)
    (count,) = r.unpack("<I")
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        dtype_tag, rank = r.unpack("<BB")
        if dtype_tag != DTYPE_F32:
            raise WeightsError(f"unknown dtype tag {dtype_tag} for tensor {name!r}")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims))
        arr = np.frombuffer(r.take(n * 4), dtype="<f4").reshape(dims)
        model.set_tensor(name, np.ascontiguousarray(arr, dtype=np.float32))
    return model
