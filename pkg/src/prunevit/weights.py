"""Binary weight persistence with bit-exact round trips.

Single file layout, little-endian throughout:

    magic   4 bytes  b"PVWT"
    version u32      format version (1)
    digest  64 bytes ascii sha256 hex of the canonical config JSON
    count   u32      number of parameter blocks
    blocks  repeated: name_len u16, name utf-8, ndim u8,
            dims u64 * ndim, data float64 row-major

Parameters serialize in the model's stable naming order, so identical
training runs produce byte-identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .backbone import ModelParams
from .config import ArchConfig
from .errors import DigestError

MAGIC = b"PVWT"
VERSION = 1


def save_weights(params: ModelParams, config: ArchConfig,
                 path: str | Path) -> None:
    named = list(params.named())
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += config.digest().encode("ascii")
    out += struct.pack("<I", len(named))
    for name, tensor in named:
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            out += struct.pack("<Q", d)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def read_weights(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    """Parse a weight file into (config digest, name -> array)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DigestError(f"{path}: not a weight file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise DigestError(f"{path}: unsupported version {version}")
    digest = raw[8:72].decode("ascii")
    (count,) = struct.unpack_from("<I", raw, 72)
    offset = 76
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
        offset += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        blocks[name] = arr.reshape(shape).astype(np.float64)
    return digest, blocks


def load_weights(path: str | Path, params: ModelParams,
                 config: ArchConfig) -> None:
    """Fill ``params`` in place; the file must match the config digest."""
    digest, blocks = read_weights(path)
    if digest != config.digest():
        raise DigestError(
            f"{path}: weight digest {digest[:12]}... does not match config "
            f"digest {config.digest()[:12]}...")
    names = {name for name, _ in params.named()}
    missing = names - set(blocks)
    extra = set(blocks) - names
    if missing or extra:
        raise DigestError(
            f"{path}: parameter names disagree (missing {sorted(missing)}, "
            f"unexpected {sorted(extra)})")
    for name, tensor in params.named():
        arr = blocks[name]
        if arr.shape != tensor.data.shape:
            raise DigestError(
                f"{path}: {name} has shape {arr.shape}, expected "
                f"{tensor.data.shape}")
        tensor.data = arr.copy()
