"""
On-disk formats.

PYGR gridded container (little-endian throughout)::

    b"PYGR"            magic
    u32                version (1)
    u32 x 4            C, H, W, T
    u8                 dtype code (1 = float32)
    C x (u32 + bytes)  channel names, length-prefixed UTF-8
    H x f64            latitudes in degrees
    T*C*H*W x f32      values, [t][c][i][j] order

Each container has a JSON sidecar at ``<path>.json``.

Checkpoints are a JSON manifest at ``<path>`` and a raw little-endian float32
blob at ``<path>.bin`` holding the parameters concatenated in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"PYGR"
VERSION = 1
DTYPE_F32 = 1


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def blob_path(path) -> Path:
    return Path(str(path) + ".bin")


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_pygr(path, values: np.ndarray, channel_names, latitudes, sidecar: dict) -> None:
    values = np.asarray(values)
    if values.ndim != 4:
        raise DataError(f"PYGR values must be [T,C,H,W], got shape {values.shape}")
    T, C, H, W = values.shape
    if len(channel_names) != C or len(latitudes) != H:
        raise DataError("channel names / latitudes do not match value shape")
    parts = [MAGIC, struct.pack("<IIIIIB", VERSION, C, H, W, T, DTYPE_F32)]
    for name in channel_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(np.asarray(latitudes, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))
    sidecar_path(path).write_text(dump_json(sidecar))


def read_pygr(path):
    """Return ``(values[T,C,H,W] float32, channel_names, latitudes, sidecar)``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, C, H, W, T, code = struct.unpack_from("<IIIIIB", buf, 4)
    except struct.error as exc:
        raise DataError(f"{path}: truncated header") from exc
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if code != DTYPE_F32:
        raise DataError(f"{path}: unsupported dtype code {code}")
    off = 4 + struct.calcsize("<IIIIIB")
    names = []
    for _ in range(C):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        names.append(buf[off:off + n].decode("utf-8"))
        off += n
    lats = np.frombuffer(buf, dtype="<f8", count=H, offset=off).astype(np.float64)
    off += 8 * H
    count = T * C * H * W
    if len(buf) - off != 4 * count:
        raise DataError(f"{path}: expected {4 * count} value bytes, found {len(buf) - off}")
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    values = values.astype(np.float32).reshape(T, C, H, W)
    side = sidecar_path(path)
    sidecar = json.loads(side.read_text()) if side.exists() else {}
    return values, names, lats, sidecar


def write_checkpoint(path, manifest: dict, arrays: list) -> str:
    """Write manifest + blob; returns the blob's sha256 hex digest."""
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    blob_path(path).write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()
    Path(path).write_text(dump_json(dict(manifest, blob_sha256=digest)))
    return digest


def read_checkpoint(path):
    """Return ``(manifest, arrays)`` with arrays shaped per the manifest."""
    path = Path(path)
    if not path.exists() or not blob_path(path).exists():
        raise DataError(f"checkpoint {path} (or its .bin blob) not found")
    manifest = json.loads(path.read_text())
    blob = blob_path(path).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise DataError(f"checkpoint {path}: blob hash mismatch")
    arrays = []
    off = 0
    for entry in manifest["parameters"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float32)
        arrays.append(arr.reshape(shape))
        off += 4 * n
    if off != len(blob):
        raise DataError(f"checkpoint {path}: blob has {len(blob) - off} trailing bytes")
    return manifest, arrays


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
