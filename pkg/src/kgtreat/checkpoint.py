"""Binary checkpoints.

Layout (little-endian): ``KGT1``, u32 header length, JSON header
(version, fingerprint, meta, entry count), then per entry a u16 name length,
UTF-8 name, u8 rank, u64 dims and float64 data; a trailing u32 CRC32 of
everything before it.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import HEAD_PREFIX

MAGIC = b"KGT1"
VERSION = 1
BUFFER_PREFIX = "buffer:"


class CheckpointError(RuntimeError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


def model_state(model) -> dict[str, np.ndarray]:
    state = {k: p.data.copy() for k, p in model.parameters().items()}
    state.update({BUFFER_PREFIX + k: np.array(v, dtype=np.float64) for k, v in model.named_buffers()})
    return state


def apply_state(model, state: dict[str, np.ndarray], groups: str = "all") -> list[str]:
    """Copy tensors into ``model``. ``groups="backbone"`` skips effect heads.

    Returns the names that were loaded; shape mismatches raise.
    """
    params = model.parameters()
    loaded = []
    for name, value in state.items():
        if name.startswith(BUFFER_PREFIX):
            model.set_buffer(name[len(BUFFER_PREFIX):], value)
            loaded.append(name)
            continue
        if groups == "backbone" and name.startswith(HEAD_PREFIX):
            continue
        if name not in params:
            continue
        if params[name].shape != value.shape:
            raise CheckpointError(f"{name}: checkpoint shape {value.shape} vs model {params[name].shape}")
        params[name].data[...] = value
        loaded.append(name)
    return loaded


def save_checkpoint(state: dict[str, np.ndarray], path: str | Path, fp: str, meta: dict | None = None) -> None:
    header = json.dumps({"version": VERSION, "fingerprint": fp, "meta": meta or {}, "count": len(state)}).encode()
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path, fp: str | None = None, force: bool = False):
    """Returns ``(state, header)``; nothing is applied until parsing succeeds."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch; file is truncated or corrupt")
    try:
        (hlen,) = struct.unpack_from("<I", body, 4)
        header = json.loads(body[8 : 8 + hlen])
        pos = 8 + hlen
        state = {}
        for _ in range(header["count"]):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            state[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} trailing bytes")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    if fp is not None and header.get("fingerprint") != fp and not force:
        raise FingerprintMismatch(
            f"{path}: made under config {header.get('fingerprint')}, current config is {fp}; pass --force to load anyway"
        )
    return state, header
