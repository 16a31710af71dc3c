"""Versioned binary checkpoints.

Layout (little-endian)::

    b"PDSC" | u32 version | 32-byte config digest
    u32 count, then per model parameter:
        u32 name length | name (utf-8) | u32 ndim | u64 × ndim extents | f64 data
    u32 count, then the optimizer entries in the same scheme
        ("adam.step", "adam.m.<param>", "adam.v.<param>", "adam.lr.<group>")

Values are written as raw IEEE doubles, so a save/load cycle is bit-exact.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .trainer import OptimizerState

MAGIC = b"PDSC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_digest(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


def _write_entries(f, entries: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(np.ascontiguousarray(arr).tobytes())


def _read_entries(buf: memoryview, pos: int) -> tuple[dict[str, np.ndarray], int]:
    def take(fmt: str):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = bytes(buf[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        out[name] = arr
    return out, pos


def optimizer_entries(state: OptimizerState) -> dict[str, np.ndarray]:
    entries = {"adam.step": np.array(float(state.step))}
    for group, lr in state.base_lrs.items():
        entries[f"adam.lr.{group}"] = np.array(lr)
    for name in state.m:
        entries[f"adam.m.{name}"] = state.m[name]
        entries[f"adam.v.{name}"] = state.v[name]
    return entries


def optimizer_from_entries(entries: dict[str, np.ndarray]) -> OptimizerState:
    lrs = {k[len("adam.lr."):]: float(v) for k, v in entries.items() if k.startswith("adam.lr.")}
    m = {k[len("adam.m."):]: v.copy() for k, v in entries.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: a.copy() for k, a in entries.items() if k.startswith("adam.v.")}
    return OptimizerState(lrs, m, v, int(entries["adam.step"]))


def save(path, params: dict[str, np.ndarray], optimizer: OptimizerState | None, digest: bytes) -> None:
    if len(digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(digest)
        _write_entries(f, params)
        _write_entries(f, optimizer_entries(optimizer) if optimizer is not None else {})
    tmp.replace(path)


def load(path):
    """Return ``(params, optimizer_state_or_None, digest)``."""
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:4]) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    digest = bytes(buf[8:40])
    params, pos = _read_entries(buf, 40)
    opt_entries, pos = _read_entries(buf, pos)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return params, (optimizer_from_entries(opt_entries) if opt_entries else None), digest
