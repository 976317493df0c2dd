"""Binary checkpoint: every store entry as little-endian float32, plus the step counter."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import ParameterStore

MAGIC = b"PTAC2\x00"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def _is_buffer(name: str) -> bool:
    return ".running_" in name


def checkpoint_to_bytes(store: ParameterStore, step: int) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, p in store.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<I{p.value.ndim}I", p.value.ndim, *p.value.shape))
        out.append(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    out.append(struct.pack("<Q", step))
    return b"".join(out)


def checkpoint_from_bytes(buf: bytes, dtype=np.float32) -> tuple[ParameterStore, int]:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"truncated while reading {what} at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    store = ParameterStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * size, f"values of {name}"), dtype="<f4").reshape(dims)
        store.add(name, values.astype(dtype), trainable=not _is_buffer(name))
    (step,) = struct.unpack("<Q", take(8, "step counter"))
    if pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - pos} trailing bytes after step counter")
    return store, step


def save_checkpoint(store: ParameterStore, step: int, path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(store, step))


def load_checkpoint(path, dtype=np.float32) -> tuple[ParameterStore, int]:
    return checkpoint_from_bytes(Path(path).read_bytes(), dtype)
