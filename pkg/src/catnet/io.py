"""Binary tensor files (CTNT) and checkpoints.

CTNT layout: ``b"CTNT"``, u8 version (1), u8 rank, rank x u32 LE extents,
then the float32 LE payload in row-major order.

A checkpoint is ``b"CTCK"``, u8 version, then length-prefixed UTF-8 blocks
for the config text and the RNG state, a u64 iteration counter, a name table
(u32 count, then u16-length-prefixed names) and one CTNT block per name in
table order.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"CTNT"
VERSION = 1
CKPT_MAGIC = b"CTCK"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise FormatError("rank too large")
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(6)
    if len(head) != 6 or head[:4] != MAGIC:
        raise FormatError("not a CTNT block")
    version, rank = struct.unpack("<BB", head[4:])
    if version != VERSION:
        raise FormatError(f"unsupported CTNT version {version}")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    n = int(np.prod(dims)) if rank else 1
    payload = fh.read(4 * n)
    if len(payload) != 4 * n:
        raise FormatError("truncated CTNT payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def _write_block(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_block(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


@dataclass
class Checkpoint:
    config_text: str
    tensors: dict[str, np.ndarray]
    rng_state: dict = field(default_factory=dict)
    iteration: int = 0

    def to_bytes(self) -> bytes:
        fh = io.BytesIO()
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<B", CKPT_VERSION))
        _write_block(fh, self.config_text)
        _write_block(fh, json.dumps(self.rng_state, sort_keys=True))
        fh.write(struct.pack("<Q", self.iteration))
        names = list(self.tensors)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        for name in names:
            write_tensor(fh, self.tensors[name])
        return fh.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        fh = io.BytesIO(data)
        if fh.read(4) != CKPT_MAGIC:
            raise FormatError("not a checkpoint")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        config_text = _read_block(fh)
        rng_state = json.loads(_read_block(fh))
        (iteration,) = struct.unpack("<Q", fh.read(8))
        (count,) = struct.unpack("<I", fh.read(4))
        names = []
        for _ in range(count):
            (n,) = struct.unpack("<H", fh.read(2))
            names.append(fh.read(n).decode("utf-8"))
        tensors = {name: read_tensor(fh) for name in names}
        return cls(config_text, tensors, rng_state, iteration)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
