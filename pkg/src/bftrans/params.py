"""Named parameter storage and the BFT1 checkpoint format."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import ContractError, Tensor

MAGIC = b"BFT1"


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered ``name -> Tensor`` mapping of trainable values.

    Each tensor keeps its gradient in ``.grad`` with the value's shape.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def num_values(self) -> int:
        return sum(t.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = np.zeros_like(t.data)

    def astype(self, dtype) -> "ParamStore":
        """Deep copy with every value cast to ``dtype``."""
        out = ParamStore()
        for name, t in self._entries.items():
            out.add(name, Tensor(t.data.astype(dtype, copy=True), dtype=dtype))
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    @property
    def dtype(self) -> np.dtype:
        for t in self._entries.values():
            return t.dtype
        return np.dtype(np.float32)

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._entries.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._entries) - set(state)
        extra = set(state) - set(self._entries)
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, t in self._entries.items():
            arr = state[name]
            if arr.shape != t.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data[...] = arr

    def save(self, path) -> None:
        Path(path).write_bytes(encode_checkpoint(self))

    @classmethod
    def load(cls, path) -> "ParamStore":
        return decode_checkpoint(Path(path).read_bytes())


def encode_checkpoint(params: ParamStore) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(buf: bytes) -> ParamStore:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}")
    try:
        (count,) = struct.unpack_from("<I", buf, 4)
        pos = 8
        out = ParamStore()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float32)
            pos += 4 * n
            out.add(name, Tensor(data.reshape(shape), dtype=np.float32))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last entry")
    return out
