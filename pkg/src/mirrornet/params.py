"""Named learnable tensors with gradient and momentum slots."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import tensor_from_bytes, tensor_to_bytes

STORE_MAGIC = b"MNPS"


@dataclass
class Param:
    data: np.ndarray
    learnable: bool = True
    kind: str = "weight"  # weight | bias | gamma | beta | buffer
    grad: np.ndarray | None = None
    velocity: np.ndarray | None = field(default=None, repr=False)


class ParamStore:
    """Ordered mapping ``name -> Param``.

    Buffers (batch-norm running statistics) live here too so that one object
    captures the whole network state; they are never touched by the optimizer.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Param] = {}

    def add(self, name: str, data: np.ndarray, learnable: bool = True, kind: str = "weight") -> Param:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Param(np.ascontiguousarray(data, dtype=self.dtype), learnable, kind)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def learnable(self):
        return [(k, p) for k, p in self._params.items() if p.learnable]

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        p = self._params[name]
        if p.grad is None:
            p.grad = np.array(grad, dtype=self.dtype).reshape(p.data.shape)
        else:
            p.grad += grad.reshape(p.data.shape)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def count(self, learnable_only: bool = True) -> int:
        return sum(p.data.size for p in self._params.values() if p.learnable or not learnable_only)

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for name, p in self._params.items():
            out.add(name, p.data, p.learnable, p.kind)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def equals(self, other: "ParamStore") -> bool:
        if list(self) != list(other):
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self)

    # serialization: MNPS, u32 count, then per entry
    # u16 name length, name, u8 ndim, u8 learnable, u8 kind length, kind, MNT1 blob
    def to_bytes(self) -> bytes:
        parts = [STORE_MAGIC, struct.pack("<I", len(self._params))]
        for name, p in self._params.items():
            if p.data.ndim > 4:
                raise ValueError(f"{name}: cannot serialize {p.data.ndim}-D parameter")
            enc, kind = name.encode(), p.kind.encode()
            parts.append(struct.pack("<H", len(enc)) + enc)
            parts.append(struct.pack("<BBB", p.data.ndim, int(p.learnable), len(kind)) + kind)
            parts.append(tensor_to_bytes(p.data.reshape((1,) * (4 - p.data.ndim) + p.data.shape)))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0, dtype=np.float32) -> tuple["ParamStore", int]:
        if buf[offset:offset + 4] != STORE_MAGIC:
            raise ValueError("not a parameter store (bad magic bytes)")
        (count,) = struct.unpack_from("<I", buf, offset + 4)
        pos = offset + 8
        store = cls(dtype)
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            ndim, learnable, klen = struct.unpack_from("<BBB", buf, pos)
            kind = buf[pos + 3:pos + 3 + klen].decode()
            pos += 3 + klen
            data, pos = tensor_from_bytes(buf, pos)
            store.add(name, data.reshape(data.shape[4 - ndim:]), bool(learnable), kind)
        return store, pos
