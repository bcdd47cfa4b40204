"""Named parameter storage and the SVPW checkpoint format.

Layout (all integers little-endian u32)::

    b"SVPW" | version byte (1) | entry count
    per entry: name length | UTF-8 name | rank | dims... | float32 LE payload
"""

import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"SVPW"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ParameterStore:
    """Map from unique names to trainable tensors, iterated in sorted order."""

    def __init__(self):
        self._params = {}

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.asarray(value, dtype=np.float32)
        self._params[name] = Tensor(arr.copy(), requires_grad=True, dtype=arr.dtype)
        return self._params[name]

    def __getitem__(self, name):
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def tensors(self):
        return [self._params[n] for n in self.names()]

    def scope(self, prefix):
        return Scope(self, prefix)

    def set(self, name, array):
        old = self[name]
        arr = np.asarray(array)
        if arr.shape != old.shape:
            raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {old.shape}")
        old.data = arr.astype(old.dtype, copy=True)

    def astype(self, dtype):
        """Cast every parameter in place (float64 for gradient checks)."""
        for t in self._params.values():
            t.data = t.data.astype(dtype)
        return self

    def copy(self):
        new = ParameterStore()
        for n, t in self.items():
            new._params[n] = Tensor(t.data.copy(), requires_grad=True, dtype=t.dtype)
        return new

    def count(self):
        return sum(int(t.data.size) for t in self._params.values())

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self):
        parts = [MAGIC, bytes([VERSION]), struct.pack("<I", len(self._params))]
        for name, t in self.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<I", t.ndim))
            parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
            parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf):
        store = cls()
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(buf):
                raise CheckpointError("unexpected end of checkpoint file")
            chunk = buf[pos : pos + n]
            pos += n
            return chunk

        if take(4) != MAGIC:
            raise CheckpointError("not an SVPW checkpoint (bad magic)")
        version = take(1)[0]
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", take(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(4))
            name = take(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
            store.add(name, data.astype(np.float32))
        if pos != len(buf):
            raise CheckpointError("trailing bytes after last checkpoint entry")
        return store

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def load_into(self, other):
        """Copy values from ``other`` after checking names and shapes match."""
        mine, theirs = set(self.names()), set(other.names())
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise CheckpointError(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for n in self.names():
            if self[n].shape != other[n].shape:
                raise CheckpointError(
                    f"checkpoint/model mismatch for tensor {n!r}: checkpoint {other[n].shape}, model {self[n].shape}"
                )
            self.set(n, other[n].data)


class Scope:
    """Prefixed view onto a store: ``scope["w"]`` reads ``"<prefix>.w"``."""

    def __init__(self, store, prefix):
        self.store = store
        self.prefix = prefix

    def __getitem__(self, key):
        return self.store[f"{self.prefix}.{key}"]

    def __contains__(self, key):
        return f"{self.prefix}.{key}" in self.store

    def add(self, key, value):
        return self.store.add(f"{self.prefix}.{key}", value)

    def scope(self, sub):
        return Scope(self.store, f"{self.prefix}.{sub}")
