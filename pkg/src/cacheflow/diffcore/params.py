"""Flat parameter storage and the CFPARAM1 checkpoint format.

Layout of a CFPARAM1 file (all little-endian)::

    8 bytes   magic b"CFPARAM1"
    u32       number of blocks
    per block:
        u16   name length, then the UTF-8 name
        u64   offset into the flat vector
        u32   ndim, then ndim x u64 extents
    u64       total parameter count
    f64[...]  the flat parameter vector
"""

import hashlib
import io
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError
from .tensor import Tensor

MAGIC = b"CFPARAM1"


@dataclass(frozen=True)
class Block:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))


class ParamStore:
    """Named parameter blocks backed by one contiguous vector.

    ``params`` and ``grads`` are flat float64 arrays of equal length. Every
    block is a reshaped view into both, so writes through :meth:`tensor`
    leaves land directly in the flat buffers.
    """

    def __init__(self, arrays=None):
        arrays = dict(arrays or {})
        layout, offset = [], 0
        for name, value in arrays.items():
            shape = tuple(np.shape(value))
            layout.append(Block(name, offset, shape))
            offset += int(np.prod(shape, dtype=np.int64))
        self.layout = layout
        self.params = np.zeros(offset, dtype=np.float64)
        self.grads = np.zeros(offset, dtype=np.float64)
        self._index = {b.name: b for b in layout}
        for name, value in arrays.items():
            self[name] = value

    def __len__(self):
        return self.params.size

    def __contains__(self, name):
        return name in self._index

    def names(self):
        return [b.name for b in self.layout]

    def block(self, name):
        return self._index[name]

    def __getitem__(self, name):
        b = self._index[name]
        return self.params[b.offset : b.offset + b.size].reshape(b.shape)

    def __setitem__(self, name, value):
        b = self._index[name]
        self.params[b.offset : b.offset + b.size] = np.asarray(value, dtype=np.float64).reshape(-1)

    def grad(self, name):
        b = self._index[name]
        return self.grads[b.offset : b.offset + b.size].reshape(b.shape)

    def tensor(self, name):
        """Leaf tensor viewing block ``name``; its grad is the store's grad slot."""
        return Tensor(self[name], requires_grad=True, grad=self.grad(name))

    def zero_grad(self):
        self.grads[:] = 0.0

    def copy(self):
        other = ParamStore()
        other.layout = list(self.layout)
        other._index = dict(self._index)
        other.params = self.params.copy()
        other.grads = self.grads.copy()
        return other

    def subset(self, prefix):
        """New store holding copies of every block whose name starts with ``prefix``."""
        return ParamStore({b.name[len(prefix):]: self[b.name] for b in self.layout if b.name.startswith(prefix)})

    def fingerprint(self):
        """SHA-256 over the layout table and parameter bytes."""
        h = hashlib.sha256()
        for b in self.layout:
            h.update(f"{b.name}:{b.offset}:{b.shape};".encode())
        h.update(self.params.astype("<f8").tobytes())
        return h.digest()

    def to_bytes(self):
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", len(self.layout)))
        for b in self.layout:
            name = b.name.encode("utf-8")
            buf.write(struct.pack("<H", len(name)))
            buf.write(name)
            buf.write(struct.pack("<QI", b.offset, len(b.shape)))
            buf.write(struct.pack(f"<{len(b.shape)}Q", *b.shape))
        buf.write(struct.pack("<Q", self.params.size))
        buf.write(self.params.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        reader = _Reader(data)
        if reader.take(8) != MAGIC:
            raise FormatError("not a CFPARAM1 checkpoint", 0)
        (n_blocks,) = reader.unpack("<I")
        blocks = []
        for _ in range(n_blocks):
            (n,) = reader.unpack("<H")
            name = reader.take(n).decode("utf-8")
            offset, ndim = reader.unpack("<QI")
            shape = reader.unpack(f"<{ndim}Q")
            blocks.append(Block(name, offset, tuple(shape)))
        (total,) = reader.unpack("<Q")
        expected = 0
        for b in blocks:
            if b.offset != expected:
                raise FormatError(f"block '{b.name}' is not contiguous", reader.pos)
            expected += b.size
        if expected != total:
            raise FormatError(f"layout covers {expected} values but header says {total}", reader.pos)
        values = np.frombuffer(reader.take(8 * total), dtype="<f8").astype(np.float64)
        store = cls()
        store.layout = blocks
        store._index = {b.name: b for b in blocks}
        store.params = values
        store.grads = np.zeros_like(values)
        return store

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def merge_stores(stores):
    """Concatenate several stores into one, prefixing block names with ``key/``."""
    arrays = {}
    for key, store in stores.items():
        for b in store.layout:
            arrays[f"{key}/{b.name}"] = store[b.name]
    return ParamStore(arrays)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated: needed {n} bytes, {len(self.data) - self.pos} left", self.pos)
        out = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
