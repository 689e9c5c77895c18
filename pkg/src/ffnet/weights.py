"""
Weight stores: deterministic initialization and the FFNW binary container.

FFNW layout (little-endian, no padding)::

    b"FFNW"  u32 version=1  u32 entry_count
    per entry: u16 name_len, name (UTF-8), u8 ndim, ndim x u32 dims, f32 payload
"""
from __future__ import annotations

import struct
import warnings
import zlib
from collections.abc import Mapping
from typing import Dict, Iterable, Iterator, Tuple

import numpy as np

from .graph import LayerGraph

MAGIC = b"FFNW"
VERSION = 1
_F32 = np.dtype("<f4")


class WeightError(ValueError):
    code = "weight_error"


class BadMagicError(WeightError):
    code = "bad_magic"


class UnsupportedVersionError(WeightError):
    code = "bad_version"


class TruncatedFileError(WeightError):
    code = "truncated"


class TrailingDataError(TruncatedFileError):
    """Bytes remain after ``entry_count`` entries: the header count is too small."""

    code = "trailing_data"


class DuplicateNameError(WeightError):
    code = "duplicate_name"


class DimMismatchError(WeightError):
    code = "dim_mismatch"


class MissingWeightError(WeightError):
    code = "missing_weight"


class UnexpectedWeightError(WeightError):
    code = "unexpected_weight"


class WeightStore(Mapping):
    """Ordered, read-only mapping from weight name to float32 array."""

    def __init__(self, entries: Iterable[Tuple[str, np.ndarray]] = ()):
        self._data: Dict[str, np.ndarray] = {}
        for name, arr in (entries.items() if isinstance(entries, Mapping) else entries):
            if name in self._data:
                raise DuplicateNameError(f"duplicate weight name {name!r}")
            a = np.array(arr, dtype=np.float32, copy=True)
            a.setflags(write=False)
            self._data[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        return f"WeightStore({len(self)} entries, {self.num_elements()} elements)"

    def num_elements(self) -> int:
        return sum(a.size for a in self._data.values())

    def updated(self, changes: Mapping[str, np.ndarray] = (), drop: Iterable[str] = ()) -> "WeightStore":
        """New store with some entries replaced or appended and others dropped."""
        drop = set(drop)
        changes = dict(changes)
        merged = [(k, changes.pop(k, v)) for k, v in self._data.items() if k not in drop]
        return WeightStore(merged + list(changes.items()))

    def equal(self, other: "WeightStore") -> bool:
        """Bit-exact equality, including entry order."""
        if list(self) != list(other):
            return False
        return all(self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
                   for k in self)


def _rng(seed: int, name: str) -> np.random.Generator:
    # Philox is counter-based; keying by name makes each tensor independent of build order.
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))])
    return np.random.Generator(np.random.Philox(ss))


def init_random(graph: LayerGraph, seed: int = 0) -> WeightStore:
    """He-normal conv weights, zero biases, identity batch norm statistics."""
    entries = []
    for node in graph.nodes:
        p = node.params
        if node.kind == "conv":
            kh, kw = p["kernel"]
            fan_in = p["cin"] * kh * kw
            shape = (p["cout"], p["cin"], kh, kw)
            w = _rng(seed, node.weight("weight")).standard_normal(shape) * np.sqrt(2.0 / fan_in)
            entries.append((node.weight("weight"), w))
            if p["bias"]:
                entries.append((node.weight("bias"), np.zeros(p["cout"])))
        elif node.kind == "bn":
            c = p["channels"]
            entries += [(node.weight("gamma"), np.ones(c)), (node.weight("beta"), np.zeros(c)),
                        (node.weight("mean"), np.zeros(c)), (node.weight("var"), np.ones(c))]
    return WeightStore(entries)


def check_store(graph: LayerGraph, store: Mapping, permissive: bool = False) -> None:
    """Verify ``store`` holds every weight the graph needs with the right dims."""
    required = graph.weight_shapes()
    for name, shape in required.items():
        if name not in store:
            raise MissingWeightError(f"missing weight {name!r}")
        if tuple(store[name].shape) != shape:
            raise DimMismatchError(f"{name}: expected dims {shape}, got {tuple(store[name].shape)}")
    extra = [k for k in store if k not in required]
    if extra:
        msg = f"{len(extra)} unexpected weight(s), e.g. {extra[0]!r}"
        if not permissive:
            raise UnexpectedWeightError(msg)
        warnings.warn(msg, stacklevel=2)


def encode_weights(store: WeightStore) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, arr in store.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise WeightError(f"weight name too long: {name[:40]!r}...")
        if arr.ndim > 0xFF:
            raise WeightError(f"{name}: too many dims")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return b"".join(parts)


def decode_weights(data: bytes) -> WeightStore:
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFileError(f"file truncated while reading {what} at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if len(view) < 4 or bytes(view[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(view[:4])!r}, expected {MAGIC!r}")
    pos = 4
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported FFNW version {version}")
    entries = []
    names = set()
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        name = bytes(take(nlen, f"entry {i} name")).decode("utf-8")
        if name in names:
            raise DuplicateNameError(f"duplicate weight name {name!r}")
        names.add(name)
        (ndim,) = struct.unpack("<B", take(1, f"{name} ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = take(4 * size, f"{name} payload")
        entries.append((name, np.frombuffer(payload, dtype=_F32).reshape(dims)))
    if pos != len(view):
        raise TrailingDataError(f"{len(view) - pos} bytes after the last of {count} entries")
    return WeightStore(entries)


def save_weights(store: WeightStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_weights(store))


def load_weights(path) -> WeightStore:
    with open(path, "rb") as fh:
        return decode_weights(fh.read())
