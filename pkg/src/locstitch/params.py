"""Named float32 tensor containers, the PSET checkpoint format and task-vector algebra.

A :class:`ParamSet` is an immutable, name-sorted mapping of float32 arrays.
Everything downstream (fingerprints, merges, accumulation order) relies on the
canonical lexicographic order, so it is enforced at construction.

PSET v1 layout (little-endian, no padding)::

    b"PSET" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | name (utf-8) | u8 dtype=0 | u8 rank | rank*u32 dims | float32 data
"""

from __future__ import annotations

import struct
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .errors import BaseMismatchError, FormatError, StructuralMismatchError

PSET_MAGIC = b"PSET"
PSET_VERSION = 1
DTYPE_F32 = 0

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


@numba.njit(cache=True)
def _fnv1a_update(h, data):
    for b in data:
        h = (h ^ np.uint64(b)) * np.uint64(0x100000001B3)
    return h


def fnv1a64(chunks: Iterable[bytes]) -> int:
    h = _FNV_OFFSET
    for chunk in chunks:
        if chunk:
            h = np.uint64(_fnv1a_update(h, np.frombuffer(chunk, dtype=np.uint8)))
    return int(h)


def _as_f32(name, value) -> np.ndarray:
    arr = np.array(value, dtype="<f4", copy=True)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"tensor {name!r} contains non-finite values")
    arr.flags.writeable = False
    return arr


class ParamSet(Mapping):
    """Immutable name -> float32 array mapping kept in canonical (sorted) order."""

    __slots__ = ("_tensors", "_fingerprint")

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        tensors = dict(tensors or {})
        self._tensors = {name: _as_f32(name, tensors[name]) for name in sorted(tensors)}
        self._fingerprint = None

    def __getitem__(self, name):
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def __repr__(self):
        body = ", ".join(f"{n}{list(a.shape)}" for n, a in self._tensors.items())
        return f"ParamSet({body})"

    def __eq__(self, other):
        if not isinstance(other, ParamSet):
            return NotImplemented
        return self.fingerprint == other.fingerprint and all_equal(self, other)

    __hash__ = None

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: a.shape for n, a in self._tensors.items()}

    @property
    def numel(self) -> int:
        return sum(a.size for a in self._tensors.values())

    @property
    def fingerprint(self) -> int:
        if self._fingerprint is None:
            self._fingerprint = fnv1a64(_pset_chunks(self))
        return self._fingerprint

    def map(self, fn) -> "ParamSet":
        return ParamSet({n: fn(n, a) for n, a in self._tensors.items()})

    def flat(self) -> np.ndarray:
        """All tensors raveled and concatenated in canonical order."""
        if not self._tensors:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([a.ravel() for a in self._tensors.values()])


def all_equal(a: ParamSet, b: ParamSet) -> bool:
    """Bit-level equality (distinguishes -0.0 from 0.0)."""
    if a.shapes != b.shapes:
        return False
    return all(a[n].tobytes() == b[n].tobytes() for n in a)


def fingerprint(p: ParamSet) -> int:
    return p.fingerprint


def check_same_layout(a: Mapping, b: Mapping, what="parameter sets"):
    """Raise StructuralMismatchError naming the first differing tensor."""
    for name in sorted(set(a) | set(b)):
        if name not in a or name not in b:
            raise StructuralMismatchError(f"{what} differ: tensor {name!r} missing on one side")
        if np.shape(a[name]) != np.shape(b[name]):
            raise StructuralMismatchError(
                f"{what} differ: tensor {name!r} has shape {np.shape(a[name])} vs {np.shape(b[name])}"
            )


@dataclass(frozen=True)
class TaskVector:
    """delta = finetuned - pretrained, tagged with the pretrained fingerprint."""

    delta: ParamSet
    base_fingerprint: int

    def __getitem__(self, name):
        return self.delta[name]

    def __iter__(self):
        return iter(self.delta)

    @property
    def shapes(self):
        return self.delta.shapes


def compute_task_vector(pre: ParamSet, ft: ParamSet) -> TaskVector:
    check_same_layout(pre, ft)
    delta = ParamSet({n: ft[n] - pre[n] for n in pre})
    return TaskVector(delta, pre.fingerprint)


def apply_delta(pre: ParamSet, scaled_deltas) -> ParamSet:
    """pre + sum_i scale_i * delta_i, accumulated in list order per coordinate."""
    scaled_deltas = list(scaled_deltas)
    for _, tv in scaled_deltas:
        if tv.base_fingerprint != pre.fingerprint:
            raise BaseMismatchError(
                f"task vector base {tv.base_fingerprint:016x} != pretrained {pre.fingerprint:016x}"
            )
        check_same_layout(pre, tv.delta)
    out = {}
    for name in pre:
        acc = pre[name].copy()
        for scale, tv in scaled_deltas:
            acc += np.float32(scale) * tv.delta[name]
        out[name] = acc
    return ParamSet(out)


def zeros_like(p: Mapping) -> ParamSet:
    return ParamSet({n: np.zeros(np.shape(p[n]), dtype=np.float32) for n in p})


# -- PSET v1 ---------------------------------------------------------------


def _pset_chunks(p: Mapping):
    yield PSET_MAGIC + struct.pack("<II", PSET_VERSION, len(p))
    for name in sorted(p):
        arr = np.asarray(p[name], dtype="<f4")
        raw = name.encode("utf-8")
        yield struct.pack("<H", len(raw)) + raw + struct.pack("<BB", DTYPE_F32, arr.ndim)
        yield struct.pack(f"<{arr.ndim}I", *arr.shape)
        yield arr.tobytes()


def pset_bytes(p: ParamSet) -> bytes:
    return b"".join(_pset_chunks(p))


def save_pset(p: ParamSet, path) -> None:
    Path(path).write_bytes(pset_bytes(p))


class _Reader:
    """Bounds-checked cursor over a byte buffer; errors carry offsets."""

    def __init__(self, buf: bytes, kind: str):
        self.buf = memoryview(buf)
        self.pos = 0
        self.kind = kind

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.kind} file: need {n} bytes", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def expect_header(self, magic: bytes, version: int):
        got = bytes(self.take(4))
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
        (v,) = self.unpack("<I")
        if v != version:
            raise FormatError(f"unsupported {self.kind} version {v}", 4)

    def name(self) -> str:
        at = self.pos
        (n,) = self.unpack("<H")
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor name is not valid utf-8", at) from exc

    def finish(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


def parse_pset(buf: bytes) -> ParamSet:
    r = _Reader(buf, "PSET")
    r.expect_header(PSET_MAGIC, PSET_VERSION)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        at = r.pos
        name = r.name()
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}", at)
        dtype, rank = r.unpack("<BB")
        if dtype != DTYPE_F32:
            raise FormatError(f"unsupported dtype code {dtype} for {name!r}", r.pos - 2)
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims, dtype=np.int64))
        data_at = r.pos
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
        if not np.all(np.isfinite(data)):
            bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
            raise FormatError(f"non-finite value in {name!r}", data_at + 4 * bad)
        tensors[name] = data
    r.finish()
    return ParamSet(tensors)


def load_pset(path) -> ParamSet:
    return parse_pset(Path(path).read_bytes())
