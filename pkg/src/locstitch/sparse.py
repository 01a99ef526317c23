"""Binary masks, masked (sparse) task vectors, their file formats and overlap statistics.

SPTV v1 (little-endian)::

    b"SPTV" | u32 version=1 | u64 base_fingerprint | u32 tensor_count
    per tensor: u16 name_len | name | u64 numel | u64 nnz | nnz*u32 indices | nnz*f32 values

MASK v1::

    b"MASK" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | name | u64 numel | ceil(numel/8) bytes, LSB-first
"""

from __future__ import annotations

import math
import struct
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, StructuralMismatchError
from .params import ParamSet, TaskVector, _Reader, pset_bytes

SPTV_MAGIC = b"SPTV"
MASK_MAGIC = b"MASK"
FORMAT_VERSION = 1


class Mask:
    """Per-tensor boolean masks over flattened coordinates.

    Bits are held unpacked in memory and packed LSB-first only on disk.
    Tensors outside ``maskable`` must be all-zero.
    """

    __slots__ = ("bits", "maskable")

    def __init__(self, bits: Mapping[str, np.ndarray], maskable: Iterable[str] | None = None):
        self.bits = {}
        for name in sorted(bits):
            b = np.asarray(bits[name], dtype=bool).ravel().copy()
            b.flags.writeable = False
            self.bits[name] = b
        self.maskable = frozenset(self.bits if maskable is None else maskable)
        unknown = self.maskable - set(self.bits)
        if unknown:
            raise StructuralMismatchError(f"maskable names not in mask: {sorted(unknown)}")
        for name, b in self.bits.items():
            if name not in self.maskable and b.any():
                raise ValueError(f"tensor {name!r} is not maskable but has active bits")

    @classmethod
    def zeros(cls, layout: Mapping, maskable=None) -> "Mask":
        return cls({n: np.zeros(_numel(layout[n]), bool) for n in layout}, maskable)

    @classmethod
    def ones(cls, layout: Mapping, maskable=None) -> "Mask":
        maskable = set(layout) if maskable is None else set(maskable)
        return cls({n: np.full(_numel(layout[n]), n in maskable) for n in layout}, maskable)

    @property
    def numels(self) -> dict[str, int]:
        return {n: b.size for n, b in self.bits.items()}

    def popcount(self) -> int:
        return int(sum(np.count_nonzero(b) for b in self.bits.values()))

    def total_maskable(self) -> int:
        return int(sum(self.bits[n].size for n in self.maskable))

    def sparsity(self) -> float:
        total = self.total_maskable()
        return self.popcount() / total if total else 0.0

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return (
            self.numels == other.numels
            and self.maskable == other.maskable
            and all(np.array_equal(self.bits[n], other.bits[n]) for n in self.bits)
        )

    __hash__ = None

    def __repr__(self):
        return f"Mask({len(self.bits)} tensors, {self.popcount()}/{self.total_maskable()} active)"


def _numel(x) -> int:
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, tuple):
        return int(np.prod(x, dtype=np.int64))
    return int(np.size(x))


@dataclass(frozen=True)
class SparseEntry:
    numel: int
    indices: np.ndarray  # uint32, strictly increasing
    values: np.ndarray  # float32

    @property
    def nnz(self) -> int:
        return int(self.indices.size)


class SparseTaskVector:
    """gamma ⊙ tau stored as sorted (index, value) pairs per tensor."""

    __slots__ = ("entries", "base_fingerprint")

    def __init__(self, entries: Mapping[str, SparseEntry], base_fingerprint: int):
        self.entries = {}
        for name in sorted(entries):
            e = entries[name]
            idx = np.asarray(e.indices, dtype="<u4").copy()
            val = np.asarray(e.values, dtype="<f4").copy()
            if idx.shape != val.shape or idx.ndim != 1:
                raise CorruptionError(f"{name!r}: {idx.size} indices vs {val.size} values")
            if idx.size and (np.any(np.diff(idx.astype(np.int64)) <= 0) or int(idx[-1]) >= e.numel):
                raise CorruptionError(f"{name!r}: indices not strictly increasing below numel={e.numel}")
            idx.flags.writeable = False
            val.flags.writeable = False
            self.entries[name] = SparseEntry(int(e.numel), idx, val)
        self.base_fingerprint = int(base_fingerprint)

    @property
    def nnz(self) -> int:
        return sum(e.nnz for e in self.entries.values())

    @property
    def numels(self) -> dict[str, int]:
        return {n: e.numel for n, e in self.entries.items()}

    def support_mask(self) -> Mask:
        bits = {}
        for n, e in self.entries.items():
            b = np.zeros(e.numel, bool)
            b[e.indices] = True
            bits[n] = b
        return Mask(bits)

    def __eq__(self, other):
        if not isinstance(other, SparseTaskVector):
            return NotImplemented
        return (
            self.base_fingerprint == other.base_fingerprint
            and self.numels == other.numels
            and all(
                np.array_equal(e.indices, other.entries[n].indices)
                and e.values.tobytes() == other.entries[n].values.tobytes()
                for n, e in self.entries.items()
            )
        )

    __hash__ = None

    def __repr__(self):
        return f"SparseTaskVector(nnz={self.nnz}, base={self.base_fingerprint:016x})"


def _check_numels(a: Mapping[str, int], b: Mapping[str, int], what: str):
    for name in sorted(set(a) | set(b)):
        if a.get(name) != b.get(name):
            raise StructuralMismatchError(f"{what}: tensor {name!r} numel {a.get(name)} vs {b.get(name)}")


def mask_apply(m: Mask, tv: TaskVector) -> SparseTaskVector:
    """Keep tau at every active bit (zeros included: support is defined by the mask)."""
    _check_numels(m.numels, {n: tv.delta[n].size for n in tv.delta}, "mask vs task vector")
    entries = {}
    for name, bits in m.bits.items():
        idx = np.flatnonzero(bits).astype(np.uint32)
        entries[name] = SparseEntry(bits.size, idx, tv.delta[name].ravel()[idx])
    return SparseTaskVector(entries, tv.base_fingerprint)


def densify(s: SparseTaskVector, template: ParamSet) -> TaskVector:
    out = {}
    for name in template:
        arr = np.zeros(template[name].size, dtype=np.float32)
        e = s.entries.get(name)
        if e is not None:
            if e.numel != arr.size:
                raise StructuralMismatchError(f"{name!r}: numel {e.numel} vs template {arr.size}")
            if e.nnz and int(e.indices[-1]) >= arr.size:
                raise CorruptionError(f"{name!r}: index {int(e.indices[-1])} out of range {arr.size}")
            arr[e.indices] = e.values
        out[name] = arr.reshape(template[name].shape)
    extra = set(s.entries) - set(template)
    if extra:
        raise StructuralMismatchError(f"sparse tensors absent from template: {sorted(extra)}")
    return TaskVector(ParamSet(out), s.base_fingerprint)


def mask_jaccard(a: Mask, b: Mask) -> float:
    _check_numels(a.numels, b.numels, "mask layouts")
    names = a.maskable | b.maskable
    inter = union = 0
    for n in names:
        inter += int(np.count_nonzero(a.bits[n] & b.bits[n]))
        union += int(np.count_nonzero(a.bits[n] | b.bits[n]))
    return inter / union if union else 0.0


def masked_cosine(a: SparseTaskVector, b: SparseTaskVector) -> float:
    """Cosine of the two value vectors restricted to the intersection of supports."""
    _check_numels(a.numels, b.numels, "sparse layouts")
    if a.base_fingerprint != b.base_fingerprint:
        raise StructuralMismatchError("sparse task vectors have different base models")
    dot = na = nb = 0.0
    for name, ea in a.entries.items():
        eb = b.entries[name]
        _, ia, ib = np.intersect1d(ea.indices, eb.indices, assume_unique=True, return_indices=True)
        va = ea.values[ia].astype(np.float64)
        vb = eb.values[ib].astype(np.float64)
        dot += float(va @ vb)
        na += float(va @ va)
        nb += float(vb @ vb)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(dot / math.sqrt(na * nb), -1.0, 1.0))


def mask_distribution(m: Mask, grouping: Mapping[str, str] | Callable[[str], str]):
    """Share of active bits falling in each group, as [(group, fraction)] sorted by group."""
    lookup = grouping if callable(grouping) else grouping.__getitem__
    counts: dict[str, int] = {}
    for name, bits in m.bits.items():
        try:
            group = lookup(name)
        except KeyError:
            raise StructuralMismatchError(f"tensor {name!r} has no group") from None
        counts[group] = counts.get(group, 0) + int(np.count_nonzero(bits))
    total = sum(counts.values())
    return [(g, counts[g] / total if total else 0.0) for g in sorted(counts)]


# -- file formats ------------------------------------------------------------


def sptv_bytes(s: SparseTaskVector) -> bytes:
    parts = [SPTV_MAGIC, struct.pack("<IQI", FORMAT_VERSION, s.base_fingerprint, len(s.entries))]
    for name, e in s.entries.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<QQ", e.numel, e.nnz))
        parts.append(e.indices.astype("<u4").tobytes())
        parts.append(e.values.astype("<f4").tobytes())
    return b"".join(parts)


def parse_sptv(buf: bytes) -> SparseTaskVector:
    r = _Reader(buf, "SPTV")
    r.expect_header(SPTV_MAGIC, FORMAT_VERSION)
    base, count = r.unpack("<QI")
    entries = {}
    for _ in range(count):
        at = r.pos
        name = r.name()
        if name in entries:
            raise FormatError(f"duplicate tensor {name!r}", at)
        numel, nnz = r.unpack("<QQ")
        idx_at = r.pos
        idx = np.frombuffer(r.take(4 * nnz), dtype="<u4")
        val_at = r.pos
        val = np.frombuffer(r.take(4 * nnz), dtype="<f4")
        if nnz and (np.any(np.diff(idx.astype(np.int64)) <= 0) or int(idx[-1]) >= numel):
            raise FormatError(f"indices of {name!r} not strictly increasing below numel", idx_at)
        if not np.all(np.isfinite(val)):
            raise FormatError(f"non-finite value in {name!r}", val_at)
        entries[name] = SparseEntry(numel, idx, val)
    r.finish()
    return SparseTaskVector(entries, base)


def save_sptv(s: SparseTaskVector, path) -> None:
    Path(path).write_bytes(sptv_bytes(s))


def load_sptv(path) -> SparseTaskVector:
    return parse_sptv(Path(path).read_bytes())


def mask_bytes(m: Mask) -> bytes:
    parts = [MASK_MAGIC, struct.pack("<II", FORMAT_VERSION, len(m.bits))]
    for name, bits in m.bits.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", bits.size))
        parts.append(np.packbits(bits, bitorder="little").tobytes())
    return b"".join(parts)


def parse_mask(buf: bytes, maskable=None) -> Mask:
    r = _Reader(buf, "MASK")
    r.expect_header(MASK_MAGIC, FORMAT_VERSION)
    (count,) = r.unpack("<I")
    bits = {}
    for _ in range(count):
        at = r.pos
        name = r.name()
        if name in bits:
            raise FormatError(f"duplicate tensor {name!r}", at)
        (numel,) = r.unpack("<Q")
        nbytes = (numel + 7) // 8
        packed_at = r.pos
        packed = np.frombuffer(r.take(nbytes), dtype=np.uint8)
        unpacked = np.unpackbits(packed, bitorder="little")
        if unpacked[numel:].any():
            raise FormatError(f"nonzero trailing bits in {name!r}", packed_at + nbytes - 1)
        bits[name] = unpacked[:numel].astype(bool)
    r.finish()
    if maskable is None:
        maskable = bits
    return Mask(bits, maskable)


def save_mask(m: Mask, path) -> None:
    Path(path).write_bytes(mask_bytes(m))


def load_mask(path, maskable=None) -> Mask:
    return parse_mask(Path(path).read_bytes(), maskable)


def compression_report(dense: ParamSet, s: SparseTaskVector) -> tuple[int, int, float]:
    """(dense PSET bytes, SPTV bytes, sparse/dense ratio)."""
    d = len(pset_bytes(dense))
    sp = len(sptv_bytes(s))
    return d, sp, sp / d
