"""Stitching masked task vectors onto the pretrained model.

At every coordinate covered by at least one mask the merged value is
``pre + (sum of the active tasks' tau) / (number of active tasks)``; elsewhere
it is ``pre`` untouched. Tasks are summed in float64, in ascending task-id
order whatever order the caller passes them in, and each merged value is
rounded to float32 once; the result is bit-deterministic.

:class:`StitchState` keeps running sums and counts so tasks can be added or
removed without touching the other tasks' localization.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BaseMismatchError, FormatError, StructuralMismatchError, UsageError
from .params import ParamSet, fnv1a64, load_pset, save_pset
from .sparse import SparseTaskVector, load_sptv, save_sptv


@dataclass
class StitchWeights:
    """Active-task counts over the union support, per tensor."""

    support: dict[str, np.ndarray]  # sorted flat indices
    counts: dict[str, np.ndarray]

    def union_size(self) -> int:
        return int(sum(s.size for s in self.support.values()))

    def scale(self, name: str) -> np.ndarray:
        """Per-support-coordinate weight 1/count each active task receives."""
        return 1.0 / self.counts[name].astype(np.float64)


def _as_tasks(sparse_tvs) -> list[tuple[str, SparseTaskVector]]:
    if isinstance(sparse_tvs, Mapping):
        items = [(str(k), v) for k, v in sparse_tvs.items()]
    else:
        items = [(f"{i:06d}", s) for i, s in enumerate(sparse_tvs)]
    return sorted(items, key=lambda kv: kv[0])


def _check(pre: ParamSet, task_id: str, s: SparseTaskVector):
    if s.base_fingerprint != pre.fingerprint:
        raise BaseMismatchError(
            f"task {task_id}: base {s.base_fingerprint:016x} != pretrained {pre.fingerprint:016x}"
        )
    for name, e in s.entries.items():
        if name not in pre or pre[name].size != e.numel:
            raise StructuralMismatchError(f"task {task_id}: tensor {name!r} does not match the pretrained model")


def stitch(pre: ParamSet, sparse_tvs) -> tuple[ParamSet, StitchWeights]:
    """Merge masked task vectors, averaging wherever masks overlap.

    ``sparse_tvs`` is a list (ids are positions) or a ``{task_id: tv}`` mapping.
    """
    tasks = _as_tasks(sparse_tvs)
    for tid, s in tasks:
        _check(pre, tid, s)
    merged, support, counts = {}, {}, {}
    for name in pre:
        base = pre[name].ravel()
        total = np.zeros(base.size, np.float64)
        count = np.zeros(base.size, np.int64)
        for _, s in tasks:
            e = s.entries.get(name)
            if e is not None:
                total[e.indices] += e.values
                count[e.indices] += 1
        out = base.copy()
        on = np.flatnonzero(count)
        out[on] = base[on] + total[on] / count[on]
        merged[name] = out.reshape(pre[name].shape)
        support[name] = on.astype(np.uint32)
        counts[name] = count[on].astype(np.uint32)
    return ParamSet(merged), StitchWeights(support, counts)


def graft(pre: ParamSet, s: SparseTaskVector) -> ParamSet:
    """pre + gamma ⊙ tau for a single task."""
    return stitch(pre, [s])[0]


class StitchState:
    """Mutable merge state supporting incremental add/remove of tasks.

    Single writer; readers should take :meth:`merged` snapshots. The running
    sums are kept in the same float64 accumulation order as :func:`stitch`, so
    every state is bit-identical to stitching its tasks from scratch.
    """

    def __init__(self, pre: ParamSet):
        self.pre = pre
        self._fp = pre.fingerprint
        self.tasks: dict[str, SparseTaskVector] = {}
        self._base = {n: pre[n].ravel() for n in pre}
        self._sum = {n: np.zeros(pre[n].size, np.float64) for n in pre}
        self._count = {n: np.zeros(pre[n].size, np.int32) for n in pre}
        self._merged = {n: pre[n].ravel().copy() for n in pre}

    @classmethod
    def from_tasks(cls, pre: ParamSet, sparse_tvs) -> "StitchState":
        state = cls(pre)
        for tid, s in _as_tasks(sparse_tvs):
            state.add(tid, s)
        return state

    @property
    def task_ids(self) -> list[str]:
        return sorted(self.tasks)

    def _refresh(self, name, idx):
        c = self._count[name][idx]
        base = self._base[name][idx].astype(np.float64)
        self._merged[name][idx] = np.where(c > 0, base + self._sum[name][idx] / np.maximum(c, 1), base)

    def _recompute(self, name, idx):
        """Rebuild sums/counts at ``idx`` from all stored tasks in id order."""
        self._sum[name][idx] = 0.0
        self._count[name][idx] = 0
        for tid in self.task_ids:
            e = self.tasks[tid].entries.get(name)
            if e is None or not e.nnz:
                continue
            _, at, pos = np.intersect1d(idx, e.indices, assume_unique=True, return_indices=True)
            self._sum[name][idx[at]] += e.values[pos]
            self._count[name][idx[at]] += 1
        self._refresh(name, idx)

    def add(self, task_id, s: SparseTaskVector) -> "StitchState":
        task_id = str(task_id)
        if task_id in self.tasks:
            raise UsageError(f"task id {task_id!r} already stitched")
        _check(self.pre, task_id, s)
        appended = not self.tasks or task_id > max(self.tasks)
        self.tasks[task_id] = s
        for name, e in s.entries.items():
            if not e.nnz:
                continue
            idx = e.indices.astype(np.int64)
            if appended:
                self._sum[name][idx] += e.values
                self._count[name][idx] += 1
                self._refresh(name, idx)
            else:
                self._recompute(name, idx)
        return self

    def remove(self, task_id) -> "StitchState":
        task_id = str(task_id)
        if task_id not in self.tasks:
            raise UsageError(f"unknown task id {task_id!r}")
        s = self.tasks.pop(task_id)
        for name, e in s.entries.items():
            if e.nnz:
                self._recompute(name, e.indices.astype(np.int64))
        return self

    def merged(self) -> ParamSet:
        return ParamSet({n: self._merged[n].reshape(self.pre[n].shape) for n in self.pre})

    def weights(self) -> StitchWeights:
        support = {n: np.flatnonzero(c).astype(np.uint32) for n, c in self._count.items()}
        return StitchWeights(support, {n: self._count[n][support[n]].astype(np.uint32) for n in support})

    def counts_checksum(self) -> int:
        w = self.weights()
        return fnv1a64(
            part for n in sorted(w.support) for part in (n.encode(), w.support[n].tobytes(), w.counts[n].tobytes())
        )

    # -- persistence ---------------------------------------------------------

    def save(self, directory) -> None:
        d = Path(directory)
        (d / "tasks").mkdir(parents=True, exist_ok=True)
        save_pset(self.pre, d / "pretrained.pset")
        for old in (d / "tasks").glob("*.sptv"):
            if old.stem not in self.tasks:
                old.unlink()
        for tid, s in self.tasks.items():
            save_sptv(s, d / "tasks" / f"{tid}.sptv")
        manifest = {
            "format": "stitch-state",
            "version": 1,
            "pretrained_fingerprint": f"{self._fp:016x}",
            "task_ids": self.task_ids,
            "task_fingerprints": {tid: f"{self.tasks[tid].base_fingerprint:016x}" for tid in self.task_ids},
            "counts_checksum": f"{self.counts_checksum():016x}",
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "StitchState":
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable stitch-state manifest in {d}: {exc}") from exc
        state = cls(load_pset(d / "pretrained.pset"))
        if manifest.get("pretrained_fingerprint") != f"{state._fp:016x}":
            raise FormatError("stitch-state manifest fingerprint does not match pretrained.pset")
        for tid in manifest["task_ids"]:
            state.add(tid, load_sptv(d / "tasks" / f"{tid}.sptv"))
        if manifest.get("counts_checksum") != f"{state.counts_checksum():016x}":
            raise FormatError("stitch-state counts checksum mismatch")
        return state


def restitch_add(state: StitchState, task_id, s: SparseTaskVector) -> StitchState:
    return state.add(task_id, s)


def restitch_remove(state: StitchState, task_id) -> StitchState:
    return state.remove(task_id)
