"""Reports: merge summaries, mask overlap matrices, sweeps, retention and compression.

Tabular output is RFC-4180 CSV (UTF-8, '.' decimal, floats in shortest
round-trip form); summaries are JSON tagged with ``SCHEMA_VERSION``. Every row
carries the method, seed and a hash of the configuration that produced it.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import StructuralMismatchError, UsageError
from .harness import Suite, grafted_accuracy, localize_dataless, localize_trained, merged_with_masks, union_fraction
from .localizer import LocalizeConfig
from .params import ParamSet
from .sparse import Mask, SparseTaskVector, compression_report, mask_jaccard, masked_cosine
from .toymodel import ToyArch, evaluate

SCHEMA_VERSION = 1


def config_hash(config) -> str:
    """Short sha256 of the canonical JSON form of ``config``."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class MergeReport:
    method: str
    hyperparameters: dict
    per_task: list[float]
    average: float
    pretrain_accuracy: float | None = None
    union_fraction: float | None = None
    seeds: list[int] = field(default_factory=list)
    timestamps: dict = field(default_factory=dict)

    def __post_init__(self):
        if abs(self.average - float(np.mean(self.per_task))) > 1e-9:
            raise ValueError("average does not match the per-task accuracies")

    @classmethod
    def build(cls, method, hyperparameters, per_task, **kw) -> "MergeReport":
        per_task = [float(a) for a in per_task]
        return cls(method, dict(hyperparameters), per_task, float(np.mean(per_task)), **kw)

    def check(self, n_tasks: int):
        if len(self.per_task) != n_tasks:
            raise ValueError(f"report has {len(self.per_task)} accuracies for {n_tasks} tasks")

    def to_dict(self, with_timestamps: bool = True):
        d = asdict(self)
        if not with_timestamps:
            d.pop("timestamps")
        return {"schema_version": SCHEMA_VERSION, **d}


# -- mask overlap --------------------------------------------------------------


def pairwise_matrices(masks: list[Mask], sparse_tvs: list[SparseTaskVector]):
    """Jaccard similarity of the masks and cosine similarity of the masked task vectors."""
    if len(masks) != len(sparse_tvs):
        raise UsageError(f"{len(masks)} masks but {len(sparse_tvs)} sparse task vectors")
    for m in masks[1:]:
        if m.numels != masks[0].numels:
            raise StructuralMismatchError("masks have different layouts")
    n = len(masks)
    jac, cos = np.zeros((n, n)), np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            jac[i, j] = jac[j, i] = mask_jaccard(masks[i], masks[j])
            cos[i, j] = cos[j, i] = masked_cosine(sparse_tvs[i], sparse_tvs[j])
    return jac, cos


# -- sweeps --------------------------------------------------------------------


def masks_at(suite: Suite, sparsity: float, method: str = "trained", cfg: LocalizeConfig | None = None):
    """Masks at a given sparsity; 0 and 1 are the empty and full masks for any method."""
    if sparsity == 0:
        return [Mask.zeros(suite.pre) for _ in suite.tasks]
    if sparsity == 1:
        return [Mask.ones(suite.pre) for _ in suite.tasks]
    if method == "dataless":
        return localize_dataless(suite, 100.0 * sparsity)
    if method == "trained":
        cfg = replace(cfg or LocalizeConfig(autosearch=True), sparsity=sparsity)
        return [m for m, _ in localize_trained(suite, cfg)]
    raise UsageError(f"unknown localization method {method!r}")


def sparsity_sweep(suite: Suite, grid, method: str = "trained", cfg: LocalizeConfig | None = None) -> list[dict]:
    """One row per sparsity: per-task grafted accuracy and merged average accuracy."""
    grid = list(grid)
    if not grid:
        raise UsageError("sparsity grid is empty")
    chash = config_hash({"suite": suite.config.to_dict(), "method": method,
                         "localize": cfg.to_dict() if cfg else None})
    rows = []
    for sp in grid:
        if not 0 <= sp <= 1:
            raise UsageError(f"sparsity must be in [0, 1], got {sp}")
        masks = masks_at(suite, sp, method, cfg)
        grafted = grafted_accuracy(suite, masks)
        merged = float(np.mean(suite.accuracy(merged_with_masks(suite, masks))))
        row = {"method": method, "seed": suite.config.seed, "config_hash": chash, "sparsity": sp}
        row.update({f"grafted_{t}": float(a) for t, a in enumerate(grafted)})
        row["merged_avg"] = merged
        rows.append(row)
    return rows


def shots_sweep(suite: Suite, grid, cfg: LocalizeConfig | None = None, dataless_k: float | None = None) -> list[dict]:
    """Merged accuracy of trained localization per shot count (plus a dataless row when asked)."""
    grid = list(grid)
    if not grid:
        raise UsageError("shot grid is empty")
    cfg = cfg or LocalizeConfig(sparsity=0.05, autosearch=True)
    chash = config_hash({"suite": suite.config.to_dict(), "localize": cfg.to_dict(), "dataless_k": dataless_k})
    rows = []
    for k in grid:
        masks = [m for m, _ in localize_trained(suite, replace(cfg, shots=int(k)))]
        rows.append({"method": "lns", "seed": suite.config.seed, "config_hash": chash, "shots": int(k),
                     "merged_avg": float(np.mean(suite.accuracy(merged_with_masks(suite, masks))))})
    if dataless_k is not None:
        masks = localize_dataless(suite, dataless_k)
        rows.append({"method": "lns-dataless", "seed": suite.config.seed, "config_hash": chash, "shots": 0,
                     "merged_avg": float(np.mean(suite.accuracy(merged_with_masks(suite, masks))))})
    return rows


def median_by(rows, key, value="merged_avg") -> dict:
    """Median of ``value`` grouped by ``key`` across rows (e.g. across seeds)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r[value])
    return {k: float(np.median(v)) for k, v in groups.items()}


# -- retention and compression -------------------------------------------------


def retention_check(pre: ParamSet, merged: ParamSet, pretrain_data, arch: ToyArch):
    """Accuracy of ``pre`` and ``merged`` on held-out pretraining data; delta = merged - pre."""
    pre_acc = evaluate(arch, pre, pretrain_data)
    merged_acc = evaluate(arch, merged, pretrain_data)
    return pre_acc, merged_acc, merged_acc - pre_acc


def retention_row(suite: Suite, method: str, merged: ParamSet, masks=None) -> dict:
    pre_acc, merged_acc, delta = retention_check(suite.pre, merged, suite.data.heldout.test, suite.arch)
    return {"method": method, "seed": suite.config.seed, "pre_acc": pre_acc, "merged_acc": merged_acc,
            "delta": delta, "task_avg": float(np.mean(suite.accuracy(merged))),
            "union_fraction": union_fraction(masks) if masks else None}


def compression_rows(dense: ParamSet, sparse_tvs) -> list[dict]:
    rows = []
    for i, s in enumerate(sparse_tvs):
        dense_b, sparse_b, ratio = compression_report(dense, s)
        rows.append({"task": i, "nnz": s.nnz, "numel": dense.numel, "pset_bytes": dense_b,
                     "sptv_bytes": sparse_b, "ratio": ratio})
    return rows


# -- output --------------------------------------------------------------------


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, rows: list[dict], columns=None) -> None:
    """RFC-4180 CSV; columns default to the union of row keys in first-seen order."""
    if columns is None:
        columns = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\r\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
