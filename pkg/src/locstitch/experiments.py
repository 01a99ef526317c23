"""Desk-scale experiment bundles. Each writes ``<name>.csv`` and ``<name>.json`` into an output dir.

Outputs are deterministic functions of the arguments; nothing time-dependent
goes into them (wall-clock timings are written to a separate ``timings.json``
where a bundle measures them).
"""

from __future__ import annotations

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis
from .baselines import simple_average
from .harness import (HarnessConfig, Suite, build_suite, grafted_accuracy, localize_dataless, localize_trained,
                      merged_with_masks, run_method, sparse_vectors)
from .localizer import LocalizeConfig, dataless_localize
from .params import ParamSet, compute_task_vector
from .sparse import mask_apply
from .stitcher import StitchState, stitch

DEFAULT_SEEDS = (0, 1, 2)
SPARSITY_GRID = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)
SHOT_GRID = (8, 64, 256)
TIMINGS = "timings.json"

_SUITES: dict[str, Suite] = {}


def cached_suite(cfg: HarnessConfig) -> Suite:
    """build_suite memoized on the full config (suite construction dominates bundle runtime)."""
    key = json.dumps(cfg.to_dict(), sort_keys=True)
    if key not in _SUITES:
        _SUITES[key] = build_suite(cfg)
    return _SUITES[key]


def _trained_cfg(sparsity=0.05, shots=64, **kw) -> LocalizeConfig:
    return LocalizeConfig(sparsity=sparsity, shots=shots, autosearch=True, **kw)


def _emit(out_dir, name, rows, summary, config):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = analysis.config_hash(config)
    for r in rows:
        r.setdefault("config_hash", chash)
    analysis.write_csv(out / f"{name}.csv", rows)
    analysis.write_json(out / f"{name}.json", {"schema_version": analysis.SCHEMA_VERSION, "experiment": name,
                                               "config": config, "config_hash": chash, "summary": summary})
    return summary


def grafting(out_dir, seeds=DEFAULT_SEEDS, sparsity=0.05, dataless_k=10.0, shots=64):
    """Grafted / finetuned accuracy per task for trained and dataless masks."""
    rows = []
    for seed in seeds:
        suite = cached_suite(HarnessConfig(seed=seed))
        ft = suite.per_task_accuracy(suite.finetuned)
        runs = {"trained": [m for m, _ in localize_trained(suite, _trained_cfg(sparsity, shots))],
                "dataless": localize_dataless(suite, dataless_k)}
        for method, masks in runs.items():
            for t, g in enumerate(grafted_accuracy(suite, masks)):
                rows.append({"method": method, "seed": seed, "task": t, "sparsity": masks[t].sparsity(),
                             "finetuned_acc": ft[t], "grafted_acc": g, "ratio": g / ft[t]})
    summary = {}
    for method in ("trained", "dataless"):
        per_task = {}
        for r in rows:
            if r["method"] == method:
                per_task.setdefault(r["task"], []).append(r["ratio"])
        med = [float(np.median(per_task[t])) for t in sorted(per_task)]
        summary[method] = {"median_ratio_per_task": med, "min_median_ratio": min(med)}
    config = {"seeds": list(seeds), "sparsity": sparsity, "dataless_k": dataless_k, "shots": shots}
    return _emit(out_dir, "grafting", rows, summary, config)


def conflict(out_dir, seeds=DEFAULT_SEEDS, sparsity=0.05, shots=64, pair=(0, 1)):
    """Averaging vs stitching on the two tasks that share inputs but disagree on labels."""
    rows = []
    for seed in seeds:
        suite = cached_suite(HarnessConfig(seed=seed, conflict=True))
        i, j = pair
        sub = Suite(suite.config, replace(suite.data, tasks=[suite.tasks[i], suite.tasks[j]]), suite.pre,
                    [suite.finetuned[i], suite.finetuned[j]])
        single = sub.per_task_accuracy(sub.finetuned)
        avg = sub.accuracy(simple_average(sub.finetuned))
        masks = [m for m, _ in localize_trained(sub, _trained_cfg(sparsity, shots))]
        stitched = sub.accuracy(merged_with_masks(sub, masks))
        for k, t in enumerate(pair):
            gap = single[k] - avg[k]
            rows.append({"method": "lns", "seed": seed, "task": t, "single_acc": single[k], "average_acc": avg[k],
                         "stitched_acc": stitched[k], "degradation": gap,
                         "recovery": (stitched[k] - avg[k]) / gap if gap > 0 else None})
    by_seed = {}
    for r in rows:
        by_seed.setdefault(r["seed"], []).append(r)
    min_deg = [min(r["degradation"] for r in rs) for rs in by_seed.values()]
    gap_rec = []
    for rs in by_seed.values():
        gap = sum(r["degradation"] for r in rs)
        gap_rec.append(sum(r["stitched_acc"] - r["average_acc"] for r in rs) / gap if gap > 0 else float("nan"))
    summary = {"median_min_degradation": float(np.median(min_deg)), "median_gap_recovery": float(np.median(gap_rec)),
               "gap_recovery_per_seed": gap_rec}
    config = {"seeds": list(seeds), "sparsity": sparsity, "shots": shots, "pair": list(pair)}
    return _emit(out_dir, "conflict", rows, summary, config)


def sparsity_sweep(out_dir, seeds=DEFAULT_SEEDS, grid=SPARSITY_GRID, method="trained", shots=64):
    rows = []
    for seed in seeds:
        suite = cached_suite(HarnessConfig(seed=seed))
        rows += analysis.sparsity_sweep(suite, grid, method, _trained_cfg(shots=shots))
    med = analysis.median_by(rows, "sparsity")
    best = max(med, key=med.get)
    summary = {"median_merged_by_sparsity": {str(k): v for k, v in med.items()}, "best_sparsity": best,
               "interior_maximum": bool(med[best] > med[min(grid)] and med[best] > med[max(grid)])}
    config = {"seeds": list(seeds), "grid": list(grid), "method": method, "shots": shots}
    return _emit(out_dir, "sparsity-sweep", rows, summary, config)


def shots_sweep(out_dir, seeds=DEFAULT_SEEDS, grid=SHOT_GRID, sparsity=0.05, dataless_k=5.0):
    rows = []
    for seed in seeds:
        suite = cached_suite(HarnessConfig(seed=seed))
        rows += analysis.shots_sweep(suite, grid, _trained_cfg(sparsity), dataless_k)
    med = analysis.median_by([r for r in rows if r["method"] == "lns"], "shots")
    dataless = float(np.median([r["merged_avg"] for r in rows if r["method"] == "lns-dataless"]))
    summary = {"median_merged_by_shots": {str(k): v for k, v in med.items()}, "median_dataless": dataless,
               "max_shots_ge_min_shots": med[max(grid)] >= med[min(grid)]}
    config = {"seeds": list(seeds), "grid": list(grid), "sparsity": sparsity, "dataless_k": dataless_k}
    return _emit(out_dir, "shots-sweep", rows, summary, config)


def random_paramset(n: int, seed: int = 0, n_tensors: int = 4) -> ParamSet:
    """``n`` standard-normal float32 parameters split over a few tensors."""
    rng = np.random.default_rng(seed)
    sizes = np.full(n_tensors, n // n_tensors)
    sizes[-1] += n - sizes.sum()
    return ParamSet({f"layer{i}.w": rng.standard_normal(int(k)).astype(np.float32) for i, k in enumerate(sizes)})


def compression(out_dir, seeds=DEFAULT_SEEDS, n_params=1_000_000, sparsity=0.01):
    """PSET vs SPTV sizes for a large random model and for the toy suite's masked task vectors."""
    rows = []
    pre = random_paramset(n_params, 0)
    noise = random_paramset(n_params, 1)
    ft = pre.map(lambda n, a: a + np.float32(0.01) * noise[n])
    tv = compute_task_vector(pre, ft)
    s = mask_apply(dataless_localize(tv, 100 * sparsity), tv)
    for r in analysis.compression_rows(ft, [s]):
        rows.append({"model": "random", "seed": 0, **r})
    for seed in seeds:
        suite = cached_suite(HarnessConfig(seed=seed))
        svs = sparse_vectors(suite, localize_dataless(suite, 100 * sparsity))
        for r in analysis.compression_rows(suite.pre, svs):
            rows.append({"model": "toy", "seed": seed, **r})
    summary = {"random_ratio": rows[0]["ratio"], "max_toy_ratio": max(r["ratio"] for r in rows[1:])}
    config = {"seeds": list(seeds), "n_params": n_params, "sparsity": sparsity}
    return _emit(out_dir, "compression", rows, summary, config)


def continual(out_dir, seeds=DEFAULT_SEEDS, initial=2, sparsity=0.05):
    """Stitch ``initial`` tasks, then add the remaining ones one at a time.

    Each step is checked bit-for-bit against stitching from scratch.
    """
    rows, timings = [], []
    for seed in seeds:
        suite = cached_suite(HarnessConfig(seed=seed))
        svs = sparse_vectors(suite, localize_dataless(suite, 100 * sparsity))
        ids = [f"{t:06d}" for t in range(len(svs))]
        state = StitchState.from_tasks(suite.pre, dict(zip(ids[:initial], svs[:initial])))
        for step in range(initial, len(svs)):
            t0 = time.perf_counter()
            state.add(ids[step], svs[step])
            timings.append({"seed": seed, "step": step + 1, "seconds": time.perf_counter() - t0})
            merged = state.merged()
            scratch = stitch(suite.pre, dict(zip(ids[: step + 1], svs[: step + 1])))[0]
            rows.append({"method": "lns-dataless", "seed": seed, "n_tasks": step + 1,
                         "merged_avg": float(np.mean(suite.accuracy(merged)[: step + 1])),
                         "bit_identical": merged == scratch, "fingerprint": f"{merged.fingerprint:016x}"})
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    analysis.write_json(Path(out_dir) / TIMINGS, timings)
    summary = {"all_bit_identical": all(r["bit_identical"] for r in rows)}
    config = {"seeds": list(seeds), "initial": initial, "sparsity": sparsity}
    return _emit(out_dir, "continual", rows, summary, config)


def retention(out_dir, seeds=DEFAULT_SEEDS, sparsity=0.05, shots=64):
    """Accuracy on pretraining-only clusters before and after merging, per method."""
    rows = []
    for seed in seeds:
        suite = cached_suite(HarnessConfig(seed=seed))
        for method in ("simple", "ta", "ties"):
            merged, _ = run_method(suite, method)
            rows.append(analysis.retention_row(suite, method, merged))
        masks = localize_dataless(suite, 100 * sparsity)
        rows.append(analysis.retention_row(suite, "lns-dataless", merged_with_masks(suite, masks), masks))
        masks = [m for m, _ in localize_trained(suite, _trained_cfg(sparsity, shots))]
        rows.append(analysis.retention_row(suite, "lns", merged_with_masks(suite, masks), masks))
    summary = {"median_delta": analysis.median_by(rows, "method", "delta"),
               "median_task_avg": analysis.median_by(rows, "method", "task_avg")}
    config = {"seeds": list(seeds), "sparsity": sparsity, "shots": shots}
    return _emit(out_dir, "retention", rows, summary, config)


BUNDLES = {
    "grafting": grafting,
    "conflict": conflict,
    "sparsity-sweep": sparsity_sweep,
    "shots-sweep": shots_sweep,
    "compression": compression,
    "continual": continual,
    "retention": retention,
}
