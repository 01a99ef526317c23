"""Command-line entry point.

Every command writes ``resolved_config.json`` next to its outputs. Running
``locstitch --config <that file>`` (with no other arguments) repeats the run;
flags given on the command line override values from a config file.
Wall-clock information goes to ``provenance.json`` and is the only output
that differs between identical runs.

Exit codes: 0 ok, 1 usage, 2 numeric failure, 3 input mismatch, 4 corrupt file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, analysis, experiments
from .errors import LocStitchError, MismatchError, UsageError
from .harness import METHODS, HarnessConfig, Suite, build_suite, run_method, union_fraction
from .localizer import LocalizeConfig, LossContext, dataless_localize, lambda_autosearch, train_mask
from .params import all_equal, compute_task_vector, load_pset, save_pset
from .seeding import substream
from .sparse import (compression_report, load_mask, load_sptv, mask_apply, mask_distribution, save_mask,
                     save_sptv)
from .stitcher import StitchState, stitch
from .toymodel import component_of, gen_task_suite, layer_of

OUT_ENV = "LOCSTITCH_OUT"
RESOLVED = "resolved_config.json"
PROVENANCE = "provenance.json"
# wall-clock files; everything else a command writes is a deterministic function of the resolved config
METADATA_FILES = (RESOLVED, PROVENANCE, experiments.TIMINGS)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- suite helpers ---------------------------------------------------------------


def _harness_from(d: dict) -> HarnessConfig:
    return HarnessConfig(**d)


def load_suite(directory) -> Suite:
    """Rebuild a Suite from a ``suite`` command output directory (data is regenerated from the seed)."""
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"not a suite directory: {d} ({exc})") from exc
    cfg = _harness_from(manifest["harness"])
    pre = load_pset(d / manifest["pretrained"]["file"])
    finetuned = [load_pset(d / t["file"]) for t in manifest["tasks"]]
    for entry, p in zip([manifest["pretrained"], *manifest["tasks"]], [pre, *finetuned]):
        if entry["fingerprint"] != f"{p.fingerprint:016x}":
            raise MismatchError(f"{entry['file']} does not match the suite manifest fingerprint")
    return Suite(cfg, gen_task_suite(cfg.suite_config()), pre, finetuned)


def _task_ids(suite: Suite, task):
    return range(len(suite.tasks)) if task is None else [task]


# -- commands --------------------------------------------------------------------


def cmd_suite(a, out: Path):
    cfg = HarnessConfig(seed=a.seed, n_tasks=a.n_tasks, conflict=a.conflict, epochs=a.epochs, lr=a.lr)
    suite = build_suite(cfg)
    save_pset(suite.pre, out / "pretrained.pset")
    tasks = []
    for t, ft in enumerate(suite.finetuned):
        name = f"task{t}.pset"
        save_pset(ft, out / name)
        tasks.append({"name": suite.tasks[t].name, "file": name, "fingerprint": f"{ft.fingerprint:016x}",
                      "test_acc": suite.per_task_accuracy(suite.finetuned)[t]})
    manifest = {"harness": cfg.to_dict(), "data": suite.data.manifest,
                "pretrained": {"file": "pretrained.pset", "fingerprint": f"{suite.pre.fingerprint:016x}"},
                "tasks": tasks}
    analysis.write_json(out / "manifest.json", manifest)
    return {"n_files": len(tasks) + 1, "fingerprints": [t["fingerprint"] for t in tasks]}


def cmd_localize(a, out: Path):
    suite = load_suite(a.suite)
    if a.trained == a.dataless:
        raise UsageError("choose exactly one of --trained / --dataless")
    summary = []
    for t in _task_ids(suite, a.task):
        tv = suite.tvs[t]
        record = {"task": t, "method": "trained" if a.trained else "dataless", "sparsity_percent": a.sparsity}
        if a.dataless:
            mask = dataless_localize(tv, a.sparsity)
        else:
            cfg = LocalizeConfig(sparsity=a.sparsity / 100.0, lam=a.lam, lr=a.lr, epochs=a.epochs, shots=a.shots,
                                 autosearch=a.auto_lambda, seed=a.seed)
            shots = suite.tasks[t].kshot(cfg.shots, suite.config.seed)
            ctx = LossContext(suite.arch, shots, cfg.batch_size,
                              int(substream(suite.config.seed, "mask", t, cfg.seed).integers(2**31)))
            if cfg.autosearch:
                cfg, mask, _ = lambda_autosearch(tv, suite.pre, ctx, cfg)
            else:
                _, mask = train_mask(tv, suite.pre, ctx, cfg)
            record["lambda"] = cfg.lam
        s = mask_apply(mask, tv)
        save_mask(mask, out / f"task{t}.mask")
        save_sptv(s, out / f"task{t}.sptv")
        record.update({"achieved_sparsity": mask.sparsity(), "nnz": s.nnz,
                       "base_fingerprint": f"{s.base_fingerprint:016x}"})
        if a.verify:
            record["verified"] = load_mask(out / f"task{t}.mask") == mask and load_sptv(out / f"task{t}.sptv") == s
            if not record["verified"]:
                raise MismatchError(f"task {t}: written mask/SPTV did not round-trip")
        analysis.write_json(out / f"task{t}.json", record)
        summary.append(record)
    return {"tasks": summary}


def _parse_add(items):
    out = {}
    for item in items or []:
        tid, sep, path = item.partition("=")
        if not sep:
            tid, path = Path(item).stem, item
        out[tid] = load_sptv(path)
    return out


def cmd_stitch(a, out: Path):
    if a.state and Path(a.state, "manifest.json").exists():
        if a.sptv or a.pre:
            raise UsageError("--pre/--sptv build a new state; use --add with an existing --state")
        state = StitchState.load(a.state)
    else:
        if not a.pre:
            raise UsageError("--pre is required when not resuming a saved --state")
        pre = load_pset(a.pre)
        state = StitchState.from_tasks(pre, {Path(p).stem: load_sptv(p) for p in a.sptv or []})
    for tid, s in _parse_add(a.add).items():
        state.add(tid, s)
    for tid in a.remove or []:
        state.remove(tid)
    merged = state.merged()
    save_pset(merged, out / "merged.pset")
    if a.state:
        state.save(a.state)
    result = {"task_ids": state.task_ids, "fingerprint": f"{merged.fingerprint:016x}",
              "union_size": state.weights().union_size(), "counts_checksum": f"{state.counts_checksum():016x}"}
    if a.verify:
        scratch, _ = stitch(state.pre, state.tasks)
        result["verified"] = all_equal(scratch, merged)
        if not result["verified"]:
            raise MismatchError("incremental stitch differs from stitching from scratch")
    return result


def cmd_merge(a, out: Path):
    suite = load_suite(a.suite)
    kw = {}
    if a.method == "ta":
        kw = {"alpha": 0.4 if a.alpha is None else a.alpha, "tune": a.tune}
    elif a.method == "ties":
        kw = {"k_percent": a.k, "alpha": 1.0 if a.alpha is None else a.alpha}
    elif a.method == "fisher":
        kw = {"n_samples": a.n_samples}
    elif a.method == "regmean":
        kw = {"n_samples": a.n_samples, "ridge_rel": a.ridge}
    elif a.method == "lns":
        kw = {"localize": LocalizeConfig(sparsity=a.sparsity / 100.0, shots=a.shots, lam=a.lam, lr=a.lr,
                                         epochs=a.epochs, autosearch=a.auto_lambda, seed=a.seed)}
    elif a.method == "lns-dataless":
        kw = {"k_percent": a.sparsity}
    merged, hyper = run_method(suite, a.method, **kw)
    save_pset(merged, out / "merged.pset")
    report = analysis.MergeReport.build(
        a.method, hyper, suite.accuracy(merged), pretrain_accuracy=suite.pretrain_accuracy(merged),
        union_fraction=hyper.get("union_fraction"), seeds=[suite.config.seed])
    report.check(len(suite.tasks))
    analysis.write_json(out / "report.json", report.to_dict(with_timestamps=False))
    return {"average": report.average, "fingerprint": f"{merged.fingerprint:016x}"}


def cmd_analyze(a, out: Path):
    suite = load_suite(a.suite)
    ids = sorted(int(p.stem[4:]) for p in Path(a.masks).glob("task*.mask"))
    if not ids:
        raise UsageError(f"no task*.mask files in {a.masks}")
    masks = [load_mask(Path(a.masks) / f"task{t}.mask") for t in ids]
    svs = [mask_apply(m, suite.tvs[t]) for m, t in zip(masks, ids)]
    jac, cos = analysis.pairwise_matrices(masks, svs)
    for name, mat in (("jaccard", jac), ("cosine", cos)):
        analysis.write_csv(out / f"{name}.csv",
                           [{"task": i, **{f"task{j}": mat[r, c] for c, j in enumerate(ids)}} for r, i in enumerate(ids)])
    rows = []
    for m, t in zip(masks, ids):
        for grouping, fn in (("layer", layer_of), ("component", component_of)):
            rows += [{"task": t, "grouping": grouping, "group": g, "fraction": f} for g, f in mask_distribution(m, fn)]
    analysis.write_csv(out / "distribution.csv", rows)
    merged, _ = stitch(suite.pre, svs)
    summary = {"tasks": ids, "union_fraction": union_fraction(masks),
               "retention": dict(zip(("pre_acc", "merged_acc", "delta"),
                                     analysis.retention_check(suite.pre, merged, suite.data.heldout.test, suite.arch)))}
    analysis.write_json(out / "analysis.json", {"schema_version": analysis.SCHEMA_VERSION, **summary})
    return summary


def cmd_compress(a, out: Path):
    pre, ft = load_pset(a.pre), load_pset(a.ft)
    tv = compute_task_vector(pre, ft)
    s = mask_apply(dataless_localize(tv, a.sparsity), tv)
    save_sptv(s, out / "task.sptv")
    dense_b, sparse_b, ratio = compression_report(ft, s)
    result = {"pset_bytes": dense_b, "sptv_bytes": sparse_b, "ratio": ratio, "nnz": s.nnz}
    if a.verify:
        result["verified"] = load_sptv(out / "task.sptv") == s
        if not result["verified"]:
            raise MismatchError("SPTV round-trip failed")
    analysis.write_json(out / "compression.json", result)
    return result


def cmd_experiment(a, out: Path):
    fn = experiments.BUNDLES[a.name]
    return fn(out, seeds=tuple(a.seeds))


# -- parser ----------------------------------------------------------------------

COMMANDS = {"suite": cmd_suite, "localize": cmd_localize, "stitch": cmd_stitch, "merge": cmd_merge,
            "analyze": cmd_analyze, "compress": cmd_compress, "experiment": cmd_experiment}


def _localize_flags(p, sparsity):
    p.add_argument("--sparsity", type=float, default=sparsity, help="percent of maskable parameters")
    p.add_argument("--shots", type=int, default=64, help="labelled examples per class")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1000.0)
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    p.add_argument("--auto-lambda", action="store_true", help="search lambda to hit --sparsity")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", default=os.environ.get(OUT_ENV, "runs"),
                        help=f"output directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--verify", action="store_true", help="recompute and check results where possible")

    parser = _Parser(prog="locstitch", description=__doc__.split("\n\n")[0])
    parser.add_argument("--config", help="JSON file of option values (flags override)")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("suite", parents=[common], help="generate, pretrain and finetune the toy suite")
    p.add_argument("--n-tasks", type=int, default=6)
    p.add_argument("--conflict", action="store_true", help="make tasks 0 and 1 share inputs with clashing labels")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)

    p = sub.add_parser("localize", parents=[common], help="find masks and write MASK + SPTV files")
    p.add_argument("--suite", required=True)
    p.add_argument("--task", type=int, help="task index (default: all)")
    p.add_argument("--trained", action="store_true")
    p.add_argument("--dataless", action="store_true")
    _localize_flags(p, 1.0)

    p = sub.add_parser("stitch", parents=[common], help="stitch SPTV files onto a pretrained model")
    p.add_argument("--pre")
    p.add_argument("--sptv", nargs="*")
    p.add_argument("--state", help="stitch-state directory to create or update")
    p.add_argument("--add", nargs="*", metavar="ID=PATH")
    p.add_argument("--remove", nargs="*", metavar="ID")

    p = sub.add_parser("merge", parents=[common], help="merge a suite with one method and report accuracy")
    p.add_argument("--suite", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--alpha", type=float, help="task arithmetic (0.4) or TIES (1.0) scale")
    p.add_argument("--tune", action="store_true", help="pick task-arithmetic alpha on validation")
    p.add_argument("-k", type=float, default=20.0, help="TIES trim percent")
    p.add_argument("--n-samples", type=int, default=256)
    p.add_argument("--ridge", type=float, default=1e-3)
    _localize_flags(p, 5.0)

    p = sub.add_parser("analyze", parents=[common], help="overlap matrices and mask distributions")
    p.add_argument("--suite", required=True)
    p.add_argument("--masks", required=True, help="directory of task*.mask files")

    p = sub.add_parser("compress", parents=[common], help="store a finetuned model as a sparse task vector")
    p.add_argument("--pre", required=True)
    p.add_argument("--ft", required=True)
    p.add_argument("--sparsity", type=float, default=1.0, help="percent kept")

    p = sub.add_parser("experiment", parents=[common], help="run a desk-scale experiment bundle")
    p.add_argument("name", choices=sorted(experiments.BUNDLES))
    p.add_argument("--seeds", type=int, nargs="+", default=list(experiments.DEFAULT_SEEDS))
    return parser


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise UsageError(f"unknown command {command!r}")


def parse_args(argv):
    """Parse flags on top of an optional JSON config; returns the resolved namespace."""
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    config = {}
    if known.config:
        try:
            config = json.loads(Path(known.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {known.config}: {exc}") from exc
        if not isinstance(config, dict):
            raise UsageError("config file must hold a JSON object")
    parser = build_parser()
    if not any(arg in COMMANDS for arg in rest):
        if any(arg in ("-h", "--help", "--version") for arg in rest):
            parser.parse_args(rest)  # prints and exits
        stray = [arg for arg in rest if not arg.startswith("-")]
        if stray and "command" not in config:
            raise UsageError(f"unknown command {stray[0]!r}; choose from {', '.join(COMMANDS)}")
        if "command" not in config:
            parser.print_help(sys.stderr)
            raise UsageError("no command given")
        rest = [config["command"], *rest]
    command = next(arg for arg in rest if arg in COMMANDS)
    sp = _subparser(parser, command)
    dests = {act.dest for act in sp._actions} - {"help"}
    unknown = set(config) - dests - {"command"}
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
    positional = {act.dest for act in sp._actions if not act.option_strings}
    sp.set_defaults(**{k: v for k, v in config.items() if k in dests and k not in positional})
    for act in sp._actions:
        if act.dest in config and act.option_strings:
            act.required = False
    if "name" in positional and "name" in config and not any(r in experiments.BUNDLES for r in rest):
        rest = [*rest[: rest.index(command) + 1], config["name"], *rest[rest.index(command) + 1:]]
    args = parser.parse_args(rest)
    args.config = known.config
    return args


def resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "config"}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        analysis.write_json(out / RESOLVED, resolved(args))
        started = datetime.now(timezone.utc).isoformat()
        t0 = time.perf_counter()
        result = COMMANDS[args.command](args, out)
        analysis.write_json(out / PROVENANCE, {"started": started, "seconds": time.perf_counter() - t0,
                                               "argv": argv, "version": __version__})
        print(json.dumps(result, sort_keys=True, default=analysis._json_default))
        return 0
    except LocStitchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
