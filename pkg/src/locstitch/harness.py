"""Desk-scale pipeline: build a task suite, pretrain, finetune, localize, merge, evaluate."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from functools import cached_property

import numpy as np

from . import baselines
from .localizer import LocalizeConfig, LossContext, dataless_localize, lambda_autosearch, train_mask
from .params import ParamSet, TaskVector, compute_task_vector
from .seeding import substream
from .sparse import Mask, SparseTaskVector, mask_apply
from .stitcher import graft, stitch
from .toymodel import SuiteConfig, TaskSuite, ToyArch, evaluate, gen_task_suite, sgd_finetune


@dataclass
class HarnessConfig:
    seed: int = 0
    n_tasks: int = 6
    conflict: bool = False
    d_in: int = 32
    hidden: int = 64
    blocks: int = 2
    classes: int = 4
    pretrain_lr: float = 0.05
    pretrain_epochs: int = 20
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 16

    @property
    def arch(self) -> ToyArch:
        return ToyArch(self.d_in, self.hidden, self.blocks, self.classes)

    def suite_config(self) -> SuiteConfig:
        pair = (0, 1) if self.conflict else None
        return SuiteConfig(n_tasks=self.n_tasks, d_in=self.d_in, classes=self.classes, seed=self.seed,
                           conflict_pair=pair)

    def to_dict(self):
        return asdict(self)


@dataclass
class Suite:
    config: HarnessConfig
    data: TaskSuite
    pre: ParamSet
    finetuned: list[ParamSet]

    @property
    def arch(self) -> ToyArch:
        return self.config.arch

    @property
    def tasks(self):
        return self.data.tasks

    @cached_property
    def tvs(self) -> list[TaskVector]:
        return [compute_task_vector(self.pre, ft) for ft in self.finetuned]

    def accuracy(self, params, split="test") -> list[float]:
        return [evaluate(self.arch, params, t.split(split)) for t in self.tasks]

    def per_task_accuracy(self, models, split="test") -> list[float]:
        """Accuracy of the i-th model on the i-th task."""
        return [evaluate(self.arch, m, t.split(split)) for m, t in zip(models, self.tasks)]

    def pretrain_accuracy(self, params) -> float:
        """Accuracy on the pretraining-only clusters (held-out pretrained capability)."""
        return evaluate(self.arch, params, self.data.heldout.test)


def pretrain(cfg: HarnessConfig, data: TaskSuite) -> ParamSet:
    arch = cfg.arch
    init = arch.init(substream(cfg.seed, "init"))
    return sgd_finetune(arch, init, data.pretrain.train, lr=cfg.pretrain_lr, epochs=cfg.pretrain_epochs,
                        batch_size=cfg.batch_size, seed=int(substream(cfg.seed, "sgd", "pretrain").integers(2**31)))


def build_suite(cfg: HarnessConfig) -> Suite:
    data = gen_task_suite(cfg.suite_config())
    pre = pretrain(cfg, data)
    finetuned = []
    for t, task in enumerate(data.tasks):
        seed = int(substream(cfg.seed, "sgd", "finetune", t).integers(2**31))
        finetuned.append(sgd_finetune(cfg.arch, pre, task.train, lr=cfg.lr, epochs=cfg.epochs,
                                      batch_size=cfg.batch_size, seed=seed))
    return Suite(cfg, data, pre, finetuned)


def localize_trained(suite: Suite, cfg: LocalizeConfig) -> list[tuple[Mask, LocalizeConfig]]:
    out = []
    for t, (task, tv) in enumerate(zip(suite.tasks, suite.tvs)):
        shots = task.kshot(cfg.shots, suite.config.seed)
        mseed = int(substream(suite.config.seed, "mask", t, cfg.seed).integers(2**31))
        ctx = LossContext(suite.arch, shots, cfg.batch_size, mseed)
        if cfg.autosearch:
            tuned, mask, _ = lambda_autosearch(tv, suite.pre, ctx, cfg)
        else:
            tuned = cfg
            _, mask = train_mask(tv, suite.pre, ctx, cfg)
        out.append((mask, tuned))
    return out


def localize_dataless(suite: Suite, k_percent: float) -> list[Mask]:
    return [dataless_localize(tv, k_percent) for tv in suite.tvs]


def sparse_vectors(suite: Suite, masks) -> list[SparseTaskVector]:
    return [mask_apply(m, tv) for m, tv in zip(masks, suite.tvs)]


def merged_with_masks(suite: Suite, masks) -> ParamSet:
    return stitch(suite.pre, sparse_vectors(suite, masks))[0]


def grafted_accuracy(suite: Suite, masks, split="test") -> list[float]:
    return suite.per_task_accuracy([graft(suite.pre, s) for s in sparse_vectors(suite, masks)], split)


def union_fraction(masks) -> float:
    names = masks[0].bits
    union = sum(int(np.count_nonzero(np.logical_or.reduce([m.bits[n] for m in masks]))) for n in names)
    return union / masks[0].total_maskable()


def run_method(suite: Suite, method: str, **kw) -> tuple[ParamSet, dict]:
    """Merge the suite's finetuned models with one method; returns (model, resolved hyperparameters)."""
    pre, tvs, arch = suite.pre, suite.tvs, suite.arch
    val_avg = lambda m: float(np.mean(suite.accuracy(m, "val")))  # noqa: E731
    if method == "simple":
        return baselines.simple_average(suite.finetuned), {}
    if method == "ta":
        if kw.get("tune"):
            a, model, _ = baselines.tune_alpha(lambda a: baselines.task_arithmetic(pre, tvs, a), val_avg)
            return model, {"alpha": a, "tuned": True}
        alpha = kw.get("alpha", 0.4)
        return baselines.task_arithmetic(pre, tvs, alpha), {"alpha": alpha}
    if method == "ties":
        k, alpha = kw.get("k_percent", 20.0), kw.get("alpha", 1.0)
        return baselines.ties_merge(pre, tvs, k, alpha), {"k_percent": k, "alpha": alpha}
    if method == "fisher":
        n = kw.get("n_samples", 256)
        fishers = [baselines.fisher_estimate(arch, ft, t.val, n) for ft, t in zip(suite.finetuned, suite.tasks)]
        return baselines.fisher_merge(suite.finetuned, fishers), {"n_samples": n}
    if method == "regmean":
        n, ridge = kw.get("n_samples", 256), kw.get("ridge_rel", 1e-3)
        grams = [baselines.gram_matrices(arch, ft, t.val[0][:n])[0] for ft, t in zip(suite.finetuned, suite.tasks)]
        return baselines.regmean_merge(suite.finetuned, grams, ridge), {"n_samples": n, "ridge_rel": ridge}
    if method == "lns":
        cfg = kw.get("localize") or LocalizeConfig()
        results = localize_trained(suite, cfg)
        masks = [m for m, _ in results]
        return merged_with_masks(suite, masks), {
            "localize": cfg.to_dict(), "lambdas": [c.lam for _, c in results],
            "sparsities": [m.sparsity() for m in masks], "union_fraction": union_fraction(masks)}
    if method == "lns-dataless":
        k = kw.get("k_percent", 5.0)
        masks = localize_dataless(suite, k)
        return merged_with_masks(suite, masks), {"k_percent": k, "union_fraction": union_fraction(masks)}
    raise ValueError(f"unknown method {method!r}")


METHODS = ("simple", "ta", "ties", "fisher", "regmean", "lns", "lns-dataless")
