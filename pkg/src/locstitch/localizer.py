"""Finding small masks that carry a task's finetuning skill.

Two routes:

* :func:`dataless_localize` keeps the globally largest ``|tau|`` coordinates.
* :func:`train_mask` relaxes the mask to ``sigmoid(S)`` and runs SGD on
  ``loss(pre + sigmoid(S) * tau) + lam * sum(sigmoid(S))`` using a few labelled
  shots, then rounds ``S > 0`` to a binary mask.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import BaseMismatchError, DivergenceError, NumericError, UsageError
from .params import ParamSet, TaskVector, check_same_layout
from .sparse import Mask
from .toymodel import ToyArch, batch_order, loss_and_grad

_F32_MAX = float(np.finfo(np.float32).max)


def default_maskable(names) -> list[str]:
    """Every tensor except embeddings."""
    return [n for n in names if "embedding" not in n]


def _resolve_maskable(names, maskable):
    maskable = default_maskable(names) if maskable is None else list(maskable)
    unknown = set(maskable) - set(names)
    if unknown:
        raise UsageError(f"unknown maskable tensors: {sorted(unknown)}")
    if not maskable:
        raise UsageError("maskable set is empty")
    return sorted(maskable)


def n_selected(k_percent: float, total: int) -> int:
    """round(k% of total), halves rounded up."""
    return min(total, int(math.floor(k_percent / 100.0 * total + 0.5)))


def dataless_localize(tv: TaskVector, k_percent: float, maskable=None) -> Mask:
    """Top-k% of |tau| over all maskable tensors jointly.

    Ties at the cut-off magnitude go to the earliest coordinate in canonical
    (tensor name, flat index) order.
    """
    if not 0 < k_percent <= 100:
        raise UsageError(f"k_percent must be in (0, 100], got {k_percent}")
    names = _resolve_maskable(list(tv.delta), maskable)
    flat = np.concatenate([np.abs(tv.delta[n]).ravel() for n in names])
    m = n_selected(k_percent, flat.size)
    chosen = np.zeros(flat.size, bool)
    chosen[np.argsort(-flat, kind="stable")[:m]] = True
    bits = {n: np.zeros(tv.delta[n].size, bool) for n in tv.delta}
    offset = 0
    for n in names:
        size = bits[n].size
        bits[n] = chosen[offset : offset + size]
        offset += size
    return Mask(bits, names)


def round_mask(scores, layout=None) -> Mask:
    """Binary mask with bit set iff sigmoid(S) > 0.5, i.e. S > 0.

    Tensors of ``layout`` without scores are non-maskable and get zero bits.
    """
    bits = {n: np.zeros(np.size(layout[n]), bool) for n in (layout or {})}
    bits.update({n: np.asarray(scores[n]).ravel() > 0 for n in scores})
    return Mask(bits, list(scores))


def sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * s))


@dataclass
class LocalizeConfig:
    sparsity: float = 0.01
    lam: float = 1e-3
    lr: float = 1000.0
    epochs: int = 10
    shots: int = 64
    batch_size: int = 16
    s_high: float = 3.0
    s_low: float = 0.0
    maskable: list[str] | None = None
    autosearch: bool = False
    autosearch_tol: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.sparsity <= 1:
            raise UsageError(f"sparsity must be in (0, 1], got {self.sparsity}")
        if self.lr <= 0:
            raise UsageError("lr must be > 0")
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.lam < 0:
            raise UsageError("lam must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossContext:
    """Loss source for mask training: a model architecture and a labelled batch source."""

    arch: ToyArch
    data: tuple[np.ndarray, np.ndarray]
    batch_size: int = 16
    seed: int = 0

    def batches(self, epoch: int):
        x, y = self.data
        for idx in batch_order(len(x), self.batch_size, self.seed, epoch):
            yield x[idx], y[idx]


def mask_objective(arch, pre, tau, scores, x, y, lam, need_grad=True):
    """Relaxed objective and its gradient w.r.t. the scores.

    ``pre``/``tau`` are float64 dicts over all tensors; ``scores`` covers only
    maskable tensors (the rest graft nothing).
    """
    sig = {n: sigmoid(s) for n, s in scores.items()}
    theta = {n: pre[n] + sig[n] * tau[n] if n in sig else pre[n] for n in pre}
    loss, _, g = loss_and_grad(arch, theta, x, y, need_grad=need_grad)
    value = loss + lam * sum(float(v.sum()) for v in sig.values())
    if not need_grad:
        return value, None
    grad = {n: (g[n] * tau[n] + lam) * sig[n] * (1.0 - sig[n]) for n in scores}
    return value, grad


def init_scores(tv: TaskVector, cfg: LocalizeConfig, maskable) -> dict[str, np.ndarray]:
    init = dataless_localize(tv, cfg.sparsity * 100.0, maskable)
    return {n: np.where(init.bits[n], cfg.s_high, cfg.s_low).reshape(tv.delta[n].shape) for n in maskable}


def train_mask(tv: TaskVector, pre: ParamSet, ctx: LossContext, cfg: LocalizeConfig, trace=None):
    """Optimise the relaxed mask with SGD; returns (scores ParamSet, binary Mask).

    ``trace``, when a list, receives the objective value of every step.
    """
    check_same_layout(pre, tv.delta)
    if tv.base_fingerprint != pre.fingerprint:
        raise BaseMismatchError("task vector was not computed against this pretrained model")
    if len(ctx.data[0]) == 0:
        raise UsageError("no shots available for mask training")
    maskable = _resolve_maskable(list(pre), cfg.maskable)
    P = {n: np.asarray(pre[n], np.float64) for n in pre}
    T = {n: np.asarray(tv.delta[n], np.float64) for n in pre}
    S = init_scores(tv, cfg, maskable)
    for epoch in range(cfg.epochs):
        for x, y in ctx.batches(epoch):
            value, grad = mask_objective(ctx.arch, P, T, S, np.asarray(x, np.float64), y, cfg.lam)
            if not np.isfinite(value):
                raise DivergenceError(f"mask objective became non-finite in epoch {epoch}")
            if trace is not None:
                trace.append(value)
            for n in S:
                S[n] -= cfg.lr * grad[n]
        if not all(np.all(np.abs(s) <= _F32_MAX) for s in S.values()):
            raise DivergenceError(f"mask scores left the float32 range in epoch {epoch}")
    scores = ParamSet(S)
    return scores, round_mask(scores, pre)


def lambda_autosearch(tv, pre, ctx, cfg: LocalizeConfig, lo=1e-9, hi=1e-1, max_iter=12):
    """Bisect log(lambda) until the trained mask's sparsity is within tolerance of the target.

    Returns ``(cfg_with_lambda, mask, scores)``.
    """
    target = cfg.sparsity
    low_ok, high_ok = target * (1 - cfg.autosearch_tol), target * (1 + cfg.autosearch_tol)
    if target >= 1.0:
        tuned = replace(cfg, lam=0.0)
        scores, mask = train_mask(tv, pre, ctx, tuned)
        return tuned, mask, scores

    def run(lam):
        tuned = replace(cfg, lam=lam)
        scores, mask = train_mask(tv, pre, ctx, tuned)
        return tuned, mask, scores, mask.sparsity()

    ends = {}
    for lam in (lo, hi):
        res = run(lam)
        if low_ok <= res[3] <= high_ok:
            return res[:3]
        ends[lam] = res
    if not (ends[lo][3] > high_ok and ends[hi][3] < low_ok):
        raise NumericError(
            f"no lambda bracket in [{lo:g}, {hi:g}]: sparsities {ends[lo][3]:.4f} .. {ends[hi][3]:.4f}, "
            f"target {target:.4f}"
        )
    a, b = math.log(lo), math.log(hi)
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        res = run(math.exp(mid))
        s = res[3]
        if best is None or abs(s - target) < abs(best[3] - target):
            best = res
        if low_ok <= s <= high_ok:
            return res[:3]
        if s > target:
            a = mid
        else:
            b = mid
    raise NumericError(
        f"lambda search did not reach sparsity {target:.4f}±{cfg.autosearch_tol:.0%}; "
        f"closest {best[3]:.4f} at lambda={best[0].lam:.3g}"
    )
