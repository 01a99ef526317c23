"""Reference merging methods: averaging, task arithmetic, TIES, Fisher and RegMean."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import BaseMismatchError, SingularityError, UsageError
from .localizer import dataless_localize
from .params import ParamSet, TaskVector, apply_delta, check_same_layout
from .toymodel import ToyArch, layer_inputs, per_example_grads

TA_ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))


def _check_models(models: Sequence[ParamSet]):
    if not models:
        raise UsageError("need at least one model")
    for m in models[1:]:
        check_same_layout(models[0], m)


def simple_average(models: Sequence[ParamSet]) -> ParamSet:
    """Coordinatewise mean, accumulated in list order."""
    _check_models(models)
    out = {}
    for name in models[0]:
        acc = np.zeros(models[0][name].shape, np.float64)
        for m in models:
            acc += m[name]
        out[name] = acc / len(models)
    return ParamSet(out)


def task_arithmetic(pre: ParamSet, tvs: Sequence[TaskVector], alpha: float = 0.4) -> ParamSet:
    """pre + alpha * sum(tau_i)."""
    return apply_delta(pre, [(alpha, tv) for tv in tvs])


def tune_alpha(fn, evaluate, grid=TA_ALPHA_GRID):
    """Pick the grid value whose merged model scores best on validation.

    ``fn(alpha) -> ParamSet``; ``evaluate(ParamSet) -> float``. Earliest value wins ties.
    Returns ``(best_alpha, best_model, scores)``.
    """
    scores = {}
    best = None
    for a in grid:
        model = fn(a)
        scores[a] = evaluate(model)
        if best is None or scores[a] > scores[best[0]]:
            best = (a, model)
    return best[0], best[1], scores


@dataclass
class TiesTrace:
    """Per-tensor intermediates of a TIES merge (for invariant checks)."""

    trimmed: dict[str, np.ndarray]  # (tasks, numel)
    elected: dict[str, np.ndarray]  # sign in {-1, 0, 1}
    merged_delta: dict[str, np.ndarray]


def ties_merge(pre: ParamSet, tvs: Sequence[TaskVector], k_percent: float = 20.0, alpha: float = 1.0,
               maskable=None, return_trace: bool = False):
    """Trim each task vector to its global top-k%, elect a sign, average agreeing values.

    The elected sign is the sign of the total (positive mass plus negative
    mass); a zero total elects nothing and leaves the coordinate at ``pre``.
    """
    if not tvs:
        raise UsageError("need at least one task vector")
    if not 0 < k_percent <= 100:
        raise UsageError(f"k_percent must be in (0, 100], got {k_percent}")
    for tv in tvs:
        check_same_layout(pre, tv.delta)
        if tv.base_fingerprint != pre.fingerprint:
            raise BaseMismatchError("task vector was computed against another pretrained model")
    masks = [dataless_localize(tv, k_percent, maskable) for tv in tvs]
    trace = TiesTrace({}, {}, {})
    out = {}
    for name in pre:
        trimmed = np.stack([np.where(m.bits[name], tv.delta[name].ravel(), np.float32(0))
                            for m, tv in zip(masks, tvs)])
        pos = np.where(trimmed > 0, trimmed, 0).astype(np.float64).sum(axis=0)
        neg = np.where(trimmed < 0, trimmed, 0).astype(np.float64).sum(axis=0)
        elected = np.sign(pos + neg)
        agree = (np.sign(trimmed) == elected) & (elected != 0)
        n_agree = agree.sum(axis=0)
        total = np.where(agree, trimmed, 0).astype(np.float32).sum(axis=0, dtype=np.float32)
        delta = np.zeros(trimmed.shape[1], np.float32)
        on = n_agree > 0
        delta[on] = total[on] / n_agree[on].astype(np.float32)
        base = pre[name].ravel()
        out[name] = (base + np.float32(alpha) * delta).reshape(pre[name].shape)
        trace.trimmed[name], trace.elected[name], trace.merged_delta[name] = trimmed, elected, delta
    merged = ParamSet(out)
    return (merged, trace) if return_trace else merged


# -- Fisher merging -----------------------------------------------------------


@dataclass
class FisherDiag:
    values: ParamSet
    n_samples: int


def fisher_estimate(arch: ToyArch, params: ParamSet, data, n_samples: int = 256) -> FisherDiag:
    """Empirical diagonal Fisher: mean squared per-example gradient of the true-label log-likelihood."""
    if n_samples < 1:
        raise UsageError("n_samples must be >= 1")
    x, y = data
    if len(x) == 0:
        raise UsageError("no data for Fisher estimation")
    x, y = x[:n_samples], y[:n_samples]
    acc = {n: np.zeros(params[n].shape, np.float64) for n in params}
    for g in per_example_grads(arch, params, x, y):
        for n in acc:
            acc[n] += g[n] ** 2
    return FisherDiag(ParamSet({n: v / len(x) for n, v in acc.items()}), len(x))


def fisher_merge(models: Sequence[ParamSet], fishers: Sequence[FisherDiag | ParamSet], eps: float = 1e-8) -> ParamSet:
    """sum_i F_i * theta_i / (sum_i F_i + eps), coordinatewise."""
    _check_models(models)
    if len(fishers) != len(models):
        raise UsageError(f"{len(models)} models but {len(fishers)} Fisher estimates")
    if eps <= 0:
        raise UsageError("eps must be > 0")
    fs = [f.values if isinstance(f, FisherDiag) else f for f in fishers]
    for f in fs:
        check_same_layout(models[0], f, "model vs Fisher")
    out = {}
    for name in models[0]:
        num = np.zeros(models[0][name].shape, np.float64)
        den = np.zeros_like(num)
        for m, f in zip(models, fs):
            w = np.asarray(f[name], np.float64)
            num += w * m[name]
            den += w
        out[name] = num / (den + eps)
    return ParamSet(out)


# -- RegMean ----------------------------------------------------------------


def _augmented(w, b):
    return np.vstack([np.asarray(w, np.float64), np.asarray(b, np.float64)[None, :]])


def gram_matrices(arch: ToyArch, params: ParamSet, x) -> tuple[dict[str, np.ndarray], int]:
    """X^T X of the (bias-augmented) inputs feeding each affine layer."""
    feats = layer_inputs(arch, params, x)
    out = {}
    for layer, h in feats.items():
        h1 = np.hstack([h, np.ones((len(h), 1))])
        out[layer] = h1.T @ h1
    return out, len(x)


def grams_to_pset(grams: Mapping[str, np.ndarray]) -> ParamSet:
    return ParamSet({f"gram.{layer}": g for layer, g in grams.items()})


def grams_from_pset(p: ParamSet) -> dict[str, np.ndarray]:
    return {n[len("gram."):]: np.asarray(p[n], np.float64) for n in p if n.startswith("gram.")}


def regmean_merge(models: Sequence[ParamSet], grams: Sequence[Mapping[str, np.ndarray]],
                  ridge_rel: float = 1e-3, affine_layers=None) -> ParamSet:
    """Per affine layer, solve (sum G_i + r I) W = sum G_i W_i + r * mean(W_i); average everything else.

    ``r = ridge_rel * tr(sum G_i) / dim``. The ridge pulls toward the simple
    average rather than toward zero, so identical Grams (or a single model)
    give the plain average exactly even when the Grams are rank deficient.
    Layer ``L`` owns tensors ``L.w`` (fan_in, fan_out) and ``L.b``; the bias is
    the last row of the augmented weight.
    """
    _check_models(models)
    if len(grams) != len(models):
        raise UsageError(f"{len(models)} models but {len(grams)} Gram sets")
    if ridge_rel < 0:
        raise UsageError("ridge_rel must be >= 0")
    if affine_layers is None:
        affine_layers = sorted({n[:-2] for n in models[0] if n.endswith(".w") and f"{n[:-2]}.b" in models[0]})
    out = dict(simple_average(models))
    for layer in affine_layers:
        missing = [i for i, g in enumerate(grams) if layer not in g]
        if missing:
            raise UsageError(f"no Gram matrix for layer {layer!r} (models {missing})")
        G = sum(np.asarray(g[layer], np.float64) for g in grams)
        Ws = [_augmented(m[f"{layer}.w"], m[f"{layer}.b"]) for m in models]
        dim = G.shape[0]
        ridge = ridge_rel * np.trace(G) / dim
        rhs = sum(np.asarray(g[layer], np.float64) @ W for g, W in zip(grams, Ws)) + ridge * np.mean(Ws, axis=0)
        A = G + ridge * np.eye(dim)
        try:
            W = scipy.linalg.solve(A, rhs, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
            raise SingularityError(f"RegMean system for layer {layer!r} is singular: {exc}") from exc
        if not np.all(np.isfinite(W)):
            raise SingularityError(f"RegMean system for layer {layer!r} produced non-finite weights")
        out[f"{layer}.w"], out[f"{layer}.b"] = W[:-1], W[-1]
    return ParamSet(out)
