"""A small MLP with LayerNorm, trained and differentiated by hand in numpy.

Each hidden block is ``affine -> LayerNorm -> ReLU``; a final affine map yields
class logits and the loss is mean softmax cross-entropy. Affine weights are
stored ``(fan_in, fan_out)`` so a layer computes ``x @ w + b``.

All arithmetic runs in float64; parameters are stored as float32 ParamSets.
"""

from __future__ import annotations

import csv
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceError, StructuralMismatchError, UsageError
from .params import ParamSet
from .seeding import substream


@dataclass(frozen=True)
class ToyArch:
    d_in: int = 32
    hidden: int = 64
    blocks: int = 2
    classes: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        for k in ("d_in", "hidden", "blocks", "classes"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        fan_in = self.d_in
        for i in range(self.blocks):
            out[f"block{i}.linear.w"] = (fan_in, self.hidden)
            out[f"block{i}.linear.b"] = (self.hidden,)
            out[f"block{i}.ln.g"] = (self.hidden,)
            out[f"block{i}.ln.b"] = (self.hidden,)
            fan_in = self.hidden
        out["head.w"] = (fan_in, self.classes)
        out["head.b"] = (self.classes,)
        return out

    def affine_layers(self) -> list[str]:
        return [f"block{i}.linear" for i in range(self.blocks)] + ["head"]

    def init(self, rng: np.random.Generator) -> ParamSet:
        p = {}
        for name, shape in self.shapes().items():
            if name.endswith(".w"):
                p[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
            elif name.endswith(".g"):
                p[name] = np.ones(shape)
            else:
                p[name] = np.zeros(shape)
        return ParamSet(p)

    def check(self, params: Mapping):
        want = self.shapes()
        if set(params) != set(want):
            raise StructuralMismatchError(
                f"params do not match architecture: {sorted(set(params) ^ set(want))}"
            )
        for name, shape in want.items():
            if np.shape(params[name]) != shape:
                raise StructuralMismatchError(f"{name}: shape {np.shape(params[name])} != {shape}")

    def to_dict(self):
        return {"d_in": self.d_in, "hidden": self.hidden, "blocks": self.blocks,
                "classes": self.classes, "ln_eps": self.ln_eps}


def component_of(name: str) -> str:
    """Coarse component kind of a tensor name: 'linear', 'layernorm' or 'head'."""
    if name.startswith("head"):
        return "head"
    return "layernorm" if ".ln." in name else "linear"


def layer_of(name: str) -> str:
    return name.split(".")[0]


def _f64(params: Mapping) -> dict[str, np.ndarray]:
    return {n: np.asarray(params[n], dtype=np.float64) for n in params}


def _forward(arch: ToyArch, P, x):
    cache = []
    h = x
    for i in range(arch.blocks):
        z = h @ P[f"block{i}.linear.w"] + P[f"block{i}.linear.b"]
        mu = z.mean(axis=1, keepdims=True)
        var = z.var(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + arch.ln_eps)
        zhat = (z - mu) * inv_std
        u = zhat * P[f"block{i}.ln.g"] + P[f"block{i}.ln.b"]
        a = np.maximum(u, 0.0)
        cache.append((h, zhat, inv_std, u))
        h = a
    logits = h @ P["head.w"] + P["head.b"]
    return logits, cache, h


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _backward(arch: ToyArch, P, cache, last_h, dlogits):
    g = {"head.w": last_h.T @ dlogits, "head.b": dlogits.sum(axis=0)}
    dh = dlogits @ P["head.w"].T
    for i in reversed(range(arch.blocks)):
        h_in, zhat, inv_std, u = cache[i]
        du = dh * (u > 0)
        g[f"block{i}.ln.g"] = (du * zhat).sum(axis=0)
        g[f"block{i}.ln.b"] = du.sum(axis=0)
        dzhat = du * P[f"block{i}.ln.g"]
        dz = inv_std * (
            dzhat - dzhat.mean(axis=1, keepdims=True) - zhat * (dzhat * zhat).mean(axis=1, keepdims=True)
        )
        g[f"block{i}.linear.w"] = h_in.T @ dz
        g[f"block{i}.linear.b"] = dz.sum(axis=0)
        dh = dz @ P[f"block{i}.linear.w"].T
    return g


def _batch(batch):
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or len(x) == 0:
        raise UsageError("batch must contain at least one example")
    if len(x) != len(y):
        raise UsageError(f"{len(x)} inputs vs {len(y)} labels")
    return x, y


def loss_and_grad(arch: ToyArch, P, x, y, need_grad=True):
    """Mean cross-entropy, correct count, and (optionally) gradients for float64 params."""
    logits, cache, last_h = _forward(arch, P, x)
    logp = _log_softmax(logits)
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    correct = int((logits.argmax(axis=1) == y).sum())
    if not need_grad:
        return loss, correct, None
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    return loss, correct, _backward(arch, P, cache, last_h, dlogits)


def forward_loss(arch: ToyArch, params: Mapping, batch) -> tuple[float, int]:
    arch.check(params)
    x, y = _batch(batch)
    loss, correct, _ = loss_and_grad(arch, _f64(params), x, y, need_grad=False)
    return float(loss), correct


def backward(arch: ToyArch, params: Mapping, batch) -> dict[str, np.ndarray]:
    """Exact gradient of the mean loss, as float64 arrays keyed like the params."""
    arch.check(params)
    x, y = _batch(batch)
    _, _, grad = loss_and_grad(arch, _f64(params), x, y)
    return grad


def per_example_grads(arch: ToyArch, params: Mapping, x, y):
    """Yield the gradient of each single example's loss."""
    P = _f64(params)
    x = np.asarray(x, dtype=np.float64)
    for i in range(len(x)):
        yield loss_and_grad(arch, P, x[i : i + 1], np.asarray(y[i : i + 1]))[2]


def layer_inputs(arch: ToyArch, params: Mapping, x) -> dict[str, np.ndarray]:
    """Input activations feeding each affine layer."""
    P = _f64(params)
    _, cache, last_h = _forward(arch, P, np.asarray(x, dtype=np.float64))
    out = {f"block{i}.linear": cache[i][0] for i in range(arch.blocks)}
    out["head"] = last_h
    return out


def predict(arch: ToyArch, params: Mapping, x) -> np.ndarray:
    logits, _, _ = _forward(arch, _f64(params), np.asarray(x, dtype=np.float64))
    return logits.argmax(axis=1)


def evaluate(arch: ToyArch, params: Mapping, split) -> float:
    x, y = split
    if len(x) == 0:
        raise UsageError("cannot evaluate on an empty split")
    arch.check(params)
    return float(np.mean(predict(arch, params, x) == np.asarray(y)))


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Minibatch index lists; a pure function of (seed, epoch)."""
    perm = substream(seed, "batches", epoch).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def sgd_finetune(arch: ToyArch, init: ParamSet, data, lr=0.05, epochs=30, batch_size=16, seed=0) -> ParamSet:
    """Plain minibatch SGD from ``init``; deterministic given ``seed``."""
    arch.check(init)
    x, y = _batch(data)
    P = _f64(init)
    for epoch in range(epochs):
        for idx in batch_order(len(x), batch_size, seed, epoch):
            with np.errstate(over="ignore", invalid="ignore"):
                loss, _, g = loss_and_grad(arch, P, x[idx], y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became non-finite in epoch {epoch}")
            for n in P:
                P[n] -= lr * g[n]
    if not all(np.all(np.isfinite(v)) for v in P.values()):
        raise DivergenceError(f"parameters became non-finite in epoch {epochs - 1}")
    # Emit init + float32(update) so the result is exactly init + its own task vector.
    return ParamSet({n: init[n] + (P[n] - init[n]).astype(np.float32) for n in P})


# -- data ------------------------------------------------------------------


@dataclass
class TaskData:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    seed: int = 0

    def split(self, which: str):
        return getattr(self, f"x_{which}"), getattr(self, f"y_{which}")

    @property
    def train(self):
        return self.split("train")

    @property
    def val(self):
        return self.split("val")

    @property
    def test(self):
        return self.split("test")

    def kshot(self, k: int, seed: int):
        """k examples per class drawn from the validation split."""
        if k < 1:
            raise UsageError("shots must be >= 1")
        rng = substream(seed, "shots", self.name, k)
        picked = []
        for c in np.unique(self.y_val):
            idx = np.flatnonzero(self.y_val == c)
            picked.append(rng.permutation(idx)[:k])
        idx = np.sort(np.concatenate(picked))
        return self.x_val[idx], self.y_val[idx]


@dataclass
class SuiteConfig:
    """Shape of the synthetic multi-task suite."""

    n_tasks: int = 6
    d_in: int = 32
    classes: int = 4
    seed: int = 0
    conflict_pair: tuple[int, int] | None = None
    center_scale: float = 1.5  # per-coordinate std of cluster centers
    noise: float = 1.0
    background: float = 0.1
    n_train: int = 100  # per class
    n_val: int = 256
    n_test: int = 200
    n_pretrain: int = 80  # per cluster
    n_heldout: int = 8  # pretraining-only clusters


@dataclass
class TaskSuite:
    config: SuiteConfig
    tasks: list[TaskData]
    pretrain: TaskData
    heldout: TaskData  # pretraining-only clusters, never finetuned on
    manifest: dict = field(default_factory=dict)


def _sample(rng, centers, labels, basis, dims, d, background, n_per):
    xs, ys = [], []
    for c, lab in zip(centers, labels):
        x = rng.normal(size=(n_per, d)) * background
        x[:, dims] = c + rng.normal(size=(n_per, len(dims))) @ basis
        xs.append(x)
        ys.append(np.full(n_per, lab))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    perm = rng.permutation(len(x))
    return x[perm].astype(np.float32), y[perm]


def _rotation(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def task_dims(t: int, n_tasks: int, d_in: int) -> np.ndarray:
    """Input coordinates carrying task t's signal (wrapping when tasks outnumber dims).

    Block ``n_tasks`` (one past the last task) is reserved for pretraining-only clusters.
    """
    width = max(1, d_in // (n_tasks + 1))
    return (t * width + np.arange(width)) % d_in


def gen_task_suite(cfg: SuiteConfig) -> TaskSuite:
    """Gaussian-cluster classification tasks plus a generic-label pretraining mixture.

    Each task owns a block of input coordinates; its clusters (one per class)
    live there with a task-specific anisotropic noise rotation, and every other
    coordinate carries weak background noise. The pretraining task mixes all
    tasks' clusters, labelling each cluster with an independent random class.
    With a conflict pair (i, j), task j reuses task i's centers and rotation
    (in its own coordinates) and relabels them with a cyclic shift of i's labels.
    """
    if cfg.n_tasks < 1:
        raise UsageError("n_tasks must be >= 1")
    rng = substream(cfg.seed, "suite")
    C, d = cfg.classes, cfg.d_in
    dims = [task_dims(t, cfg.n_tasks, d) for t in range(cfg.n_tasks)]
    w = len(dims[0])
    spread = np.linspace(0.5, 1.5, w) * cfg.noise
    centers = [rng.normal(size=(C, w)) * cfg.center_scale for _ in range(cfg.n_tasks)]
    bases = [spread[:, None] * _rotation(rng, w) for _ in range(cfg.n_tasks)]
    labels = [rng.permutation(C) for _ in range(cfg.n_tasks)]
    if cfg.conflict_pair is not None:
        i, j = cfg.conflict_pair
        if i == j or not (0 <= i < cfg.n_tasks and 0 <= j < cfg.n_tasks):
            raise UsageError(f"bad conflict pair {cfg.conflict_pair}")
        centers[j] = centers[i].copy()
        bases[j] = bases[i]
        labels[j] = np.roll(labels[i], 1)
    tasks = []
    for t in range(cfg.n_tasks):
        trng = substream(cfg.seed, "suite", "task", t)
        parts = [_sample(trng, centers[t], labels[t], bases[t], dims[t], d, cfg.background, n)
                 for n in (cfg.n_train, cfg.n_val, cfg.n_test)]
        tasks.append(TaskData(f"task{t}", *parts[0], *parts[1], *parts[2], seed=cfg.seed))
    generic = rng.integers(0, C, size=(cfg.n_tasks, C))
    # Pretraining-only clusters: a capability no task finetunes on, used to measure forgetting.
    held_dims = task_dims(cfg.n_tasks, cfg.n_tasks, d)
    held_centers = rng.normal(size=(cfg.n_heldout, len(held_dims))) * cfg.center_scale
    held_basis = spread[:, None] * _rotation(rng, len(held_dims)) if len(held_dims) == w else np.eye(len(held_dims))
    held_labels = np.arange(cfg.n_heldout) % C
    prng = substream(cfg.seed, "suite", "pretrain")
    parts, held = [], []
    for n in (cfg.n_pretrain, max(cfg.n_pretrain // 4, 1), max(cfg.n_pretrain // 2, 1)):
        xs, ys = zip(*(_sample(prng, centers[t], generic[t], bases[t], dims[t], d, cfg.background, n)
                       for t in range(cfg.n_tasks)))
        hx, hy = _sample(prng, held_centers, held_labels, held_basis, held_dims, d, cfg.background, n)
        held.append((hx, hy))
        x, y = np.concatenate(xs + (hx,)), np.concatenate(ys + (hy,))
        perm = prng.permutation(len(x))
        parts.append((x[perm], y[perm]))
    pretrain = TaskData("pretrain", *parts[0], *parts[1], *parts[2], seed=cfg.seed)
    heldout = TaskData("pretrain-heldout", *held[0], *held[1], *held[2], seed=cfg.seed)
    manifest = {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(cfg).items()},
        "dims": [dd.tolist() for dd in dims],
        "centers": [c.tolist() for c in centers],
        "labels": [lab.tolist() for lab in labels],
        "pretrain_labels": generic.tolist(),
        "heldout_dims": held_dims.tolist(),
        "heldout_centers": held_centers.tolist(),
    }
    return TaskSuite(cfg, tasks, pretrain, heldout, manifest)


def load_csv_dataset(path, name=None, val_frac=0.2, test_frac=0.2, seed=0) -> TaskData:
    """Read ``label,f0,...,f{d-1}`` rows and split them into train/val/test."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "label" or any(h != f"f{i}" for i, h in enumerate(header[1:])):
            raise UsageError(f"{path}: header must be label,f0..f{{d-1}}")
        rows = [r for r in reader if r]
    if not rows:
        raise UsageError(f"{path}: no data rows")
    y = np.array([int(r[0]) for r in rows])
    x = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float32)
    perm = substream(seed, "csv-split", str(path)).permutation(len(x))
    n_val = int(round(val_frac * len(x)))
    n_test = int(round(test_frac * len(x)))
    te, va, tr = perm[:n_test], perm[n_test : n_test + n_val], perm[n_test + n_val :]
    return TaskData(name or Path(path).stem, x[tr], y[tr], x[va], y[va], x[te], y[te], seed=seed)
