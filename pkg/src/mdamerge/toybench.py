"""Synthetic multi-task bench with a two-layer rectifier network.

Everything is full batch and seeded, so a bench built twice from the same
configuration is byte-identical. Layer matrices are oriented ``d_in×d_out``
and act on row-vector batches: ``h = relu(x·w1 + b1)·w2 + b2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np

from . import chkpt
from .errors import DivergenceError, InvalidArgumentError

BACKBONE = ("w1", "b1", "w2", "b2")
ROLES = {"w1": "weight-2d", "b1": "bias-1d", "w2": "weight-2d", "b2": "bias-1d"}


def head_name(task_id: str) -> str:
    return f"head/{task_id}"


@dataclass
class SyntheticTask:
    task_id: str
    num_classes: int
    means: np.ndarray
    stddev: float
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def _sample_means(rng, num_classes, d_in, radius, min_dist, max_draws=10_000):
    for _ in range(max_draws):
        m = rng.standard_normal((num_classes, d_in))
        m *= radius / np.linalg.norm(m, axis=1, keepdims=True)
        diff = m[:, None, :] - m[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        if num_classes == 1 or dist[np.triu_indices(num_classes, 1)].min() >= min_dist:
            return m
    raise InvalidArgumentError(
        f"could not place {num_classes} class means {min_dist} apart after {max_draws} draws"
    )


def gen_tasks(
    num_tasks: int,
    classes_per_task: int,
    d_in: int,
    n_per_class: int,
    stddev: float,
    seed: int,
    n_test_per_class: int | None = None,
    radius: float = 5.0,
) -> list[SyntheticTask]:
    """Gaussian-blob classification tasks in a shared input space."""
    if min(num_tasks, classes_per_task, d_in, n_per_class) < 1 or stddev <= 0:
        raise InvalidArgumentError("gen_tasks needs positive counts and stddev")
    if n_test_per_class is None:
        n_test_per_class = max(1, n_per_class // 2)
    rng = np.random.default_rng(seed)
    tasks = []
    for t in range(num_tasks):
        means = _sample_means(rng, classes_per_task, d_in, radius, 4.0 * stddev)

        def draw(n):
            y = np.repeat(np.arange(classes_per_task), n)
            x = means[y] + stddev * rng.standard_normal((y.size, d_in))
            return x, y

        # train and test are independent draws, hence disjoint with probability one
        x_tr, y_tr = draw(n_per_class)
        x_te, y_te = draw(n_test_per_class)
        tasks.append(SyntheticTask(f"task{t}", classes_per_task, means, stddev, x_tr, y_tr, x_te, y_te))
    return tasks


def init_backbone(d_in: int, d_h: int, d: int, seed: int) -> chkpt.Checkpoint:
    """Seeded random initialisation used as the shared pretrained model."""
    rng = np.random.default_rng(seed)
    return chkpt.make_checkpoint(
        [
            ("w1", rng.standard_normal((d_in, d_h)) * np.sqrt(2.0 / d_in), "weight-2d"),
            ("b1", np.zeros(d_h), "bias-1d"),
            ("w2", rng.standard_normal((d_h, d)) * np.sqrt(1.0 / d_h), "weight-2d"),
            ("b2", np.zeros(d), "bias-1d"),
        ]
    )


def init_head(d: int, num_classes: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((d, num_classes)) * np.sqrt(1.0 / d)


@dataclass
class ForwardCache:
    x: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    features: np.ndarray


def forward(params: Mapping[str, np.ndarray], x: np.ndarray, activation: str = "relu") -> ForwardCache:
    pre = x @ params["w1"] + params["b1"]
    hidden = np.maximum(pre, 0.0) if activation == "relu" else pre
    features = hidden @ params["w2"] + params["b2"]
    return ForwardCache(x, pre, hidden, features)


def backward(
    params: Mapping[str, np.ndarray], cache: ForwardCache, d_features: np.ndarray, activation: str = "relu"
) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss given ``dL/dfeatures``.

    Returns gradients for the four backbone tensors (biases as 1×n) and for
    the input batch under the key ``"x"``.
    """
    g_w2 = cache.hidden.T @ d_features
    g_b2 = d_features.sum(axis=0, keepdims=True)
    d_hidden = d_features @ params["w2"].T
    if activation == "relu":
        d_hidden = d_hidden * (cache.pre > 0)
    g_w1 = cache.x.T @ d_hidden
    g_b1 = d_hidden.sum(axis=0, keepdims=True)
    return {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2, "x": d_hidden @ params["w1"].T}


def forward_backward(params, x, d_features=None, upstream=None, activation="relu"):
    """Forward pass plus gradients.

    Exactly one upstream source may be given: ``d_features`` (dL/dh) or
    ``upstream``, a callable mapping features to ``(loss, dL/dh)``. Returns
    ``(features, loss_or_None, grads)``.
    """
    cache = forward(params, x, activation)
    loss = None
    if upstream is not None:
        loss, d_features = upstream(cache.features)
    if d_features is None:
        d_features = np.zeros_like(cache.features)
    return cache.features, loss, backward(params, cache, d_features, activation)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = y.size
    loss = -float(log_p[np.arange(n), y].mean())
    grad = np.exp(log_p)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def train_loss_and_grads(params, head, x, y):
    def upstream(h):
        loss, d_logits = cross_entropy(h @ head, y)
        upstream.d_head = h.T @ d_logits
        return loss, d_logits @ head.T

    _, loss, grads = forward_backward(params, x, upstream=upstream)
    grads["head"] = upstream.d_head
    return loss, grads


def train(
    net: chkpt.Checkpoint, task: SyntheticTask, epochs: int, lr: float, seed: int
) -> chkpt.Checkpoint:
    """Full-batch gradient descent on cross-entropy; returns a fine-tuned copy.

    The task head is taken from ``net`` when present, otherwise drawn from
    ``seed``.
    """
    params = {n: net[n].copy() for n in BACKBONE}
    hname = head_name(task.task_id)
    d = params["w2"].shape[1]
    if params["w1"].shape[0] != task.x_train.shape[1]:
        raise InvalidArgumentError("network input width does not match the task")
    head = net[hname].copy() if hname in net.tensors else init_head(d, task.num_classes, seed)
    for epoch in range(epochs):
        loss, g = train_loss_and_grads(params, head, task.x_train, task.y_train)
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss became non-finite at epoch {epoch}")
        for n in BACKBONE:
            params[n] -= lr * g[n]
        head -= lr * g["head"]
    layers = [(n, params[n], ROLES[n]) for n in BACKBONE]
    out = chkpt.make_checkpoint(layers + [(hname, head, "head")])
    # keep the declared bias shapes of the input checkpoint
    return chkpt.Checkpoint(
        [net.spec(n) for n in BACKBONE] + [out.spec(hname)], out.tensors
    )


def predict(params, head, x, rotation=None):
    h = forward(params, x).features
    if rotation is not None:
        h = h @ rotation
    return np.argmax(h @ head, axis=1)


def evaluate(
    backbone: chkpt.Checkpoint | Mapping[str, np.ndarray],
    heads: Mapping[str, np.ndarray],
    tasks: Sequence[SyntheticTask],
    rotations: Mapping[str, np.ndarray] | None = None,
    classifier_mode: str = "head",
    frame_rows: Mapping[str, np.ndarray] | None = None,
    split: str = "test",
) -> dict[str, float]:
    """Per-task accuracy of a backbone paired with per-task heads.

    ``classifier_mode="etf-nearest"`` ignores the heads and assigns each
    normalised (rotated) feature to the nearest target row among the task's
    classes, as given by ``frame_rows[task_id]``.
    """
    params = {n: backbone[n] for n in BACKBONE}
    acc = {}
    for task in tasks:
        x, y = (task.x_test, task.y_test) if split == "test" else (task.x_train, task.y_train)
        r = None if rotations is None else rotations.get(task.task_id)
        h = forward(params, x).features
        if r is not None:
            h = h @ r
        if classifier_mode == "head":
            pred = np.argmax(h @ heads[task.task_id], axis=1)
        elif classifier_mode == "etf-nearest":
            if frame_rows is None:
                raise InvalidArgumentError("etf-nearest classification needs frame rows")
            u = h / np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-300)
            m = frame_rows[task.task_id]
            dist = ((u[:, None, :] - m[None, :, :]) ** 2).sum(-1)
            pred = np.argmin(dist, axis=1)
        else:
            raise InvalidArgumentError(f"unknown classifier mode {classifier_mode!r}")
        acc[task.task_id] = float(np.mean(pred == y))
    return acc


@dataclass
class BenchConfig:
    num_tasks: int = 4
    classes_per_task: int = 3
    d_in: int = 16
    d_hidden: int = 32
    d_feature: int = 8
    n_train: int = 50
    n_test: int = 25
    stddev: float = 0.5
    train_epochs: int = 200
    train_lr: float = 0.05
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Bench:
    config: BenchConfig
    tasks: list[SyntheticTask]
    pretrained: chkpt.Checkpoint
    finetuned: list[chkpt.Checkpoint] = field(default_factory=list)

    @property
    def heads(self) -> dict[str, np.ndarray]:
        return {t.task_id: ft[head_name(t.task_id)] for t, ft in zip(self.tasks, self.finetuned)}

    def task_vectors(self) -> list[chkpt.TaskVector]:
        return [
            chkpt.task_vector(self.pretrained, ft, t.task_id)
            for t, ft in zip(self.tasks, self.finetuned)
        ]


def build_bench(cfg: BenchConfig) -> Bench:
    """Generate tasks, the shared init, and one fine-tuned model per task."""
    ss = np.random.SeedSequence(cfg.seed)
    data_seed, init_seed, *task_seeds = (
        int(s.generate_state(1)[0]) for s in ss.spawn(2 + cfg.num_tasks)
    )
    tasks = gen_tasks(
        cfg.num_tasks, cfg.classes_per_task, cfg.d_in, cfg.n_train, cfg.stddev, data_seed, cfg.n_test
    )
    pre = init_backbone(cfg.d_in, cfg.d_hidden, cfg.d_feature, init_seed)
    finetuned = [train(pre, t, cfg.train_epochs, cfg.train_lr, s) for t, s in zip(tasks, task_seeds)]
    return Bench(cfg, tasks, pre, finetuned)
