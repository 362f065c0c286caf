"""Feature-space alignment: joint fusion-coefficient and rotation learning.

Features are row vectors, so a task rotation acts as ``h @ R``. With that
orientation the rotated class means ``M @ R`` are exactly what the
closed-form Procrustes target compares against the frame rows.

Gradient routing follows the two-player scheme: the layer-wise fusion
coefficients only see the entropy term, and each task's rotation only sees
the alignment and rotation terms.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np

from . import chkpt, linalg, toybench
from .errors import DegenerateInputError, DivergenceError, InvalidArgumentError, ShapeMismatchError

log = logging.getLogger(__name__)


def skew(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a - a.T)


def cayley(a: np.ndarray) -> np.ndarray:
    """Map a skew-symmetric matrix to SO(d) via ``(I - A)(I + A)^{-1}``."""
    a = linalg.as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ShapeMismatchError("cayley needs a square matrix")
    if not np.allclose(a, -a.T, atol=1e-12, rtol=0.0):
        raise InvalidArgumentError("cayley parameter must be skew-symmetric")
    eye = np.eye(a.shape[0])
    try:
        # (I+A)^{-1} and (I-A) commute, so solve from the right via the transpose
        return np.linalg.solve((eye + a).T, (eye - a).T).T
    except np.linalg.LinAlgError as exc:
        raise DegenerateInputError("I + A is singular") from exc


def cayley_grad(a: np.ndarray, r: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Pull ``dL/dR`` back to the skew parameter.

    The result ``G`` is skew; ``G[i, j]`` for ``i < j`` is the derivative with
    respect to the free coordinate ``a[i, j]`` (with ``a[j, i] = -a[i, j]``).
    """
    eye = np.eye(a.shape[0])
    inv_t = np.linalg.inv(eye + a).T
    x = -(eye + r).T @ grad_r @ inv_t
    return x - x.T


@dataclass
class RotationParam:
    task_id: str
    a: np.ndarray

    @classmethod
    def identity(cls, task_id: str, dim: int) -> "RotationParam":
        return cls(task_id, np.zeros((dim, dim)))

    @property
    def r(self) -> np.ndarray:
        return cayley(self.a)


def procrustes(m: np.ndarray, m_star: np.ndarray) -> np.ndarray:
    """Rotation ``R ∈ SO(d)`` minimising ``‖m @ R - m_star‖_F``."""
    m = linalg.as_matrix(m)
    m_star = linalg.as_matrix(m_star)
    if m.shape != m_star.shape:
        raise ShapeMismatchError(f"procrustes shapes differ: {m.shape} vs {m_star.shape}")
    if not np.any(m) or not np.any(m_star):
        raise DegenerateInputError("procrustes input is all zeros")
    f = linalg.svd(m.T @ m_star, context="procrustes")
    u = f.u
    if np.linalg.det(u @ f.vt) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
    return u @ f.vt


@dataclass(frozen=True)
class ClassMap:
    """Disjoint blocks of global class indices, one per task."""

    sizes: tuple[int, ...]

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.sizes)[:-1]]))

    @property
    def total(self) -> int:
        return int(sum(self.sizes))

    def block(self, t: int) -> np.ndarray:
        return np.arange(self.offsets[t], self.offsets[t] + self.sizes[t])

    def global_index(self, t: int, local) -> np.ndarray:
        local = np.asarray(local)
        if np.any(local < 0) or np.any(local >= self.sizes[t]):
            raise InvalidArgumentError(f"label outside task {t}'s {self.sizes[t]} classes")
        return self.offsets[t] + local


@dataclass
class LossReport:
    entropy: float
    align: float
    rotation: float
    alpha: float
    beta: float
    epoch: int = 0
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.entropy + self.alpha * self.align + self.beta * self.rotation

    def to_record(self) -> dict:
        return {
            "epoch": self.epoch,
            "entropy": self.entropy,
            "align": self.align,
            "rotation": self.rotation,
            "total": self.total,
        }


def entropy_and_grad(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean Shannon entropy of the softmax and its gradient."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    plogp = np.where(p > 0, p * log_p, 0.0)
    h = -plogp.sum(axis=1)
    n = logits.shape[0]
    grad = -(plogp + p * h[:, None]) / n
    return float(h.mean()), grad


def loss_entropy(logits: np.ndarray) -> float:
    return entropy_and_grad(linalg.as_matrix(logits))[0]


def _align_task(h, r, targets):
    """Alignment term for one task, plus ``dL/dR`` and the excluded count."""
    norms = np.linalg.norm(h, axis=1)
    keep = norms > 0
    n = int(keep.sum())
    if n == 0:
        return 0.0, np.zeros_like(r), int(h.shape[0])
    h, norms, targets = h[keep], norms[keep], targets[keep]
    g = h @ r
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    u = g / gn
    diff = u - targets
    value = float((diff**2).sum() / n)
    d_u = 2.0 * diff / n
    d_g = (d_u - (d_u * u).sum(axis=1, keepdims=True) * u) / gn
    return value, h.T @ d_g, int((~keep).sum())


def loss_align(
    features: Sequence[np.ndarray],
    rotations: Sequence[np.ndarray],
    frame_rows: np.ndarray,
    cmap: ClassMap,
    labels: Sequence[np.ndarray],
) -> float:
    """Σ_t mean_i ‖normalise(h R_t) − m*_{φ_t(y)}‖²."""
    total = 0.0
    for t, (h, r, y) in enumerate(zip(features, rotations, labels)):
        value, _, dropped = _align_task(h, r, frame_rows[cmap.global_index(t, y)])
        if dropped:
            log.warning("task %d: %d zero-norm features excluded from alignment", t, dropped)
        total += value
    return total


def class_means(h: np.ndarray, y: np.ndarray, num_classes: int) -> tuple[np.ndarray, list[int]]:
    """Means of the normalised features per class; empty classes give zero rows."""
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    u = np.divide(h, norms, out=np.zeros_like(h), where=norms > 0)
    means = np.zeros((num_classes, h.shape[1]))
    empty = []
    for c in range(num_classes):
        sel = y == c
        if sel.any():
            means[c] = u[sel].mean(axis=0)
        else:
            empty.append(c)
    return means, empty


def procrustes_targets(
    means: Sequence[np.ndarray], frame_rows: np.ndarray, cmap: ClassMap
) -> list[np.ndarray]:
    return [procrustes(m, frame_rows[cmap.block(t)]) for t, m in enumerate(means)]


def loss_rotation(
    rotations: Sequence[np.ndarray],
    means: Sequence[np.ndarray],
    frame_rows: np.ndarray,
    cmap: ClassMap,
) -> float:
    """Σ_t ‖R_t − R_proc,t‖²_F with the Procrustes targets from the class means."""
    targets = procrustes_targets(means, frame_rows, cmap)
    return float(sum(np.sum((r - p) ** 2) for r, p in zip(rotations, targets)))


@dataclass
class TaskBatch:
    task_id: str
    x: np.ndarray
    y: np.ndarray
    head: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.head.shape[1]


@dataclass
class AlignHParams:
    alpha: float = 0.8
    beta: float = 0.2
    lr: float = 1e-3
    epochs: int = 200
    batch: int | None = None
    seed: int = 0
    label_mode: str = "true"
    frame_orientation: str = "heads"

    def __post_init__(self):
        if self.label_mode not in ("true", "pseudo"):
            raise InvalidArgumentError(f"label_mode must be 'true' or 'pseudo', got {self.label_mode!r}")
        if self.frame_orientation not in ("heads", "seeded"):
            raise InvalidArgumentError(
                f"frame_orientation must be 'heads' or 'seeded', got {self.frame_orientation!r}"
            )
        if self.epochs < 0 or self.lr < 0:
            raise InvalidArgumentError("epochs and lr must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def orient_to_heads(frame_rows: np.ndarray, heads: Sequence[np.ndarray]) -> np.ndarray:
    """Rotate the frame as a whole so its rows best match the classifier directions.

    Each head (d×C_t) contributes its class columns, centred within the task
    and normalised. A single rotation keeps the frame's Gram matrix intact.
    """
    rows = []
    for head in heads:
        c = head.T - head.T.mean(axis=0)
        norms = np.linalg.norm(c, axis=1, keepdims=True)
        rows.append(np.divide(c, norms, out=np.zeros_like(c), where=norms > 0))
    target = np.vstack(rows)
    sub = frame_rows[: target.shape[0]]
    return frame_rows @ procrustes(sub, target)


@dataclass
class AlignResult:
    lam: chkpt.FusionCoefficients
    rotations: list[RotationParam]
    trace: list[LossReport]
    frame_rows: np.ndarray | None = None

    def rotation_matrices(self) -> dict[str, np.ndarray]:
        return {p.task_id: p.r for p in self.rotations}

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(rec.to_record()) + "\n" for rec in self.trace)


class FeatureAligner:
    """Holds the fixed pieces of the objective and evaluates it with gradients.

    ``updates`` maps each backbone layer to the summed aligned task update
    ``Σ_t τ_t^etf``; merged parameters are ``θ₀ + λ_l · updates[l]``.
    """

    def __init__(
        self,
        pretrained: chkpt.Checkpoint,
        updates: Mapping[str, np.ndarray],
        frame_rows: np.ndarray,
        tasks: Sequence[TaskBatch],
        hp: AlignHParams,
    ):
        self.base = {n: pretrained[n] for n in toybench.BACKBONE}
        self.updates = {n: np.asarray(updates[n]) for n in toybench.BACKBONE}
        self.frame_rows = np.asarray(frame_rows)
        self.tasks = list(tasks)
        self.hp = hp
        self.cmap = ClassMap(tuple(t.num_classes for t in self.tasks))
        if self.cmap.total > self.frame_rows.shape[0]:
            raise ShapeMismatchError(
                f"frame has {self.frame_rows.shape[0]} rows, tasks need {self.cmap.total}"
            )
        if self.frame_rows.shape[1] != self.base["w2"].shape[1]:
            raise ShapeMismatchError("frame width does not match the feature dimension")

    def params(self, lam: Mapping[str, float]) -> dict[str, np.ndarray]:
        return {n: self.base[n] + lam[n] * self.updates[n] for n in toybench.BACKBONE}

    def features(self, lam, x=None):
        p = self.params(lam)
        xs = [t.x for t in self.tasks] if x is None else x
        return [toybench.forward(p, xi).features for xi in xs]

    def labels(self, lam, rotations) -> list[np.ndarray]:
        if self.hp.label_mode == "true":
            return [t.y for t in self.tasks]
        feats = self.features(lam)
        return [np.argmax(h @ r @ t.head, axis=1) for h, r, t in zip(feats, rotations, self.tasks)]

    def entropy_grad(self, lam, rotations, index=None):
        """Entropy term and its gradient w.r.t. every fusion coefficient."""
        p = self.params(lam)
        value = 0.0
        grads = {n: np.zeros_like(p[n]) for n in toybench.BACKBONE}
        for t, (task, r) in enumerate(zip(self.tasks, rotations)):
            sel = slice(None) if index is None else index[t]
            cache = toybench.forward(p, task.x[sel])
            logits = cache.features @ r @ task.head
            v, d_logits = entropy_and_grad(logits)
            value += v
            d_h = d_logits @ task.head.T @ r.T
            g = toybench.backward(p, cache, d_h)
            for n in toybench.BACKBONE:
                grads[n] += g[n]
        d_lam = {n: float(np.sum(grads[n] * self.updates[n])) for n in toybench.BACKBONE}
        return value, d_lam

    def align_grad(self, lam, params_a, labels, index=None):
        """Alignment term and ``dL/da_t`` for every task."""
        feats = self.features(
            lam, None if index is None else [t.x[i] for t, i in zip(self.tasks, index)]
        )
        value, grads = 0.0, []
        for t, (h, a) in enumerate(zip(feats, params_a)):
            y = labels[t] if index is None else labels[t][index[t]]
            r = cayley(a)
            v, d_r, _ = _align_task(h, r, self.frame_rows[self.cmap.global_index(t, y)])
            value += v
            grads.append(cayley_grad(a, r, d_r))
        return value, grads

    def targets(self, lam, labels) -> list[np.ndarray]:
        feats = self.features(lam)
        means = []
        for t, (h, y, task) in enumerate(zip(feats, labels, self.tasks)):
            m, empty = class_means(h, y, task.num_classes)
            if empty:
                log.warning("task %s: empty classes %s; mean rows zeroed", task.task_id, empty)
            means.append(m)
        return procrustes_targets(means, self.frame_rows, self.cmap)

    @staticmethod
    def rotation_grad(params_a, targets):
        value, grads = 0.0, []
        for a, p in zip(params_a, targets):
            r = cayley(a)
            value += float(np.sum((r - p) ** 2))
            grads.append(cayley_grad(a, r, 2.0 * (r - p)))
        return value, grads

    def report(self, lam, params_a, epoch) -> LossReport:
        rotations = [cayley(a) for a in params_a]
        labels = self.labels(lam, rotations)
        ent, _ = self.entropy_grad(lam, rotations)
        al, _ = self.align_grad(lam, params_a, labels)
        rot, _ = self.rotation_grad(params_a, self.targets(lam, labels))
        return LossReport(ent, al, rot, self.hp.alpha, self.hp.beta, epoch)


def _batches(n: int, size: int | None):
    if size is None or size >= n:
        return [slice(None)]
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def optimize(
    pretrained: chkpt.Checkpoint,
    updates: Mapping[str, np.ndarray],
    frame_rows: np.ndarray,
    tasks: Sequence[TaskBatch],
    hp: AlignHParams,
) -> AlignResult:
    """Gradient descent on the fusion coefficients and task rotations.

    λ starts at ``1/T`` for every layer and the rotations at the identity.
    Procrustes targets and pseudo labels are refreshed once per epoch; the
    trace holds the full objective before the first epoch and after each
    one.
    """
    if hp.frame_orientation == "heads" and tasks:
        frame_rows = orient_to_heads(np.asarray(frame_rows), [t.head for t in tasks])
    fa = FeatureAligner(pretrained, updates, frame_rows, tasks, hp)
    num_tasks = len(fa.tasks)
    d = fa.frame_rows.shape[1]
    lam = {n: 1.0 / num_tasks for n in toybench.BACKBONE}
    params_a = [np.zeros((d, d)) for _ in fa.tasks]
    trace = [fa.report(lam, params_a, 0)]
    per_task = [_batches(t.x.shape[0], hp.batch) for t in fa.tasks]
    if len({len(b) for b in per_task}) > 1:
        # uneven batch counts across tasks: fall back to full-batch steps
        per_task = [[slice(None)] for _ in fa.tasks]
    steps = list(zip(*per_task))
    for epoch in range(1, hp.epochs + 1):
        rotations = [cayley(a) for a in params_a]
        labels = fa.labels(lam, rotations)
        targets = fa.targets(lam, labels)
        for index in steps:
            rotations = [cayley(a) for a in params_a]
            _, d_lam = fa.entropy_grad(lam, rotations, index)
            grads_a = [np.zeros((d, d)) for _ in params_a]
            if hp.alpha:
                _, g = fa.align_grad(lam, params_a, labels, index)
                grads_a = [ga + hp.alpha * gi for ga, gi in zip(grads_a, g)]
            if hp.beta:
                _, g = fa.rotation_grad(params_a, targets)
                grads_a = [ga + hp.beta * gi for ga, gi in zip(grads_a, g)]
            lam = {n: lam[n] - hp.lr * d_lam[n] for n in lam}
            params_a = [skew(a - hp.lr * g) for a, g in zip(params_a, grads_a)]
        rec = fa.report(lam, params_a, epoch)
        trace.append(rec)
        if not np.isfinite(rec.total):
            raise DivergenceError(f"objective became non-finite at epoch {epoch}", trace)
    rotations = [RotationParam(t.task_id, a) for t, a in zip(fa.tasks, params_a)]
    return AlignResult(chkpt.FusionCoefficients(dict(lam)), rotations, trace, fa.frame_rows)
