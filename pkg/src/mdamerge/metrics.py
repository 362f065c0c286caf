"""Neural-collapse diagnostics, bound quantities and the run report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import etf, linalg
from .errors import InvalidArgumentError, ShapeMismatchError

SCHEMA = "mda-report/1"
BOUND_CONSTANT = 1.0


def _class_stats(features, labels):
    features = linalg.as_matrix(features)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise InvalidArgumentError("needs >=2 classes")
    means = np.stack([features[labels == c].mean(axis=0) for c in classes])
    return features, labels, classes, means


def nc1(features, labels) -> float:
    """Within-class scatter relative to between-class spread (0 = collapsed).

    Mean over classes of ``trace(Σ_W^c)`` divided by the mean squared distance
    of the class means to the global mean. ``Σ_W^c`` uses the 1/n_c
    normalisation and the global mean is the mean of class means.
    """
    features, labels, classes, means = _class_stats(features, labels)
    within = np.mean(
        [np.mean(np.sum((features[labels == c] - means[i]) ** 2, axis=1)) for i, c in enumerate(classes)]
    )
    centre = means.mean(axis=0)
    between = np.mean(np.sum((means - centre) ** 2, axis=1))
    if between == 0.0:
        raise InvalidArgumentError("class means coincide; collapse ratio undefined")
    return float(within / between)


def _centred_normalised(means: np.ndarray) -> np.ndarray:
    c = means - means.mean(axis=0)
    norms = np.linalg.norm(c, axis=1, keepdims=True)
    return np.divide(c, norms, out=np.zeros_like(c), where=norms > 0)


def nc2(features, labels, frame: etf.ClassFrame) -> float:
    """Frobenius distance between the Gram of centred, normalised class means
    and the cosine Gram of the matching frame rows.

    Labels index rows of the frame.
    """
    features, labels, classes, means = _class_stats(features, labels)
    if classes.max() >= frame.num_classes or classes.min() < 0:
        raise InvalidArgumentError("labels exceed the frame's class count")
    h = _centred_normalised(means)
    rows = frame.w[classes]
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    return float(np.linalg.norm(h @ h.T - rows @ rows.T))


def nc3(class_means, head) -> float:
    """Mean over classes of ``1 - cos(mean_c, head_c)``; head has one row per class."""
    m = linalg.as_matrix(class_means)
    w = linalg.as_matrix(head)
    if m.shape != w.shape:
        raise ShapeMismatchError(f"class means {m.shape} vs head {w.shape}")
    nm = np.linalg.norm(m, axis=1)
    nw = np.linalg.norm(w, axis=1)
    if np.any(nm == 0) or np.any(nw == 0):
        raise InvalidArgumentError("zero class mean or classifier row")
    cos = np.sum(m * w, axis=1) / (nm * nw)
    return float(np.mean(1.0 - cos))


def nc4(features, labels, class_means, head) -> float:
    """Agreement rate between the linear classifier and nearest class mean.

    Ties resolve to the lowest class index on both sides.
    """
    h = linalg.as_matrix(features)
    m = linalg.as_matrix(class_means)
    w = linalg.as_matrix(head)
    by_head = np.argmax(h @ w.T, axis=1)
    dist = ((h[:, None, :] - m[None, :, :]) ** 2).sum(-1)
    by_mean = np.argmin(dist, axis=1)
    return float(np.mean(by_head == by_mean))


def stable_rank(a) -> float:
    s = linalg.svd(a).s
    if s[0] == 0.0:
        raise InvalidArgumentError("stable rank of a zero matrix is undefined")
    return float(np.sum(s**2) / s[0] ** 2)


def residual_energy(tau, frame: etf.ClassFrame) -> float:
    """‖τ(I − Π)‖²_F with Π the projector onto the frame's row space."""
    tau = linalg.as_matrix(tau)
    proj = linalg.projector_onto_rows(frame.w)
    resid = tau - tau @ proj
    return float(np.sum(resid**2))


@dataclass
class BoundRecord:
    residual_energy: dict[str, float]
    stable_rank: dict[str, float]
    bound_value: dict[str, float]
    constant: float = BOUND_CONSTANT

    def to_dict(self) -> dict:
        return {
            "residual_energy": self.residual_energy,
            "stable_rank": self.stable_rank,
            "bound_value": self.bound_value,
            "constant": self.constant,
        }


def bound_diagnostics(
    tau_share: Mapping[str, np.ndarray],
    frames: Mapping[int, etf.ClassFrame] | etf.ClassFrame,
    lipschitz: float,
    feature_radius: float,
    n: int,
    delta: float,
    constant: float = BOUND_CONSTANT,
) -> BoundRecord:
    """Per-layer residual energy, stable rank and generalisation-gap bound."""
    if n <= 0 or not 0.0 < delta < 1.0:
        raise InvalidArgumentError("need n > 0 and 0 < delta < 1")
    confidence = constant * math.sqrt(math.log(1.0 / delta) / n)
    resid, srank, bound = {}, {}, {}
    for name, tau in tau_share.items():
        tau = linalg.as_matrix(tau)
        frame = frames if isinstance(frames, etf.ClassFrame) else frames[tau.shape[1]]
        if frame.dim != tau.shape[1]:
            raise ShapeMismatchError(f"{name}: frame width {frame.dim} != {tau.shape[1]}")
        c = frame.num_classes
        energy = residual_energy(tau, frame)
        norm = float(np.linalg.norm(tau))
        resid[name] = energy
        srank[name] = stable_rank(tau)
        lead = (c / (c - 1)) ** 2 * (lipschitz * feature_radius / math.sqrt(n))
        bound[name] = lead * (energy / norm if norm > 0 else 0.0) + confidence
    return BoundRecord(resid, srank, bound, constant)


@dataclass
class MergeReport:
    method: str
    per_task_accuracy: dict[str, float]
    delta_etf: float | None = None
    nc: dict[str, float] = field(default_factory=dict)
    bound: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int = 0
    extra: dict = field(default_factory=dict)
    timestamp: str | None = None

    @property
    def mean_accuracy(self) -> float:
        vals = list(self.per_task_accuracy.values())
        return float(sum(vals) / len(vals)) if vals else float("nan")

    def to_dict(self, with_timestamp: bool = True) -> dict:
        out = {
            "schema": SCHEMA,
            "method": self.method,
            "per_task_accuracy": dict(self.per_task_accuracy),
            "mean_accuracy": self.mean_accuracy,
            "delta_etf": self.delta_etf,
            "nc": dict(self.nc),
            "bound": self.bound,
            "config": self.config,
            "seed": self.seed,
            "extra": self.extra,
        }
        if with_timestamp:
            out["timestamp"] = self.timestamp
        return out

    def to_json(self, with_timestamp: bool = True) -> str:
        return json.dumps(self.to_dict(with_timestamp), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "MergeReport":
        if data.get("schema") != SCHEMA:
            raise InvalidArgumentError(f"unsupported report schema {data.get('schema')!r}")
        return cls(
            method=data["method"],
            per_task_accuracy=dict(data["per_task_accuracy"]),
            delta_etf=data.get("delta_etf"),
            nc=dict(data.get("nc", {})),
            bound=data.get("bound", {}),
            config=data.get("config", {}),
            seed=data.get("seed", 0),
            extra=data.get("extra", {}),
            timestamp=data.get("timestamp"),
        )

    @classmethod
    def from_json(cls, text: str) -> "MergeReport":
        return cls.from_dict(json.loads(text))


def accuracy_csv(reports: Sequence[MergeReport]) -> str:
    """One row per report: method, seed, each task's accuracy, mean."""
    tasks = sorted({t for r in reports for t in r.per_task_accuracy})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "seed", *tasks, "mean"])
    for r in reports:
        writer.writerow(
            [r.method, r.seed, *(repr(r.per_task_accuracy.get(t, float("nan"))) for t in tasks), repr(r.mean_accuracy)]
        )
    return buf.getvalue()


def delta_diff(ours: MergeReport, baseline: MergeReport) -> float:
    """Gap in mean accuracy between two reports."""
    return ours.mean_accuracy - baseline.mean_accuracy
