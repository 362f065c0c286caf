"""End-to-end runs on the toy bench: merge, align, evaluate, report."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np

from . import chkpt, etf, feature_align, metrics, param_align, toybench

log = logging.getLogger(__name__)

METHODS = ("individual", "weight-average", "task-arithmetic", "mda-ta", "mda-am")
DEFAULT_TA_LAMBDA = 0.3


@dataclass
class RunConfig:
    bench: toybench.BenchConfig = field(default_factory=toybench.BenchConfig)
    mda: param_align.MdaConfig = field(default_factory=param_align.MdaConfig)
    hp: feature_align.AlignHParams = field(default_factory=feature_align.AlignHParams)
    ta_lambda: float = DEFAULT_TA_LAMBDA
    classifier_mode: str = "head"
    lipschitz: float = 1.0
    delta: float = 0.05

    def to_dict(self) -> dict:
        return asdict(self)

    def num_classes(self) -> int:
        if self.mda.num_classes is not None:
            return self.mda.num_classes
        return self.bench.num_tasks * self.bench.classes_per_task


@dataclass
class MergedModel:
    """A merged backbone plus the optional per-task rotations and λ."""

    method: str
    backbone: chkpt.Checkpoint
    rotations: dict[str, np.ndarray] | None = None
    extra: dict = field(default_factory=dict)


def layer_widths(ckpt: chkpt.Checkpoint) -> list[int]:
    return [ckpt[n].shape[1] for n in param_align.weight_layers(ckpt)]


def feature_frame(bench: toybench.Bench, cfg: RunConfig) -> etf.ClassFrame:
    """The simplex ETF on the feature layer, shared by alignment and diagnostics."""
    return etf.build_etf(cfg.num_classes(), bench.config.d_feature, cfg.mda.seed)


def oriented_rows(bench: toybench.Bench, cfg: RunConfig) -> np.ndarray:
    rows = feature_frame(bench, cfg).w
    if cfg.hp.frame_orientation == "heads":
        rows = feature_align.orient_to_heads(rows, [bench.heads[t.task_id] for t in bench.tasks])
    return rows


def merge_weight_average(bench: toybench.Bench, cfg: RunConfig) -> MergedModel:
    return MergedModel("weight-average", chkpt.merge_weight_average(bench.finetuned))


def merge_task_arithmetic(bench, cfg: RunConfig, lam: float | None = None) -> MergedModel:
    lam = cfg.ta_lambda if lam is None else lam
    ckpt = chkpt.merge_task_arithmetic(bench.pretrained, bench.task_vectors(), lam)
    return MergedModel("task-arithmetic", ckpt, extra={"lambda": lam})


def mda_frames(bench, cfg: RunConfig):
    return param_align.build_frames(layer_widths(bench.pretrained), cfg.num_classes(), cfg.mda)


def merge_mda_ta(bench, cfg: RunConfig) -> MergedModel:
    ckpt = param_align.merge_mda_ta(
        bench.pretrained, bench.task_vectors(), mda_frames(bench, cfg), cfg.mda
    )
    return MergedModel("mda-ta", ckpt, extra={"lambda": cfg.mda.lambda_default / len(bench.tasks)})


def align_batches(bench: toybench.Bench) -> list[feature_align.TaskBatch]:
    return [
        feature_align.TaskBatch(t.task_id, t.x_train, t.y_train, bench.heads[t.task_id])
        for t in bench.tasks
    ]


def merge_mda_am(bench, cfg: RunConfig) -> tuple[MergedModel, feature_align.AlignResult]:
    updates = param_align.fused_updates(
        bench.pretrained, bench.task_vectors(), mda_frames(bench, cfg), cfg.mda
    )
    frame = feature_frame(bench, cfg)
    result = feature_align.optimize(bench.pretrained, updates, frame.w, align_batches(bench), cfg.hp)
    tensors = {n: bench.pretrained[n] + result.lam[n] * u for n, u in updates.items()}
    ckpt = bench.pretrained.with_layers(bench.pretrained.backbone(), tensors)
    extra = {
        "lambda": dict(result.lam.values),
        "loss_initial": result.trace[0].to_record(),
        "loss_final": result.trace[-1].to_record(),
    }
    return MergedModel("mda-am", ckpt, result.rotation_matrices(), extra), result


def _features(backbone, x, rotation=None):
    h = toybench.forward({n: backbone[n] for n in toybench.BACKBONE}, x).features
    return h if rotation is None else h @ rotation


def diagnostics(
    bench: toybench.Bench,
    model: MergedModel,
    cfg: RunConfig,
    baseline: MergedModel | None = None,
) -> dict:
    """Δ_etf against ``baseline``, NC1-NC4 and bound quantities for one model."""
    rows = oriented_rows(bench, cfg)
    frame = etf.ClassFrame(rows, feature_frame(bench, cfg).kind, "oriented")
    cmap = feature_align.ClassMap(tuple(t.num_classes for t in bench.tasks))
    feats, labels, means_by_task, nc3s, nc4s = [], [], [], [], []
    for i, task in enumerate(bench.tasks):
        r = None if model.rotations is None else model.rotations.get(task.task_id)
        h = _features(model.backbone, task.x_test, r)
        feats.append(h)
        labels.append(cmap.global_index(i, task.y_test))
        means = np.stack([h[task.y_test == c].mean(axis=0) for c in range(task.num_classes)])
        means_by_task.append(means)
        head_rows = bench.heads[task.task_id].T
        nc3s.append(metrics.nc3(means - means.mean(axis=0), head_rows))
        nc4s.append(metrics.nc4(h, task.y_test, means, head_rows))
    h_all, y_all = np.vstack(feats), np.concatenate(labels)
    nc = {
        "nc1": metrics.nc1(h_all, y_all),
        "nc2": metrics.nc2(h_all, y_all, frame),
        "nc3": float(np.mean(nc3s)),
        "nc4": float(np.mean(nc4s)),
    }
    targets = [rows[cmap.block(i)] for i in range(len(bench.tasks))]
    delta = None
    if baseline is not None:
        base_means = []
        for task in bench.tasks:
            r = None if baseline.rotations is None else baseline.rotations.get(task.task_id)
            h = _features(baseline.backbone, task.x_test, r)
            base_means.append(np.stack([h[task.y_test == c].mean(axis=0) for c in range(task.num_classes)]))
        delta = etf.delta_etf(means_by_task, base_means, targets)

    taus = {
        n: model.backbone[n] - bench.pretrained[n] for n in param_align.weight_layers(bench.pretrained)
    }
    taus = {n: t for n, t in taus.items() if np.any(t)}
    bound = {}
    if taus:
        frames = {w: etf.build_etf(cfg.num_classes(), w, cfg.mda.seed) for w in {t.shape[1] for t in taus.values()}}
        radius = float(max(np.linalg.norm(h, axis=1).max() for h in feats))
        n_train = sum(t.x_train.shape[0] for t in bench.tasks)
        bound = metrics.bound_diagnostics(taus, frames, cfg.lipschitz, radius, n_train, cfg.delta).to_dict()
    return {"nc": nc, "delta_etf": delta, "bound": bound}


def evaluate(bench, model: MergedModel, cfg: RunConfig) -> dict[str, float]:
    frame_rows = None
    if cfg.classifier_mode == "etf-nearest":
        rows = oriented_rows(bench, cfg)
        cmap = feature_align.ClassMap(tuple(t.num_classes for t in bench.tasks))
        frame_rows = {t.task_id: rows[cmap.block(i)] for i, t in enumerate(bench.tasks)}
    return toybench.evaluate(
        model.backbone, bench.heads, bench.tasks, model.rotations, cfg.classifier_mode, frame_rows
    )


def individual_accuracy(bench: toybench.Bench) -> dict[str, float]:
    """Each fine-tuned model on its own task."""
    return {
        t.task_id: toybench.evaluate(ft, bench.heads, [t])[t.task_id]
        for t, ft in zip(bench.tasks, bench.finetuned)
    }


def report_for(bench, model: MergedModel, cfg: RunConfig, baseline: MergedModel | None) -> metrics.MergeReport:
    acc = evaluate(bench, model, cfg)
    diag = diagnostics(bench, model, cfg, baseline)
    return metrics.MergeReport(
        method=model.method,
        per_task_accuracy=acc,
        delta_etf=diag["delta_etf"],
        nc=diag["nc"],
        bound=diag["bound"],
        config=cfg.to_dict(),
        seed=cfg.bench.seed,
        extra=model.extra,
    )


def run_seed(cfg: RunConfig, bench: toybench.Bench | None = None) -> list[metrics.MergeReport]:
    """All five methods on one bench; Δ_etf is taken against task arithmetic."""
    bench = bench or toybench.build_bench(cfg.bench)
    ta = merge_task_arithmetic(bench, cfg)
    models = [
        merge_weight_average(bench, cfg),
        ta,
        merge_mda_ta(bench, cfg),
        merge_mda_am(bench, cfg)[0],
    ]
    individual = metrics.MergeReport(
        method="individual",
        per_task_accuracy=individual_accuracy(bench),
        config=cfg.to_dict(),
        seed=cfg.bench.seed,
    )
    return [individual] + [report_for(bench, m, cfg, ta) for m in models]
