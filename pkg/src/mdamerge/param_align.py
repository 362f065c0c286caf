"""Parameter-space directional alignment (data-free merging).

Per weight layer, the top-k left singular vectors of every task vector are
concatenated, re-orthogonalised through a second SVD, cut to the layer's
output width and multiplied on the right by the target frame's alignment
operator ``wᵀw``.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np

from . import chkpt, etf, linalg
from .errors import InvalidArgumentError, ShapeMismatchError

log = logging.getLogger(__name__)

PER_TASK = "per-task"
TARGETS = ("etf", "orthogonal", "low-rank")
MODES = ("shared", "projected", "per-task-projection")


@dataclass
class MdaConfig:
    """Settings for the data-free merge.

    ``k_fraction`` is a fraction of the output width kept per task, or the
    string ``"per-task"`` for ``k = d_out // T``. ``mode`` selects what the
    alignment operator is applied to: ``shared`` uses the orthonormal shared
    basis itself, ``projected`` the summed task vectors restricted to that
    basis, and ``per-task-projection`` each raw task vector.
    """

    k_fraction: float | str = PER_TASK
    target: str = "etf"
    lambda_default: float = 1.0
    norm_match: bool = True
    mode: str = "projected"
    seed: int = 0
    num_classes: int | None = None
    low_rank_divisor: int = 4

    def __post_init__(self):
        if self.target not in TARGETS:
            raise InvalidArgumentError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.k_fraction != PER_TASK:
            k = float(self.k_fraction)
            if not 0.0 < k <= 1.0:
                raise InvalidArgumentError(f"k_fraction must lie in (0, 1], got {k}")
            self.k_fraction = k

    def to_dict(self) -> dict:
        return asdict(self)


def rank_per_task(d_out: int, num_tasks: int, k_fraction: float | str) -> int:
    if k_fraction == PER_TASK:
        k = d_out // num_tasks
    else:
        k = int(round(float(k_fraction) * d_out))
    return max(1, k)


@dataclass
class LayerSubspace:
    u_cat: np.ndarray
    u_share: np.ndarray
    tau_share: np.ndarray
    k_per_task: int
    basis_rank: int
    warnings: list[str] = field(default_factory=list)

    @property
    def basis(self) -> np.ndarray:
        """Orthonormal columns spanned by the concatenated task bases.

        Completion and zero-padding columns are dropped, so projecting onto
        this basis keeps only directions some task actually contributed.
        """
        return self.u_share[:, : self.basis_rank]


@dataclass
class SharedSubspace:
    layers: dict[str, LayerSubspace]

    @property
    def warnings(self) -> list[str]:
        return [w for layer in self.layers.values() for w in layer.warnings]


def _layer_subspace(name: str, taus: Sequence[np.ndarray], k_fraction) -> LayerSubspace:
    d_in, d_out = taus[0].shape
    num_tasks = len(taus)
    k = rank_per_task(d_out, num_tasks, k_fraction)
    warnings = []
    if k > min(d_in, d_out):
        warnings.append(f"{name}: k={k} exceeds min(d_in, d_out)={min(d_in, d_out)}; clamped")
        log.warning(warnings[-1])
        k = min(d_in, d_out)
    blocks = [linalg.svd(tau, context=f"{name} task {i}").u[:, :k] for i, tau in enumerate(taus)]
    u_cat = np.hstack(blocks)
    u_all = linalg.svd(u_cat, context=f"{name} concatenated basis").u
    width = min(d_out, d_in)
    if u_all.shape[1] >= width:
        basis = u_all[:, :width]
    else:
        basis = linalg.orthonormal_completion(u_all, width)
    u_share = np.zeros((d_in, d_out))
    u_share[:, :width] = basis
    spanned = min(u_all.shape[1], width)
    return LayerSubspace(u_cat, u_share, u_share.copy(), k, spanned, warnings)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MDA_THREADS", "1")))
    except ValueError:
        return 1


def weight_layers(pretrained: chkpt.Checkpoint) -> list[str]:
    return [s.name for s in pretrained.manifest if s.role == "weight-2d"]


def shared_subspace(
    vectors: Sequence[chkpt.TaskVector], cfg: MdaConfig, layer_names: Sequence[str] | None = None
) -> SharedSubspace:
    if not vectors:
        raise InvalidArgumentError("shared subspace needs at least one task vector")
    if layer_names is None:
        layer_names = [n for n, t in vectors[0].layers.items() if t.shape[0] > 1]
    for name in layer_names:
        shapes = {v.layers[name].shape if name in v.layers else None for v in vectors}
        if len(shapes) != 1 or None in shapes:
            raise ShapeMismatchError(f"layer {name} missing or inconsistent across task vectors")

    def one(name):
        return name, _layer_subspace(name, [v.layers[name] for v in vectors], cfg.k_fraction)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(one, layer_names))
    return SharedSubspace(dict(results))


def build_frames(
    widths: Sequence[int], num_classes: int, cfg: MdaConfig
) -> dict[int, etf.ClassFrame]:
    """One frame per distinct layer width, all from the same seed and class count."""
    if cfg.target == "low-rank":
        return {}
    return {w: etf.build_frame(cfg.target, num_classes, w, cfg.seed) for w in sorted(set(widths))}


def _operator_for(name, tau_share, frames, cfg) -> np.ndarray:
    d_out = tau_share.shape[1]
    if cfg.target == "low-rank":
        frame = etf.build_low_rank(tau_share, max(1, d_out // cfg.low_rank_divisor))
    else:
        frame = frames.get(d_out) if isinstance(frames, Mapping) else frames
        if frame is None or frame.dim != d_out:
            raise ShapeMismatchError(f"{name}: no frame of width {d_out}")
    return etf.align_operator(frame).p


def etf_align(
    sub: SharedSubspace,
    frames: Mapping[int, etf.ClassFrame] | etf.ClassFrame,
    cfg: MdaConfig,
    vectors: Sequence[chkpt.TaskVector] | None = None,
) -> dict[str, np.ndarray] | dict[str, list[np.ndarray]]:
    """Apply the alignment operator layer by layer.

    ``shared`` and ``projected`` modes return one update matrix per layer;
    ``per-task-projection`` returns a list with one matrix per task. The
    task vectors are needed for every mode except ``shared`` without norm
    matching.
    """
    need_vectors = cfg.mode != "shared" or cfg.norm_match
    if need_vectors and not vectors:
        raise InvalidArgumentError(f"mode {cfg.mode!r} needs the task vectors")
    out = {}
    for name, layer in sub.layers.items():
        if cfg.mode == "per-task-projection":
            taus = [v.layers[name] for v in vectors]
            aligned = [t @ _operator_for(name, t, frames, cfg) for t in taus]
            if cfg.norm_match:
                aligned = [_match_norm(a, [t]) for a, t in zip(aligned, taus)]
            out[name] = aligned
            continue
        if cfg.mode == "shared":
            base = layer.tau_share
        else:
            b = layer.basis
            base = b @ (b.T @ sum(v.layers[name] for v in vectors))
        aligned = base @ _operator_for(name, base, frames, cfg)
        if cfg.norm_match:
            aligned = _match_norm(aligned, [v.layers[name] for v in vectors])
        out[name] = aligned
    return out


def _match_norm(update: np.ndarray, taus: Sequence[np.ndarray]) -> np.ndarray:
    target = float(np.mean([np.linalg.norm(t) for t in taus]))
    norm = float(np.linalg.norm(update))
    if norm == 0.0:
        return update
    return update * (target / norm)


def task_updates(
    pretrained: chkpt.Checkpoint,
    vectors: Sequence[chkpt.TaskVector],
    frames,
    cfg: MdaConfig,
) -> dict[str, list[np.ndarray]]:
    """Aligned task vectors ``τ_t^etf`` per backbone layer, one per task.

    In ``shared`` and ``projected`` modes a single update is built per layer
    and every task carries it, so ``(1/T)·Σ_t τ_t^etf`` is that update.
    Bias layers skip the subspace step and use the plain task vectors
    (their norm-matched mean in the single-update modes).
    """
    num_tasks = len(vectors)
    names = weight_layers(pretrained)
    sub = shared_subspace(vectors, cfg, names)
    aligned = etf_align(sub, frames, cfg, vectors)
    out = {}
    for spec in pretrained.backbone():
        if spec.name in aligned:
            a = aligned[spec.name]
            out[spec.name] = a if isinstance(a, list) else [a] * num_tasks
            continue
        taus = [v.layers[spec.name] for v in vectors]
        if cfg.mode == "per-task-projection":
            out[spec.name] = taus
        else:
            mean = sum(taus) / num_tasks
            out[spec.name] = [_match_norm(mean, taus) if cfg.norm_match else mean] * num_tasks
    return out


def fused_updates(pretrained, vectors, frames, cfg) -> dict[str, np.ndarray]:
    """``Σ_t τ_t^etf`` for every backbone layer."""
    return {n: sum(ts) for n, ts in task_updates(pretrained, vectors, frames, cfg).items()}


def merge_mda_ta(
    pretrained: chkpt.Checkpoint,
    vectors: Sequence[chkpt.TaskVector],
    frames,
    cfg: MdaConfig,
    lam: chkpt.FusionCoefficients | None = None,
) -> chkpt.Checkpoint:
    """Data-free merge ``θ₀ + λ·Σ_t τ_t^etf``.

    Without explicit coefficients every layer uses ``λ = lambda_default / T``,
    i.e. ``lambda_default`` times the mean aligned update; the default of 1
    coincides with the feature-space optimiser's starting point.
    """
    updates = fused_updates(pretrained, vectors, frames, cfg)
    if lam is None:
        lam = chkpt.FusionCoefficients.uniform(updates, cfg.lambda_default / len(vectors))
    tensors = {n: pretrained[n] + lam[n] * u for n, u in updates.items()}
    return pretrained.with_layers(pretrained.backbone(), tensors)


def estimate_flops(num_tasks: int, num_layers: int, width: int, num_classes: int) -> int:
    """Operation count ``(T+2)·L·n³ + n²·L·C`` of the data-free merge."""
    t, l, n, c = (int(v) for v in (num_tasks, num_layers, width, num_classes))
    if min(l, n, c) <= 0 or t < 0:
        raise InvalidArgumentError("estimate_flops needs positive arguments")
    return (t + 2) * l * n**3 + n**2 * l * c
