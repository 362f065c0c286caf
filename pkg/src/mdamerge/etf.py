"""Target frames for directional alignment.

A frame stores its class vectors as the rows of ``w`` (C×d). Simplex ETF
rows have unit norm and pairwise inner product ``-1/(C-1)``; when the
feature dimension is below ``C-1`` only a truncation of that geometry fits
and ``wᵀw`` becomes the scaled identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import linalg
from .errors import InvalidArgumentError, ShapeMismatchError

KINDS = ("etf-exact", "etf-truncated", "orthogonal", "low-rank")


@dataclass(frozen=True)
class ClassFrame:
    w: np.ndarray
    kind: str
    construction: str

    @property
    def num_classes(self) -> int:
        return self.w.shape[0]

    @property
    def dim(self) -> int:
        return self.w.shape[1]

    @property
    def scale(self) -> float:
        if self.kind.startswith("etf"):
            c = self.num_classes
            return c / (c - 1)
        return 1.0


@dataclass(frozen=True)
class AlignOperator:
    p: np.ndarray
    rank: int
    scale: float

    @property
    def projector(self) -> np.ndarray:
        """The unscaled projector ``p / scale``."""
        return self.p / self.scale


def centering_matrix(c: int) -> np.ndarray:
    return np.eye(c) - np.full((c, c), 1.0 / c)


def _check_args(num_classes: int, dim: int) -> None:
    if num_classes < 2:
        raise InvalidArgumentError(f"need at least 2 classes, got {num_classes}")
    if dim < 1:
        raise InvalidArgumentError(f"frame dimension must be positive, got {dim}")


def build_etf(num_classes: int, dim: int, seed: int = 0) -> ClassFrame:
    """Simplex ETF with ``num_classes`` rows in ``dim`` dimensions.

    ``dim >= C`` draws a seeded Gaussian basis (QR route); ``dim <= C-1``
    takes the leading singular directions of the centering matrix, which is
    exact at ``dim == C-1`` and a truncation below it.
    """
    _check_args(num_classes, dim)
    c = num_classes
    rescale = np.sqrt(c / (c - 1))
    if dim >= c:
        rng = np.random.default_rng(seed)
        q = linalg.qr_orthonormal(rng.standard_normal((dim, c)))
        w = rescale * (q @ centering_matrix(c)).T
        return ClassFrame(w, "etf-exact", "qr-based")
    u = linalg.svd(centering_matrix(c), context="ETF centering").u
    w = rescale * u[:, :dim]
    kind = "etf-exact" if dim == c - 1 else "etf-truncated"
    return ClassFrame(np.ascontiguousarray(w), kind, "svd-based")


def build_orthogonal(num_classes: int, dim: int, seed: int = 0) -> ClassFrame:
    _check_args(num_classes, dim)
    if dim < num_classes:
        raise InvalidArgumentError(
            f"orthogonal frame needs dim >= classes, got dim={dim}, classes={num_classes}"
        )
    rng = np.random.default_rng(seed)
    q = linalg.qr_orthonormal(rng.standard_normal((dim, num_classes)))
    return ClassFrame(np.ascontiguousarray(q.T), "orthogonal", "qr-based")


def build_low_rank(tau: np.ndarray, rank: int | None = None) -> ClassFrame:
    """Frame spanned by the top right singular directions of ``tau``.

    The default rank is a quarter of the output width (at least one).
    """
    tau = linalg.as_matrix(tau)
    d_out = tau.shape[1]
    if rank is None:
        rank = max(1, d_out // 4)
    rank = min(rank, min(tau.shape))
    if rank < 1:
        raise InvalidArgumentError("low-rank frame needs rank >= 1")
    vt = linalg.svd(tau, context="low-rank target").vt
    return ClassFrame(np.ascontiguousarray(vt[:rank]), "low-rank", "svd-based")


def build_frame(target: str, num_classes: int, dim: int, seed: int = 0) -> ClassFrame:
    """Frame for ``target`` in {etf, orthogonal}; orthogonal falls back to ETF when dim < C."""
    if target == "etf":
        return build_etf(num_classes, dim, seed)
    if target == "orthogonal":
        if dim < num_classes:
            # not enough room for C orthonormal rows; keep min(C, dim) of them
            return build_orthogonal(dim, dim, seed)
        return build_orthogonal(num_classes, dim, seed)
    raise InvalidArgumentError(f"no fixed frame for target {target!r}")


def align_operator(frame: ClassFrame) -> AlignOperator:
    p = frame.w.T @ frame.w
    p = 0.5 * (p + p.T)
    eig = np.linalg.eigvalsh(p)
    top = eig.max() if eig.size else 0.0
    rank = int(np.sum(eig > 1e-6 * top)) if top > 0 else 0
    return AlignOperator(p, rank, frame.scale)


def ideal_gram(frame: ClassFrame) -> np.ndarray:
    """The Gram matrix the frame's rows should have."""
    c = frame.num_classes
    if frame.kind == "etf-exact":
        return (c / (c - 1)) * np.eye(c) - 1.0 / (c - 1)
    if frame.kind == "orthogonal":
        return np.eye(c)
    raise InvalidArgumentError(f"no row Gram law for kind {frame.kind!r}")


def gram_deviation(frame: ClassFrame) -> float:
    """Max absolute deviation of the frame from its defining Gram law.

    Exact ETF and orthogonal frames are checked on ``wwᵀ``; truncated ETF
    frames on ``wᵀw = C/(C-1)·I``.
    """
    w = frame.w
    if frame.kind == "etf-truncated":
        return float(np.max(np.abs(w.T @ w - frame.scale * np.eye(frame.dim))))
    if frame.kind == "low-rank":
        return float(np.max(np.abs(w @ w.T - np.eye(frame.num_classes))))
    return float(np.max(np.abs(w @ w.T - ideal_gram(frame))))


def delta_etf(
    merged_a: Sequence[np.ndarray],
    merged_b: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
) -> float:
    """Mean cosine of ``merged_a`` to targets minus that of ``merged_b``."""
    if not (len(merged_a) == len(merged_b) == len(targets)):
        raise ShapeMismatchError("delta_etf needs equal-length sequences")
    if not targets:
        raise InvalidArgumentError("delta_etf needs at least one task")
    cos_a = [linalg.cosine_frobenius(a, t) for a, t in zip(merged_a, targets)]
    cos_b = [linalg.cosine_frobenius(b, t) for b, t in zip(merged_b, targets)]
    return float(np.mean(cos_a) - np.mean(cos_b))
