"""Dense float64 matrix helpers.

Matrices are plain 2-d ``numpy.ndarray`` objects of dtype float64. The
factorizations wrap LAPACK (through numpy) and add the deterministic sign
conventions the rest of the package relies on.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import DegenerateInputError, FactorizationError, ShapeMismatchError

QR_RANK_TOL = 1e-12


class SvdFactors(NamedTuple):
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def as_matrix(a) -> np.ndarray:
    """Coerce to a finite 2-d float64 array (1-d input becomes a 1×n row)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeMismatchError(f"expected a matrix, got array with shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DegenerateInputError("matrix has non-finite entries")
    return m


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # largest-|entry| of each left vector made non-negative; argmax picks the lowest index on ties
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def svd(a, context: str = "") -> SvdFactors:
    """Thin SVD with a deterministic sign convention.

    ``r = min(rows, cols)``; singular values are non-increasing. Each left
    singular vector is flipped so that its largest-magnitude entry is
    non-negative, and the matching right vector is flipped with it.
    """
    m = as_matrix(a)
    if m.size == 0:
        raise DegenerateInputError(f"svd of empty matrix{_ctx(context)}")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"SVD did not converge{_ctx(context)}: {exc}") from exc
    u, vt = _fix_signs(u, vt)
    return SvdFactors(u, s, vt)


def _ctx(context: str) -> str:
    return f" ({context})" if context else ""


def qr_orthonormal(a) -> np.ndarray:
    """Orthonormal basis Q of the column space, with diag(R) >= 0."""
    m = as_matrix(a)
    rows, cols = m.shape
    if rows < cols:
        raise ShapeMismatchError(f"qr_orthonormal needs rows >= cols, got {m.shape}")
    q, r = np.linalg.qr(m, mode="reduced")
    d = np.diag(r)
    if np.any(np.abs(d) < QR_RANK_TOL):
        raise DegenerateInputError("rank-deficient input to qr_orthonormal")
    return q * np.sign(d)


def frobenius_inner(a, b) -> float:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def frobenius_norm(a) -> float:
    return float(np.linalg.norm(as_matrix(a)))


def spectral_norm(a) -> float:
    return float(svd(a).s[0])


def cosine_frobenius(a, b) -> float:
    """Frobenius cosine similarity, clipped to [-1, 1]."""
    na = frobenius_norm(a)
    nb = frobenius_norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine of a zero-norm matrix is undefined")
    return float(np.clip(frobenius_inner(a, b) / (na * nb), -1.0, 1.0))


def orthonormal_completion(basis: np.ndarray, total: int) -> np.ndarray:
    """Extend orthonormal columns ``basis`` (n×r) to ``total`` orthonormal columns.

    ``total`` may not exceed n. The added columns come from the full SVD of
    the basis, so the result is deterministic.
    """
    n, r = basis.shape
    if total > n:
        raise ShapeMismatchError(f"cannot complete {n}-dim space to {total} columns")
    if total <= r:
        return basis[:, :total].copy()
    if r == 0:
        return np.eye(n)[:, :total]
    u_full, _, vt = np.linalg.svd(basis, full_matrices=True)
    u_full, _ = _fix_signs(u_full, np.zeros((u_full.shape[1], 1)))
    return np.hstack([basis, u_full[:, r:total]])


def principal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal angles (radians) between the column spans of ``a`` and ``b``."""
    qa = svd(a).u
    qb = svd(b).u
    cos = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def projector_onto_rows(w: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    """Orthogonal projector onto the row space of ``w``."""
    f = svd(w)
    if f.s.size == 0 or f.s[0] == 0.0:
        return np.zeros((w.shape[1], w.shape[1]))
    keep = f.s > rel_tol * f.s[0]
    v = f.vt[keep]
    return v.T @ v
