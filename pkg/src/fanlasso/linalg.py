"""Dense symmetric eigensolvers, singular-value extremes and subspace distances.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The full
symmetric eigendecomposition is delegated to LAPACK (``numpy.linalg.eigh``,
Householder tridiagonalization followed by a tridiagonal QR/divide-and-conquer
solve); this module adds validation, top-k selection, a deterministic sign
convention, and post-hoc residual checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class ConvergenceError(ArithmeticError):
    """An iterative routine failed to reach its tolerance."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class EigenResult:
    """Top eigenpairs of a symmetric matrix.

    Attributes:
        eigenvalues: shape ``(k,)``, sorted non-increasing.
        eigenvectors: shape ``(p, k)``, orthonormal columns; column ``i``
            pairs with ``eigenvalues[i]``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must be a non-empty 2-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def frobenius_norm(a) -> float:
    """Square root of the sum of squared entries."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.size == 0:
        return 0.0
    # scale first so huge/tiny entries do not overflow/underflow
    scale = float(np.max(np.abs(arr)))
    if scale == 0.0:
        return 0.0
    scaled = arr / scale
    return scale * float(np.sqrt(np.sum(scaled * scaled)))


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive.

    Ties on magnitude resolve to the earliest index (``argmax`` semantics).
    """
    vectors = np.array(vectors, dtype=np.float64, copy=True)
    if vectors.ndim == 1:
        return fix_signs(vectors[:, None])[:, 0]
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def sym_eig_topk(a, k: int, tol: float | None = None) -> EigenResult:
    """Return the ``k`` largest eigenpairs of a symmetric matrix.

    Args:
        a: symmetric ``(p, p)`` array.
        k: number of pairs, ``1 <= k <= p``.
        tol: relative tolerance. Symmetry is checked as
            ``max|A - A^T| <= tol * max|A|`` and each returned pair must satisfy
            ``||A v - lambda v|| <= tol * ||A||_F``. Defaults to ``1e-10``.

    Raises:
        ValidationError: non-square or non-symmetric input, or bad ``k``.
        ConvergenceError: LAPACK failed, or a returned pair misses the
            residual/orthonormality bounds.
    """
    a = as_matrix(a, "A")
    p = a.shape[0]
    if a.shape[1] != p:
        raise ValidationError(f"A must be square, got shape {a.shape}")
    if not 1 <= k <= p:
        raise ValidationError(f"k must lie in [1, {p}], got {k}")
    if tol is None:
        tol = 1e-10
    amax = float(np.max(np.abs(a)))
    asym = float(np.max(np.abs(a - a.T)))
    if asym > tol * amax:
        raise ValidationError(f"A is not symmetric: max|A - A^T| = {asym:.3e}")

    sym = 0.5 * (a + a.T)
    try:
        w, v = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise ConvergenceError(f"symmetric eigensolver did not converge: {exc}") from exc

    order = np.argsort(-w, kind="stable")[:k]
    vals = w[order]
    vecs = fix_signs(v[:, order])

    fro = frobenius_norm(sym)
    # LAPACK backward error is O(p * eps * ||A||); floor the check there so
    # tiny user tolerances do not flag a correct answer.
    bound = max(tol, 100 * p * np.finfo(float).eps) * max(fro, np.finfo(float).tiny)
    resid = np.linalg.norm(sym @ vecs - vecs * vals, axis=0)
    worst = float(np.max(resid))
    if worst > bound:
        raise ConvergenceError(
            f"eigenpair residual {worst:.3e} exceeds bound {bound:.3e}", residual=worst
        )
    gram_err = float(np.max(np.abs(vecs.T @ vecs - np.eye(k))))
    if gram_err > max(tol, 100 * p * np.finfo(float).eps):
        raise ConvergenceError(
            f"eigenvectors lost orthonormality ({gram_err:.3e})", residual=gram_err
        )
    return EigenResult(eigenvalues=vals, eigenvectors=vecs)


def singular_extremes(a) -> tuple[float, float]:
    """Smallest and largest singular values of ``a``.

    Computed from the eigenvalues of the smaller Gram matrix (``A^T A`` or
    ``A A^T``), clipped at zero before the square root.
    """
    a = as_matrix(a, "A")
    m, n = a.shape
    gram = a.T @ a if n <= m else a @ a.T
    d = gram.shape[0]
    if not np.any(gram):
        return 0.0, 0.0
    vals = sym_eig_topk(gram, d).eigenvalues
    vals = np.clip(vals, 0.0, None)
    return float(np.sqrt(vals[-1])), float(np.sqrt(vals[0]))


def _check_orthonormal(v: np.ndarray, name: str, tol: float = 1e-8) -> None:
    err = float(np.max(np.abs(v.T @ v - np.eye(v.shape[1]))))
    if err > tol:
        raise ValidationError(f"{name} does not have orthonormal columns (error {err:.3e})")


def subspace_distance(v1, v2) -> float:
    """Procrustes distance ``min_R ||V1 R - V2||_F`` over orthogonal ``R``.

    Uses the closed form ``sqrt(sum_i 2 (1 - sigma_i))`` with ``sigma_i`` the
    singular values of ``V1^T V2``.
    """
    v1 = as_matrix(v1, "V1")
    v2 = as_matrix(v2, "V2")
    if v1.shape != v2.shape:
        raise ValidationError(f"shape mismatch: {v1.shape} vs {v2.shape}")
    _check_orthonormal(v1, "V1")
    _check_orthonormal(v2, "V2")
    sigma = np.linalg.svd(v1.T @ v2, compute_uv=False)
    sigma = np.clip(sigma, 0.0, 1.0)
    return float(np.sqrt(max(0.0, float(np.sum(2.0 * (1.0 - sigma))))))
