"""Covariance aggregation and diversified projections for latent factor transfer.

The target-side projection is built by comparing the target second-moment
matrix with the pooled source+target one and borrowing the pooled estimate
only when the two are close in scaled Frobenius norm.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .linalg import ValidationError, as_matrix, frobenius_norm, singular_extremes, sym_eig_topk


class SourceTag(str, enum.Enum):
    TARGET = "target"
    POOLED = "pooled"
    SOURCE = "source"
    EXTERNAL = "external"


@dataclass(frozen=True)
class CovarianceBundle:
    sigma_p: np.ndarray
    sigma_q: np.ndarray
    sigma_a: np.ndarray
    n_p: int
    n_q: int

    @classmethod
    def from_data(cls, x_p, x_q) -> "CovarianceBundle":
        sigma_p = sample_covariance(x_p)
        sigma_q = sample_covariance(x_q)
        n_p, n_q = len(x_p), len(x_q)
        return cls(sigma_p, sigma_q, pooled_covariance(sigma_p, n_p, sigma_q, n_q), n_p, n_q)

    def swapped(self) -> "CovarianceBundle":
        """Bundle with source and target roles exchanged (source-side selection)."""
        return CovarianceBundle(self.sigma_q, self.sigma_p, self.sigma_a, self.n_q, self.n_p)


@dataclass(frozen=True)
class DiversifiedProjection:
    """A ``p x r_bar`` projection ``W`` whose columns have norm ``sqrt(p)``.

    ``delta_used`` is ``None`` unless the matrix came out of a threshold rule.
    """

    w: np.ndarray
    source_tag: SourceTag
    delta_used: float | None = None

    @property
    def p(self) -> int:
        return self.w.shape[0]

    @property
    def r_bar(self) -> int:
        return self.w.shape[1]

    def to_dict(self) -> dict:
        return {
            "w": self.w.tolist(),
            "source_tag": self.source_tag.value,
            "delta_used": self.delta_used,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiversifiedProjection":
        return cls(
            w=np.asarray(d["w"], dtype=np.float64),
            source_tag=SourceTag(d["source_tag"]),
            delta_used=d.get("delta_used"),
        )


@dataclass(frozen=True)
class FactorDgpTruth:
    b: np.ndarray


def sample_covariance(x) -> np.ndarray:
    """Uncentered second-moment matrix ``X^T X / n``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError(f"need at least one row of data, got shape {x.shape}")
    s = x.T @ x / x.shape[0]
    return 0.5 * (s + s.T)


def pooled_covariance(sigma_p, n_p: int, sigma_q, n_q: int) -> np.ndarray:
    sigma_p = np.asarray(sigma_p, dtype=np.float64)
    sigma_q = np.asarray(sigma_q, dtype=np.float64)
    if sigma_p.shape != sigma_q.shape:
        raise ValidationError(f"dimension mismatch: {sigma_p.shape} vs {sigma_q.shape}")
    if n_p < 1 or n_q < 1:
        raise ValidationError("sample counts must be positive")
    total = n_p + n_q
    return (n_p / total) * sigma_p + (n_q / total) * sigma_q


def default_threshold(r: int, p: int, n_total: int) -> float:
    """``r sqrt(log p / n) + r^2 sqrt(log r / n) + 1/sqrt(p)`` with natural logs.

    ``r = 0`` gives ``1/sqrt(p)``.
    """
    if p < 2 or n_total < 1 or r < 0:
        raise ValidationError(f"need r >= 0, p >= 2, n_total >= 1 (got {r}, {p}, {n_total})")
    base = 1.0 / math.sqrt(p)
    if r == 0:
        return base
    return (
        r * math.sqrt(math.log(p) / n_total)
        + r * r * math.sqrt(math.log(r) / n_total)
        + base
    )


def covariance_gap(bundle: CovarianceBundle) -> float:
    """``p^{-1} ||Sigma_Q - Sigma_A||_F``."""
    p = bundle.sigma_q.shape[0]
    return frobenius_norm(bundle.sigma_q - bundle.sigma_a) / p


def select_covariance(bundle: CovarianceBundle, delta: float) -> tuple[np.ndarray, SourceTag]:
    """Pick the pooled covariance when it lies within ``delta`` of the target one.

    Equality counts as close. The returned array is the bundle's own object.
    """
    if delta < 0:
        raise ValidationError(f"delta must be non-negative, got {delta}")
    if covariance_gap(bundle) <= delta:
        return bundle.sigma_a, SourceTag.POOLED
    return bundle.sigma_q, SourceTag.TARGET


def diversified_projection(
    sigma, r_bar: int, tag: SourceTag = SourceTag.TARGET, delta: float | None = None
) -> DiversifiedProjection:
    sigma = as_matrix(sigma, "sigma")
    p = sigma.shape[0]
    if not 1 <= r_bar <= p:
        raise ValidationError(f"r_bar must lie in [1, {p}], got {r_bar}")
    eig = sym_eig_topk(sigma, r_bar)
    return DiversifiedProjection(w=math.sqrt(p) * eig.eigenvectors, source_tag=SourceTag(tag), delta_used=delta)


def transfer_projection(
    x_own, x_other, r_bar: int, delta: float, own_tag: SourceTag = SourceTag.TARGET
) -> DiversifiedProjection:
    """Projection for ``x_own``'s domain, borrowing ``x_other`` when close.

    Serves both sides: pass ``(x_q, x_p)`` for the target projection and
    ``(x_p, x_q, own_tag=SourceTag.SOURCE)`` for the source one. A borrowed
    result is tagged ``POOLED``, otherwise ``own_tag``.
    """
    bundle = CovarianceBundle.from_data(x_other, x_own)
    sigma, tag = select_covariance(bundle, delta)
    if tag is SourceTag.TARGET:
        tag = own_tag
    return diversified_projection(sigma, r_bar, tag, delta)


def surrogate_factors(proj: DiversifiedProjection, x) -> np.ndarray:
    """Rows ``p^{-1} W^T x_i``; accepts a single vector or an ``(n, p)`` matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != proj.p:
        raise ValidationError(f"expected {proj.p} covariates, got {x.shape[-1]}")
    return x @ proj.w / proj.p


def alignment_matrix(proj: DiversifiedProjection, truth: FactorDgpTruth) -> np.ndarray:
    b = np.asarray(truth.b, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] != proj.p:
        raise ValidationError(f"loading matrix must have {proj.p} rows, got shape {b.shape}")
    return proj.w.T @ b / proj.p


def alignment_extremes(proj: DiversifiedProjection, truth: FactorDgpTruth) -> tuple[float, float]:
    return singular_extremes(alignment_matrix(proj, truth))
