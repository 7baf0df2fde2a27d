"""Superpoint correlation, masked top-k selection and patch-level soft assignment."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import DescriptorSet, UncertaintyMask
from .correspondence import CorrespondenceSet, Level
from .errors import EmptyPatch, KTooLarge, NotNormalized, ShapeMismatch, ZeroRowOrColumn

NORM_TOL = 1e-6
SWEEPS = 5


class Polarity(str, enum.Enum):
    """How sigma^2 weights a correlation score: as a variance (1 - s) or as confidence (s)."""

    VARIANCE = "variance"
    CONFIDENCE = "confidence"


def _rows(h) -> np.ndarray:
    return h.features if isinstance(h, DescriptorSet) else np.asarray(h, dtype=np.float64)


def gaussian_correlation(hp, hq) -> np.ndarray:
    """exp(-|h_i - h_j|^2) between unit-norm descriptor rows."""
    a, b = _rows(hp), _rows(hq)
    for name, m in (("source", a), ("target", b)):
        dev = np.abs(np.linalg.norm(m, axis=1) - 1.0)
        if dev.size and dev.max() > NORM_TOL:
            raise NotNormalized(f"{name} descriptor row norm off by {dev.max():.3g}")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"descriptor widths differ: {a.shape[1]} vs {b.shape[1]}")
    # |a|^2 + |b|^2 - 2ab with unit rows, clipped against rounding below zero
    d2 = np.maximum(2.0 - 2.0 * (a @ b.T), 0.0)
    return np.exp(-d2)


def correlation_tensor(hp, hq):
    """Differentiable version of :func:`gaussian_correlation` (no norm check)."""
    return ad.exp(-ad.l2_distance_matrix(hp, hq))


def dual_normalize(s) -> np.ndarray:
    """Row-normalized times column-normalized scores."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeMismatch("score matrix must be 2-D")
    if np.any(s < 0):
        raise ValueError("scores must be nonnegative")
    rs = s.sum(axis=1, keepdims=True)
    cs = s.sum(axis=0, keepdims=True)
    if np.any(rs <= 0) or np.any(cs <= 0):
        raise ZeroRowOrColumn("a row or column of the score matrix sums to zero")
    return (s / rs) * (s / cs)


def mask_weights(mask: UncertaintyMask | None, shape, polarity: Polarity = Polarity.VARIANCE) -> np.ndarray:
    if mask is None:
        return np.ones(shape)
    sp = np.asarray(mask.sigma_sq_source, dtype=np.float64)
    sq = np.asarray(mask.sigma_sq_target, dtype=np.float64)
    if (len(sp), len(sq)) != tuple(shape):
        raise ShapeMismatch(f"mask sizes {(len(sp), len(sq))} do not match scores {tuple(shape)}")
    if Polarity(polarity) is Polarity.VARIANCE:
        return np.outer(1.0 - sp, 1.0 - sq)
    return np.outer(sp, sq)


def select_superpoint_correspondences(
    s, mask: UncertaintyMask | None = None, k: int = 64, polarity: Polarity = Polarity.VARIANCE
) -> CorrespondenceSet:
    """The k largest masked scores; ties go to the lower (row, col)."""
    s = np.asarray(s, dtype=np.float64)
    if k > s.size:
        raise KTooLarge(f"k={k} exceeds {s.size} candidate pairs")
    w = s * mask_weights(mask, s.shape, polarity)
    order = np.argsort(-w.ravel(), kind="stable")[:k]
    rows, cols = np.unravel_index(order, s.shape)
    return CorrespondenceSet(np.stack([rows, cols], axis=1), w.ravel()[order], Level.SUPERPOINT)


# --- patch-level soft assignment -------------------------------------------


@dataclass
class SoftAssignment:
    """(n+1) x (m+1) assignment; the last row and column are dustbins."""

    z_bar: np.ndarray
    src_index: np.ndarray | None = None
    tgt_index: np.ndarray | None = None

    @property
    def shape(self):
        return self.z_bar.shape


def augment_logits(logits: np.ndarray, dustbin: float) -> np.ndarray:
    n, m = logits.shape
    out = np.full((n + 1, m + 1), float(dustbin))
    out[:n, :m] = logits
    return out


def capped_sweeps(log_z: np.ndarray, sweeps: int = SWEEPS) -> np.ndarray:
    """Alternating column/row normalization in log space.

    Each column (then row), dustbins included, is divided by max(1, its sum),
    so no entry ever grows and every row ends with mass at most one.
    """
    z = np.array(log_z, dtype=np.float64)
    for _ in range(sweeps):
        for axis in (0, 1):
            top = z.max(axis=axis, keepdims=True)
            lse = top + np.log(np.exp(z - top).sum(axis=axis, keepdims=True))
            z = z - np.maximum(lse, 0.0)
    return z


def capped_sweeps_tensor(log_z, sweeps: int = SWEEPS):
    z = ad.as_tensor(log_z)
    for _ in range(sweeps):
        for axis in (0, 1):
            z = z - ad.maximum(ad.logsumexp(z, axis=axis, keepdims=True), 0.0)
    return z


def point_logits(fp: np.ndarray, fq: np.ndarray, scale: float = 10.0) -> np.ndarray:
    return scale * (fp @ fq.T)


def point_matching(fp, fq, dustbin: float = 1.0, scale: float = 10.0, sweeps: int = SWEEPS) -> SoftAssignment:
    """Soft assignment between two patches from their per-point features."""
    fp, fq = np.asarray(fp, dtype=np.float64), np.asarray(fq, dtype=np.float64)
    if fp.ndim != 2 or fq.ndim != 2 or not len(fp) or not len(fq):
        raise EmptyPatch("point matching needs two nonempty patches")
    if fp.shape[1] != fq.shape[1]:
        raise ShapeMismatch("point feature widths differ")
    log_z = capped_sweeps(augment_logits(point_logits(fp, fq, scale), dustbin), sweeps)
    return SoftAssignment(np.exp(log_z))


def point_matching_tensor(fp, fq, dustbin, scale: float = 10.0, sweeps: int = SWEEPS):
    """Differentiable log z-bar; ``dustbin`` may be a scalar Tensor."""
    fp, fq, dustbin = ad.as_tensor(fp), ad.as_tensor(fq), ad.as_tensor(dustbin)
    n, m = fp.shape[0], fq.shape[0]
    logits = (fp @ fq.T) * scale
    col = ad.reshape(dustbin, (1, 1)) * np.ones((n, 1))
    top = ad.concat([logits, col], axis=1)
    bottom = ad.reshape(dustbin, (1, 1)) * np.ones((1, m + 1))
    return capped_sweeps_tensor(ad.concat([top, bottom], axis=0), sweeps)


def extract_point_correspondences(z: SoftAssignment, threshold: float = 0.0) -> CorrespondenceSet:
    """Mutual row/column argmax entries outside the dustbins with z-bar >= threshold.

    Indices are mapped through ``src_index``/``tgt_index`` when present.
    """
    zb = z.z_bar
    n, m = zb.shape[0] - 1, zb.shape[1] - 1
    if n <= 0 or m <= 0:
        return CorrespondenceSet(np.zeros((0, 2)), np.zeros(0), Level.POINT)
    row_best = zb.argmax(axis=1)[:n]
    col_best = zb.argmax(axis=0)
    i = np.nonzero(row_best < m)[0]
    j = row_best[i]
    keep = (col_best[j] == i) & (zb[i, j] >= threshold)
    i, j = i[keep], j[keep]
    scores = zb[i, j]
    if z.src_index is not None:
        i = np.asarray(z.src_index)[i]
    if z.tgt_index is not None:
        j = np.asarray(z.tgt_index)[j]
    return CorrespondenceSet(np.stack([i, j], axis=1), scores, Level.POINT)
