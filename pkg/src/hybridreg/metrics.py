"""Registration metrics and split-wise aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .correspondence import CorrespondenceSet
from .errors import EmptyBatch, EmptyCorrespondences, InvalidRotation
from .geom import RigidTransform


@dataclass(frozen=True)
class Thresholds:
    rmse: float  # registration recall, meters
    inlier: float  # inlier ratio, meters
    fmr: float  # feature matching recall, fraction


PROFILES = {
    "indoor": Thresholds(0.2, 0.1, 0.05),
    "eth": Thresholds(0.5, 0.2, 0.05),
}


def _residuals(t: RigidTransform, c: CorrespondenceSet, src, tgt) -> np.ndarray:
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    return np.linalg.norm(t.apply(src[c.src]) - tgt[c.tgt], axis=1)


def rmse(t_est: RigidTransform, gt_c: CorrespondenceSet, src, tgt) -> float:
    if not len(gt_c):
        raise EmptyCorrespondences("RMSE needs at least one ground-truth correspondence")
    r = _residuals(t_est, gt_c, src, tgt)
    return float(np.sqrt(np.mean(r * r)))


def registration_recall(rmses, tau1: float) -> float:
    rmses = np.asarray(list(rmses), dtype=np.float64)
    if tau1 <= 0:
        raise ValueError("tau1 must be positive")
    if not len(rmses):
        raise EmptyBatch("no pairs to evaluate")
    return float(np.count_nonzero(rmses < tau1) / len(rmses))


def inlier_ratio(c: CorrespondenceSet, t_gt: RigidTransform, src, tgt, tau2: float) -> float:
    if not len(c):
        raise EmptyCorrespondences("inlier ratio needs at least one correspondence")
    return float(np.count_nonzero(_residuals(t_gt, c, src, tgt) < tau2) / len(c))


def feature_matching_recall(irs, tau3: float) -> float:
    irs = np.asarray(list(irs), dtype=np.float64)
    if not len(irs):
        raise EmptyBatch("no pairs to evaluate")
    return float(np.count_nonzero(irs > tau3) / len(irs))


def _check_rotation(r: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise InvalidRotation("rotation must be a finite 3x3 matrix")
    if np.abs(r.T @ r - np.eye(3)).max() > tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise InvalidRotation("matrix is not a proper rotation")
    return r


def rre(r_est, r_gt) -> float:
    """Geodesic angle between two rotations, degrees."""
    a, b = _check_rotation(r_est), _check_rotation(r_gt)
    cos = (np.trace(a.T @ b) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def rte(t_est, t_gt) -> float:
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


@dataclass
class PairReport:
    rmse_m: float
    ir: float
    rre_deg: float
    rte_m: float
    success: bool
    split: str = ""
    overlap_bin: str = ""


def evaluate_pair(
    t_est: RigidTransform,
    t_gt: RigidTransform,
    gt_c: CorrespondenceSet,
    est_c: CorrespondenceSet,
    src,
    tgt,
    thresholds: Thresholds = PROFILES["indoor"],
    split: str = "",
    overlap_bin: str = "",
) -> PairReport:
    e = rmse(t_est, gt_c, src, tgt)
    ir = inlier_ratio(est_c, t_gt, src, tgt, thresholds.inlier) if len(est_c) else 0.0
    return PairReport(
        e, ir, rre(t_est.rotation, t_gt.rotation), rte(t_est.translation, t_gt.translation),
        bool(e < thresholds.rmse), split, overlap_bin,
    )


def median(values) -> float | None:
    """Median; the mean of the middle two for an even count, None when empty."""
    v = sorted(float(x) for x in values)
    n = len(v)
    if n == 0:
        return None
    mid = n // 2
    return v[mid] if n % 2 else 0.5 * (v[mid - 1] + v[mid])


@dataclass
class SplitSummary:
    split: str
    overlap_bin: str
    n_pairs: int
    rr: float
    fmr: float
    mean_ir: float
    median_rre_deg: float | None
    median_rte_m: float | None


@dataclass
class MetricsReport:
    per_pair: list[PairReport]
    per_split: list[SplitSummary] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "overlap_bin", "pairs", "RR", "FMR", "IR", "medRRE_deg", "medRTE_cm"])
        for s in self.per_split:
            w.writerow(
                [
                    s.split, s.overlap_bin, s.n_pairs, fmt(s.rr), fmt(s.fmr), fmt(s.mean_ir),
                    fmt(s.median_rre_deg), fmt(None if s.median_rte_m is None else 100.0 * s.median_rte_m),
                ]
            )
        return buf.getvalue()


def fmt(x) -> str:
    """Fixed 9-significant-digit rendering; absent values print as NA."""
    return "NA" if x is None else f"{float(x):.9g}"


def summarize(reports: list[PairReport], thresholds: Thresholds, split: str = "all", overlap_bin: str = "all") -> SplitSummary:
    if not reports:
        raise EmptyBatch("no pairs to aggregate")
    ok = [r for r in reports if r.success]
    return SplitSummary(
        split, overlap_bin, len(reports),
        registration_recall([r.rmse_m for r in reports], thresholds.rmse),
        feature_matching_recall([r.ir for r in reports], thresholds.fmr),
        float(np.mean([r.ir for r in reports])),
        median([r.rre_deg for r in ok]),
        median([r.rte_m for r in ok]),
    )


def aggregate(reports: list[PairReport], thresholds: Thresholds = PROFILES["indoor"]) -> MetricsReport:
    """One summary row per (split, overlap bin) in first-seen order."""
    if not reports:
        raise EmptyBatch("no pairs to aggregate")
    groups: dict[tuple[str, str], list[PairReport]] = {}
    for r in reports:
        groups.setdefault((r.split, r.overlap_bin), []).append(r)
    rows = [summarize(g, thresholds, s, b) for (s, b), g in groups.items()]
    return MetricsReport(list(reports), rows)
