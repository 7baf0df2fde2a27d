"""Robust rigid-transform estimation from putative correspondences."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .attention import estimate_normals
from .correspondence import CorrespondenceSet
from .errors import DegenerateConfiguration, FormatError, NoUsablePatch, NoValidModel, TooFewCorrespondences
from .geom import COLLINEAR_EIG, RigidTransform, axis_angle, weighted_kabsch


@dataclass
class EstimationResult:
    transform: RigidTransform
    inlier_indices: np.ndarray
    inlier_count: int
    iterations_used: int

    def to_record(self) -> str:
        m = self.transform.as_matrix()
        return "\n".join(
            [
                "transform: " + " ".join(f"{v:.17g}" for v in m.ravel()),
                f"inlier_count: {self.inlier_count}",
                f"iterations_used: {self.iterations_used}",
                "inliers: " + " ".join(str(int(i)) for i in self.inlier_indices),
            ]
        ) + "\n"

    @classmethod
    def from_record(cls, text: str) -> EstimationResult:
        rec = {}
        for line in text.splitlines():
            if ":" in line:
                key, val = line.split(":", 1)
                rec[key.strip()] = val.strip()
        try:
            m = np.array([float(v) for v in rec["transform"].split()]).reshape(4, 4)
            inl = np.array([int(v) for v in rec.get("inliers", "").split()], dtype=np.int64)
            return cls(RigidTransform.from_matrix(m), inl, int(rec["inlier_count"]), int(rec["iterations_used"]))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad estimation record: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_record())


@dataclass
class RansacConfig:
    iterations: int = 1000
    inlier_threshold: float = 0.05
    seed: int = 0
    max_draw_factor: int = 10
    batch: int = 256


@dataclass
class LGRConfig:
    inlier_threshold: float = 0.05
    refine_iters: int = 5
    settle: int = 0  # rounds of refitting every candidate on its own global inliers before ranking


def _residuals(r: np.ndarray, t: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.linalg.norm(p @ r.T + t - q, axis=1)


def _batch_residuals(rs, ts, p, q) -> np.ndarray:
    return np.linalg.norm(np.einsum("bij,kj->bki", rs, p) + ts[:, None, :] - q[None], axis=2)


def _kabsch_batch(p: np.ndarray, q: np.ndarray):
    """Unit-weight rigid fits for a batch of (B, k, 3) point groups."""
    pc, qc = p.mean(axis=1, keepdims=True), q.mean(axis=1, keepdims=True)
    h = np.einsum("bki,bkj->bij", p - pc, q - qc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(np.einsum("bji,bkj->bik", vt, u)))
    d[d == 0] = 1.0
    fix = np.ones((len(p), 3))
    fix[:, 2] = d
    r = np.einsum("bji,bj,bkj->bik", vt, fix, u)
    t = qc[:, 0] - np.einsum("bij,bj->bi", r, pc[:, 0])
    return r, t


def _degenerate(tri: np.ndarray) -> np.ndarray:
    """Triples whose points are (nearly) collinear or coincident.

    Three points always span at most a plane, so the middle covariance
    eigenvalue is the one that vanishes on a line.
    """
    c = tri - tri.mean(axis=1, keepdims=True)
    w = np.linalg.eigvalsh(np.einsum("bki,bkj->bij", c, c) / 3.0)
    return w[:, 1] < COLLINEAR_EIG


def _better(count, resid, best_count, best_resid) -> bool:
    return count > best_count or (count == best_count and resid < best_resid)


def ransac_estimate(c: CorrespondenceSet, src, tgt, config: RansacConfig | None = None) -> EstimationResult:
    """Three-point RANSAC; best inlier count wins, ties by lower summed inlier residual."""
    cfg = config or RansacConfig()
    if len(c) < 3:
        raise TooFewCorrespondences(f"RANSAC needs at least 3 correspondences, got {len(c)}")
    p = np.asarray(src, dtype=np.float64)[c.src]
    q = np.asarray(tgt, dtype=np.float64)[c.tgt]
    k = len(p)
    rng = np.random.default_rng(cfg.seed)
    thr = cfg.inlier_threshold
    best = None
    best_count, best_resid = -1, np.inf
    used = drawn = 0
    cap = cfg.max_draw_factor * cfg.iterations
    while used < cfg.iterations and drawn < cap:
        b = min(cfg.batch, cap - drawn)
        idx = rng.integers(0, k, size=(b, 3))
        drawn += b
        ok = (idx[:, 0] != idx[:, 1]) & (idx[:, 0] != idx[:, 2]) & (idx[:, 1] != idx[:, 2])
        ok &= ~_degenerate(p[idx]) & ~_degenerate(q[idx])
        idx = idx[ok][: cfg.iterations - used]
        if not len(idx):
            continue
        used += len(idx)
        r, t = _kabsch_batch(p[idx], q[idx])
        res = np.linalg.norm(np.einsum("bij,kj->bki", r, p) + t[:, None, :] - q[None], axis=2)
        inl = res <= thr
        counts = inl.sum(axis=1)
        resid = np.where(inl, res, 0.0).sum(axis=1)
        for m in np.lexsort((resid, -counts))[:1]:
            if _better(counts[m], resid[m], best_count, best_resid):
                best_count, best_resid = int(counts[m]), float(resid[m])
                best = RigidTransform(r[m], t[m])
    if best is None:
        raise NoValidModel("every sampled triple was degenerate")
    final = best
    inl = np.nonzero(_residuals(best.rotation, best.translation, p, q) <= thr)[0]
    if len(inl) >= 3:
        try:
            final = weighted_kabsch(p[inl], q[inl])
        except DegenerateConfiguration:
            final = best
    res = _residuals(final.rotation, final.translation, p, q)
    inliers = np.nonzero(res <= thr)[0]
    return EstimationResult(final, inliers, len(inliers), used)


def lgr_estimate(
    superpoint_c: CorrespondenceSet | None,
    point_c: list[CorrespondenceSet],
    src,
    tgt,
    weights: list[np.ndarray] | None = None,
    config: LGRConfig | None = None,
) -> EstimationResult:
    """Local-to-global registration.

    Every patch correspondence proposes a transform fitted to its own point
    pairs; the proposal with the most inliers over the union of all point
    pairs wins (ties: lower summed residual, then lower patch index) and is
    refit on its global inliers while that does not lose inliers.
    ``superpoint_c`` is kept for provenance; patch order follows ``point_c``.
    """
    cfg = config or LGRConfig()
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if weights is None:
        weights = [s.scores for s in point_c]
    all_c = CorrespondenceSet.concat(point_c)
    all_w = np.concatenate([np.asarray(w, dtype=np.float64) for w in weights]) if weights else np.zeros(0)
    p_all, q_all = src[all_c.src], tgt[all_c.tgt]
    thr = cfg.inlier_threshold

    cand = []
    for k, (cs, w) in enumerate(zip(point_c, weights)):
        if len(cs) < 3:
            continue
        try:
            cand.append((k, weighted_kabsch(src[cs.src], tgt[cs.tgt], w)))
        except DegenerateConfiguration:
            continue
    if not cand:
        raise NoUsablePatch("no patch has three non-degenerate point correspondences")

    rs = np.stack([t.rotation for _, t in cand])
    ts = np.stack([t.translation for _, t in cand])
    # a patch fit rests on a handful of points; let each proposal settle on its
    # own global inliers before the proposals compete
    # the acceptance radius shrinks to the inlier threshold over the rounds so a
    # rough patch fit can still reach its true inliers
    for r in range(cfg.settle):
        inl = _batch_residuals(rs, ts, p_all, q_all) <= thr * 2.0 ** (cfg.settle - 1 - r)
        for b in range(len(cand)):
            if inl[b].sum() < 3:
                continue
            try:
                t = weighted_kabsch(p_all[inl[b]], q_all[inl[b]])
            except DegenerateConfiguration:
                continue
            rs[b], ts[b] = t.rotation, t.translation
            cand[b] = (cand[b][0], t)
    res = _batch_residuals(rs, ts, p_all, q_all)
    inl = res <= thr
    counts = inl.sum(axis=1)
    resid = np.where(inl, res, 0.0).sum(axis=1)
    order = np.lexsort((np.arange(len(cand)), resid, -counts))
    best = cand[order[0]][1]
    best_count = int(counts[order[0]])
    rounds = 0
    for _ in range(cfg.refine_iters):
        mask = _residuals(best.rotation, best.translation, p_all, q_all) <= thr
        if mask.sum() < 3:
            break
        try:
            w = all_w[mask] if np.all(all_w[mask] > 0) else None
            new = weighted_kabsch(p_all[mask], q_all[mask], w)
        except DegenerateConfiguration:
            break
        new_count = int(np.count_nonzero(_residuals(new.rotation, new.translation, p_all, q_all) <= thr))
        rounds += 1
        if new_count < best_count:
            break
        best, best_count = new, new_count
    final = _residuals(best.rotation, best.translation, p_all, q_all)
    inliers = np.nonzero(final <= thr)[0]
    return EstimationResult(best, inliers, len(inliers), len(cand) + rounds)


def polish_point_to_plane(
    src, tgt, init: RigidTransform, iters: int = 20, max_dist: float = 0.05, min_dist: float = 0.01, k: int = 12
) -> RigidTransform:
    """Dense point-to-plane refinement of an estimate.

    Each round pairs every moved source point with its nearest target point
    inside the acceptance radius, solves the linearized plane-distance
    problem and shrinks the radius by 30% down to ``min_dist``. Rounds that
    find fewer than six pairs stop the refinement.
    """
    src, tgt = np.asarray(src, dtype=np.float64), np.asarray(tgt, dtype=np.float64)
    if iters <= 0 or len(tgt) < k:
        return init
    normals = estimate_normals(tgt, k=k)
    tree = cKDTree(tgt)
    t, radius = init, max_dist
    for _ in range(iters):
        x = t.apply(src)
        d, j = tree.query(x, distance_upper_bound=radius)
        ok = np.isfinite(d)
        if ok.sum() < 6:
            break
        p, q, n = x[ok], tgt[j[ok]], normals[j[ok]]
        a = np.hstack([np.cross(p, n), n])
        step = np.linalg.lstsq(a, -((p - q) * n).sum(axis=1), rcond=None)[0]
        angle = np.linalg.norm(step[:3])
        r = axis_angle(step[:3], angle) if angle > 0 else np.eye(3)
        t = RigidTransform(r @ t.rotation, r @ t.translation + step[3:])
        radius = max(min_dist, radius * 0.7)
    return t
