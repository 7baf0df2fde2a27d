"""Registration pairs rendered from two cameras, with exact background ground truth."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from ..correspondence import CorrespondenceSet, Level
from ..errors import EmptyCloud, EmptyOverlap
from ..geom import MotionLabel, PointCloud, RigidTransform
from .scene import Camera, Scene, cast_rays, compute_nonrigid_proportion

# an aimed ray counts as reaching its source point if it lands this close
PROVENANCE_TOL = 1e-9


class Split(str, enum.Enum):
    RIGID_ONLY = "rigid-only"
    NONRIGID_10_30 = "nonrigid-10-30"
    NONRIGID_30_50 = "nonrigid-30-50"


class OverlapBin(str, enum.Enum):
    HIGH = "high"
    LO = "lo"


def split_for(proportion: float) -> Split | None:
    if proportion == 0.0:
        return Split.RIGID_ONLY
    if 0.1 <= proportion < 0.3:
        return Split.NONRIGID_10_30
    if 0.3 <= proportion <= 0.5:
        return Split.NONRIGID_30_50
    return None


def overlap_bin_for(overlap: float) -> OverlapBin | None:
    if overlap > 0.3:
        return OverlapBin.HIGH
    if overlap >= 0.1:
        return OverlapBin.LO
    return None


@dataclass
class PairConfig:
    match_radius: float = 0.025
    freeze_dynamics: bool = False
    thin_planes: bool = True
    thin_voxel: float = 0.2
    thin_eig: float = 1e-4
    thin_prob: float = 0.5
    max_depth: float = 7.0
    min_overlap: float = 0.01
    min_object_points: int = 100  # rendered points for a static object to count as seen
    seed: int = 0


@dataclass
class ScenePair:
    source: PointCloud  # source camera frame
    target: PointCloud  # target camera frame
    gt_transform: RigidTransform
    gt_correspondences: CorrespondenceSet
    overlap_ratio: float
    nonrigid_proportion: float
    split: Split | None
    overlap_bin: OverlapBin | None
    frames: tuple[int, int] = (0, 0)
    seed: int = 0
    meta: dict = field(default_factory=dict)


def planar_mask(points: np.ndarray, voxel: float, eig_thresh: float, min_pts: int = 5) -> np.ndarray:
    """Points whose voxel patch is flat (smallest covariance eigenvalue below threshold)."""
    out = np.zeros(len(points), dtype=bool)
    if not len(points):
        return out
    keys = np.floor(points / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    order = np.argsort(inv, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    for v in np.nonzero(counts >= min_pts)[0]:
        idx = order[bounds[v] : bounds[v + 1]]
        p = points[idx] - points[idx].mean(axis=0)
        if np.linalg.eigvalsh(p.T @ p / len(idx))[0] < eig_thresh:
            out[idx] = True
    return out


def overlap_ratio(source: PointCloud, target: PointCloud, gt: RigidTransform, radius: float) -> float:
    """Fraction of source background points within ``radius`` of a target background point."""
    sb = source.points[source.labels == MotionLabel.BACKGROUND]
    tb = target.points[target.labels == MotionLabel.BACKGROUND]
    if not len(sb) or not len(tb):
        return 0.0
    d, _ = cKDTree(tb).query(gt.apply(sb), k=1)
    return float(np.count_nonzero(d <= radius) / len(sb))


def _aimed_rays(cam: Camera, world_pts: np.ndarray):
    """For each target pixel, the candidate point projecting closest to its center."""
    u, v, z = cam.project(world_pts)
    ok = (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    cand = np.nonzero(ok)[0]
    col = np.floor(u[cand]).astype(np.int64)
    row = np.floor(v[cand]).astype(np.int64)
    pix = row * cam.width + col
    off = (u[cand] - col - 0.5) ** 2 + (v[cand] - row - 0.5) ** 2
    order = np.lexsort((cand, off, pix))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[order][1:] != pix[order][:-1]
    pick = order[first]
    return pix[pick], cand[pick]


def build_pair(scene: Scene, cam_a: Camera, cam_b: Camera, times: tuple[int, int], config: PairConfig | None = None) -> ScenePair:
    cfg = config or PairConfig()
    t_a, t_b = int(times[0]), int(times[1])
    dyn_b = t_a if cfg.freeze_dynamics else t_b

    # source render
    o, d, pix_a = cam_a.pixel_rays()
    dist, lab_a, obj_a = cast_rays(scene, o, d, t_a, True, t_a)
    keep = np.isfinite(dist) & (dist * (d @ cam_a.forward) <= cfg.max_depth)
    xa = o[keep] + dist[keep, None] * d[keep]
    lab_a, obj_a, pix_a = lab_a[keep], obj_a[keep], pix_a[keep]
    if cfg.freeze_dynamics:
        lab_a = np.zeros_like(lab_a)

    # target render: pixels that see a source background point get a ray aimed
    # exactly at it, the rest go through the pixel center
    o, d, pix_b = cam_b.pixel_rays()
    bg_a = np.nonzero(lab_a == MotionLabel.BACKGROUND)[0]
    aim_pix, aim_src = _aimed_rays(cam_b, xa[bg_a])
    aim_src = bg_a[aim_src]
    dirs = d.copy()
    aimed = xa[aim_src] - cam_b.position
    dirs[aim_pix] = aimed / np.linalg.norm(aimed, axis=1, keepdims=True)
    dist, lab_b, obj_b = cast_rays(scene, o, dirs, t_b, True, dyn_b)
    hit = o + np.where(np.isfinite(dist), dist, 0.0)[:, None] * dirs
    keep_b = np.isfinite(dist) & (dist * (dirs @ cam_b.forward) <= cfg.max_depth)
    if cfg.freeze_dynamics:
        lab_b = np.zeros_like(lab_b)
    reached = (
        keep_b[aim_pix]
        & (obj_b[aim_pix] == obj_a[aim_src])
        & (np.linalg.norm(hit[aim_pix] - xa[aim_src], axis=1) <= PROVENANCE_TOL)
        & (lab_b[aim_pix] == MotionLabel.BACKGROUND)
    )
    gt_src, gt_tgt_pix = aim_src[reached], aim_pix[reached]

    kb = np.nonzero(keep_b)[0]
    xb, lab_b, pix_b, obj_b = hit[kb], lab_b[kb], pix_b[kb], obj_b[kb]
    if not len(xa) or not len(xb):
        raise EmptyCloud("a rendered view is empty")
    tgt_index = np.full(len(o), -1, dtype=np.int64)
    tgt_index[kb] = np.arange(len(kb))
    gt_tgt = tgt_index[gt_tgt_pix]

    # drop half of the points on flat patches, in each camera's own frame
    src_pts = cam_a.pose.apply(xa)
    tgt_pts = cam_b.pose.apply(xb)
    keep_a = np.ones(len(src_pts), dtype=bool)
    keep_t = np.ones(len(tgt_pts), dtype=bool)
    if cfg.thin_planes:
        for pts, kmask, stream in ((src_pts, keep_a, 1), (tgt_pts, keep_t, 2)):
            flat = planar_mask(pts, cfg.thin_voxel, cfg.thin_eig)
            rng = np.random.default_rng([cfg.seed, stream])
            kmask &= ~(flat & (rng.random(len(pts)) < cfg.thin_prob))
    remap_a = np.cumsum(keep_a) - 1
    remap_t = np.cumsum(keep_t) - 1
    both = keep_a[gt_src] & keep_t[gt_tgt]
    pairs = np.stack([remap_a[gt_src[both]], remap_t[gt_tgt[both]]], axis=1)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]

    source = PointCloud(src_pts[keep_a], lab_a[keep_a], pix_a[keep_a])
    target = PointCloud(tgt_pts[keep_t], lab_b[keep_t], pix_b[keep_t])
    gt = cam_b.pose.compose(cam_a.pose.inverse())
    ov = overlap_ratio(source, target, gt, cfg.match_radius)
    if ov < cfg.min_overlap:
        raise EmptyOverlap(f"overlap {ov:.4f} below {cfg.min_overlap}")
    prop = 0.0 if cfg.freeze_dynamics else compute_nonrigid_proportion(scene, cam_a, t_a)
    meta = {"visible_static": visible_static_count(scene, obj_a, obj_b, cfg.min_object_points)}
    return ScenePair(
        source, target, gt, CorrespondenceSet(pairs, None, Level.POINT), ov, prop,
        split_for(prop), overlap_bin_for(ov), (t_a, t_b), cfg.seed, meta,
    )


def visible_static_count(scene: Scene, obj_a: np.ndarray, obj_b: np.ndarray, min_points: int) -> int:
    """Static objects (room excluded) hit by at least ``min_points`` rays in both views."""
    n = len(scene.static_objects) + 1

    def counts(obj):
        obj = np.asarray(obj)
        return np.bincount(obj[(obj >= 0) & (obj < n)], minlength=n)

    ca, cb = counts(obj_a), counts(obj_b)
    return int(np.count_nonzero((ca[1:] >= min_points) & (cb[1:] >= min_points)))


def frozen_twin(scene: Scene, cam_a: Camera, cam_b: Camera, times, config: PairConfig | None = None) -> ScenePair:
    """Same cameras and frames with every dynamic object held at its first-frame state."""
    return build_pair(scene, cam_a, cam_b, times, replace(config or PairConfig(), freeze_dynamics=True))
