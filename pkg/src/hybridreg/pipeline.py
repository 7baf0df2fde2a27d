"""End-to-end registration: descriptors, attention, masked matching, estimation."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import attention as att
from .correspondence import CorrespondenceSet, Level
from .errors import EmptyPatch, HybridRegError
from .estimation import EstimationResult, LGRConfig, RansacConfig, lgr_estimate, polish_point_to_plane, ransac_estimate
from .geom import MotionLabel, PointCloud, SuperpointGraph, voxel_downsample
from .matching import (
    Polarity,
    SoftAssignment,
    dual_normalize,
    extract_point_correspondences,
    gaussian_correlation,
    point_matching,
    select_superpoint_correspondences,
)

MASK_EPS = 1e-6


class MaskMode(str, enum.Enum):
    NONE = "none"
    ORACLE = "oracle"
    LEARNED = "learned"


class Estimator(str, enum.Enum):
    RANSAC = "ransac"
    LGR = "lgr"


@dataclass
class PipelineConfig:
    voxel: float = 0.35
    fine_voxel: float = 0.05
    descriptor: str = "pfh"  # pfh | toy
    desc_radius: float | tuple = (1.6, 0.8)  # one histogram block per radius
    desc_shells: int = 3
    desc_bins: int = 5
    point_radius: float | tuple = (0.8, 0.3)
    point_shells: int = 3
    point_bins: int = 5
    normal_radius: float = 0.3
    d_t: int = att.D_T
    hidden: int = att.HIDDEN
    blocks: int = 1
    sigma_d: float = 0.2
    sigma_a_deg: float = 15.0
    k_angle: int = 3
    top_k: int = 128
    polarity: Polarity = Polarity.VARIANCE
    point_scale: float = 10.0
    match_threshold: float = 0.0
    ransac_iterations: int = 1000
    # point matches carry ~5 cm localization noise, so both estimators accept 10 cm
    inlier_threshold: float = 0.1
    lgr_threshold: float = 0.1
    refine_iters: int = 5
    lgr_settle: int = 3
    polish_iters: int = 0  # dense point-to-plane rounds after estimation
    seed: int = 0


@dataclass
class CloudFeatures:
    """Everything the matcher needs from one cloud.

    Fine points are a thinned copy of the cloud; they are both the points
    matched inside a patch and the support their histograms are built from.
    """

    cloud: PointCloud
    graph: SuperpointGraph
    descriptors: att.DescriptorSet
    embedding: np.ndarray
    fine_points: np.ndarray
    fine_normals: np.ndarray
    fine_rep: np.ndarray  # dense index standing in for each fine point
    fine_patch: list[np.ndarray]  # fine indices per superpoint
    point_radius: float | tuple = (0.8, 0.3)
    point_shells: int = 3
    point_bins: int = 5
    _point_cache: dict = field(default_factory=dict, repr=False)

    def point_features(self, patches) -> dict[int, np.ndarray]:
        """Per-point histograms for the fine points of the given patches.

        Only matched patches ever need them, so they are computed on demand
        and cached per patch.
        """
        todo = sorted({int(i) for i in patches} - self._point_cache.keys())
        if todo:
            idx = np.concatenate([self.fine_patch[i] for i in todo])
            parts = [
                att.pair_feature_histograms(
                    self.fine_points[idx], self.fine_normals[idx], self.fine_points, self.fine_normals,
                    radius, self.point_shells, self.point_bins,
                )
                for radius in np.atleast_1d(self.point_radius)
            ]
            h = np.concatenate(parts, axis=1) / np.sqrt(len(parts))
            bounds = np.cumsum([0] + [len(self.fine_patch[i]) for i in todo])
            for k, i in enumerate(todo):
                self._point_cache[i] = h[bounds[k] : bounds[k + 1]]
        return {int(i): self._point_cache[int(i)] for i in patches}


def _group(owner: np.ndarray, n: int) -> list[np.ndarray]:
    order = np.argsort(owner, kind="stable")
    bounds = np.searchsorted(owner[order], np.arange(n + 1))
    return [order[bounds[i] : bounds[i + 1]] for i in range(n)]


def prepare_cloud(cloud: PointCloud, cfg: PipelineConfig, descriptors: att.DescriptorSet | None = None) -> CloudFeatures:
    graph = voxel_downsample(cloud, cfg.voxel)
    fine = voxel_downsample(cloud, cfg.fine_voxel).superpoints
    n_fine = att.estimate_normals(fine)
    _, rep = cKDTree(cloud.points).query(fine)
    _, owner = cKDTree(graph.superpoints).query(fine)
    patches = _group(owner, len(graph))
    if descriptors is None:
        if cfg.descriptor == "toy":
            descriptors = att.toy_descriptors(graph, cloud, d=cfg.d_t)
        else:
            n_sp = att.superpoint_normals(graph.superpoints, fine, cfg.normal_radius)
            parts = [
                att.pair_feature_histograms(graph.superpoints, n_sp, fine, n_fine, r, cfg.desc_shells, cfg.desc_bins)
                for r in np.atleast_1d(cfg.desc_radius)
            ]
            descriptors = att.DescriptorSet(np.concatenate(parts, axis=1) / np.sqrt(len(parts)))
    elif len(descriptors) != len(graph):
        raise HybridRegError(f"descriptor rows {len(descriptors)} do not match {len(graph)} superpoints")
    emb = att.geometric_embedding(
        graph.superpoints, cfg.d_t, cfg.sigma_d, cfg.sigma_a_deg, cfg.k_angle, precision=np.float32
    )
    return CloudFeatures(
        cloud, graph, descriptors, emb, fine, n_fine, np.asarray(rep), patches,
        cfg.point_radius, cfg.point_shells, cfg.point_bins,
    )


def oracle_sigma(cloud: PointCloud, graph: SuperpointGraph) -> np.ndarray:
    """Fraction of moving points per patch, kept strictly inside (0, 1)."""
    moving = (cloud.labels != MotionLabel.BACKGROUND).astype(np.float64)
    frac = np.array([moving[p].mean() if len(p) else 0.0 for p in graph.patches])
    return np.clip(frac, MASK_EPS, 1.0 - MASK_EPS)


@dataclass
class Registration:
    result: EstimationResult
    superpoint_c: CorrespondenceSet
    point_c: CorrespondenceSet
    patch_c: list[CorrespondenceSet] = field(repr=False)
    mask: att.UncertaintyMask | None = None


@dataclass
class Matches:
    superpoint_c: CorrespondenceSet
    patch_c: list[CorrespondenceSet]
    mask: att.UncertaintyMask | None
    features: tuple[np.ndarray, np.ndarray]

    @property
    def point_c(self) -> CorrespondenceSet:
        return CorrespondenceSet.concat(self.patch_c).deduplicated()


def match_pair(
    fp: CloudFeatures,
    fq: CloudFeatures,
    cfg: PipelineConfig,
    params: att.ParameterSet | None = None,
    mask_mode: MaskMode = MaskMode.NONE,
) -> Matches:
    if params is None:
        params = att.init_params(np.random.default_rng(cfg.seed), fp.descriptors.d, cfg.d_t, cfg.hidden, cfg.blocks)
    gp, gq = att.transformer(fp.descriptors.features, fq.descriptors.features, fp.embedding, fq.embedding, params)
    hp = att.DescriptorSet(gp.data).normalized()
    hq = att.DescriptorSet(gq.data).normalized()
    s = dual_normalize(gaussian_correlation(hp, hq))
    mode = MaskMode(mask_mode)
    mask = None
    if mode is MaskMode.ORACLE:
        mask = att.UncertaintyMask(oracle_sigma(fp.cloud, fp.graph), oracle_sigma(fq.cloud, fq.graph))
    elif mode is MaskMode.LEARNED:
        mask = att.predict_uncertainty(gp.data, gq.data, params)
    k = min(cfg.top_k, s.size)
    sc = select_superpoint_correspondences(s, mask, k, cfg.polarity)
    dustbin = float(params["dustbin"])
    feat_p = fp.point_features(sc.src)
    feat_q = fq.point_features(sc.tgt)
    patch_c = []
    for (i, j), score in zip(sc.pairs, sc.scores):
        pi, qj = fp.fine_patch[i], fq.fine_patch[j]
        if not len(pi) or not len(qj):
            patch_c.append(CorrespondenceSet(np.zeros((0, 2)), np.zeros(0)))
            continue
        z = point_matching(feat_p[int(i)], feat_q[int(j)], dustbin, cfg.point_scale)
        z = SoftAssignment(z.z_bar, fp.fine_rep[pi], fq.fine_rep[qj])
        patch_c.append(extract_point_correspondences(z, cfg.match_threshold))
    return Matches(sc, patch_c, mask, (gp.data, gq.data))


def estimate(m: Matches, src: PointCloud, tgt: PointCloud, estimator: Estimator, cfg: PipelineConfig) -> EstimationResult:
    if Estimator(estimator) is Estimator.RANSAC:
        rc = RansacConfig(cfg.ransac_iterations, cfg.inlier_threshold, cfg.seed)
        return ransac_estimate(m.point_c, src.points, tgt.points, rc)
    lc = LGRConfig(cfg.lgr_threshold, cfg.refine_iters, cfg.lgr_settle)
    return lgr_estimate(m.superpoint_c, m.patch_c, src.points, tgt.points, None, lc)


def register(
    source: PointCloud,
    target: PointCloud,
    cfg: PipelineConfig | None = None,
    estimator: Estimator = Estimator.LGR,
    mask_mode: MaskMode = MaskMode.NONE,
    params: att.ParameterSet | None = None,
    descriptors: tuple[att.DescriptorSet, att.DescriptorSet] | None = None,
) -> Registration:
    cfg = cfg or PipelineConfig()
    dp, dq = descriptors if descriptors is not None else (None, None)
    fp = prepare_cloud(source, cfg, dp)
    fq = prepare_cloud(target, cfg, dq)
    m = match_pair(fp, fq, cfg, params, mask_mode)
    res = estimate(m, source, target, estimator, cfg)
    if cfg.polish_iters > 0:
        res = replace(res, transform=polish_point_to_plane(source.points, target.points, res.transform, cfg.polish_iters))
    return Registration(res, m.superpoint_c, m.point_c, m.patch_c, m.mask)


__all__ = [
    "CloudFeatures", "Estimator", "MaskMode", "Matches", "PipelineConfig", "Registration",
    "EmptyPatch", "Level", "estimate", "match_pair", "oracle_sigma", "prepare_cloud", "register",
]
