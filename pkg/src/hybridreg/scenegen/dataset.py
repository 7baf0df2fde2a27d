"""Quota-driven pair generation and the on-disk manifest."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..correspondence import CorrespondenceSet
from ..errors import EmptyCloud, EmptyOverlap, FormatError, HybridRegError, NoQualifyingPair, NoValidPose, QuotaUnreachable
from ..geom import RigidTransform, read_ply, write_ply
from .pairs import OverlapBin, PairConfig, ScenePair, Split, build_pair, frozen_twin
from .scene import (
    Camera,
    CameraConfig,
    Scene,
    SceneConfig,
    camera_on_grid,
    random_scene,
    sample_camera_poses,
    select_frame_pair,
    standoff_distance,
)

log = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
WORKERS_ENV = "HYBRIDREG_WORKERS"

# movable-object counts that make each split's proportion band likely
MOVABLE_FOR_SPLIT = {
    Split.RIGID_ONLY: (2, 6),
    Split.NONRIGID_10_30: (0, 2),
    Split.NONRIGID_30_50: (6, 10),
}


@dataclass
class DatasetConfig:
    seed: int = 0
    n_pairs: int = 100
    splits: tuple = (Split.RIGID_ONLY,)
    overlap_bins: tuple = (None,)  # None accepts either bin
    n_frames: int = 40
    change_threshold: float = 0.25
    min_visible_static: int = 3
    min_visible_static_lo: int = 1  # low-overlap views rarely share three objects
    # second camera: random location offset from the first, re-aimed at the center
    offset_m: tuple = (0.4, 0.8)
    # for the low-overlap bin it looks this far to the side of the center instead
    lo_look_shift_m: tuple = (1.3, 2.0)
    offset_vertical_scale: float = 0.3
    follow_yaw_deg: tuple = (15.0, 30.0)  # dynamic-content orbit between the two frames
    attempts_per_pair: int = 100
    scene: SceneConfig = field(default_factory=SceneConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    pair: PairConfig = field(default_factory=PairConfig)


@dataclass
class PairRecord:
    index: int
    source: str
    target: str
    gt_correspondences: str
    gt_transform: np.ndarray  # 4x4
    overlap_ratio: float
    nonrigid_proportion: float
    split: str
    overlap_bin: str
    seed: tuple  # rng key of the attempt that produced the pair
    frames: tuple
    camera_source: np.ndarray
    camera_target: np.ndarray
    follow_yaw_deg_per_frame: float
    visible_static: int

    def to_text(self) -> str:
        mat = lambda m: " ".join(f"{v:.17g}" for v in np.asarray(m).ravel())  # noqa: E731
        rows = [
            ("pair", str(self.index)),
            ("source", self.source),
            ("target", self.target),
            ("gt_correspondences", self.gt_correspondences),
            ("gt_transform", mat(self.gt_transform)),
            ("overlap_ratio", f"{self.overlap_ratio:.17g}"),
            ("nonrigid_proportion", f"{self.nonrigid_proportion:.17g}"),
            ("split", self.split),
            ("overlap_bin", self.overlap_bin),
            ("seed", " ".join(str(int(s)) for s in self.seed)),
            ("frames", " ".join(str(int(f)) for f in self.frames)),
            ("camera_source", mat(self.camera_source)),
            ("camera_target", mat(self.camera_target)),
            ("follow_yaw_deg_per_frame", f"{self.follow_yaw_deg_per_frame:.17g}"),
            ("visible_static", str(self.visible_static)),
        ]
        return "".join(f"{k}: {v}\n" for k, v in rows)

    @classmethod
    def from_fields(cls, rec: dict) -> PairRecord:
        try:
            mat = lambda k: np.array([float(v) for v in rec[k].split()]).reshape(4, 4)  # noqa: E731
            return cls(
                int(rec["pair"]), rec["source"], rec["target"], rec["gt_correspondences"], mat("gt_transform"),
                float(rec["overlap_ratio"]), float(rec["nonrigid_proportion"]), rec["split"], rec["overlap_bin"],
                tuple(int(v) for v in rec["seed"].split()), tuple(int(v) for v in rec["frames"].split()),
                mat("camera_source"), mat("camera_target"), float(rec["follow_yaw_deg_per_frame"]),
                int(rec["visible_static"]),
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad manifest record: {exc}") from None


def write_manifest(path, records: list[PairRecord], header: dict | None = None) -> None:
    parts = ["".join(f"# {k}: {v}\n" for k, v in (header or {}).items())]
    parts += [r.to_text() for r in records]
    Path(path).write_text("\n".join(p for p in parts if p))


def read_manifest(path) -> list[PairRecord]:
    records, cur = [], {}
    for line in Path(path).read_text().splitlines() + [""]:
        if line.startswith("#"):
            continue
        if not line.strip():
            if cur:
                records.append(PairRecord.from_fields(cur))
                cur = {}
            continue
        if ":" not in line:
            raise FormatError(f"{path}: expected 'key: value', got {line!r}")
        k, v = line.split(":", 1)
        cur[k.strip()] = v.strip()
    return records


def load_pair(record: PairRecord, root) -> ScenePair:
    """Rebuild a pair from its files; pixel provenance is not stored."""
    root = Path(root)
    src, tgt = read_ply(root / record.source), read_ply(root / record.target)
    gt_c = CorrespondenceSet.load(root / record.gt_correspondences)
    return ScenePair(
        src, tgt, RigidTransform.from_matrix(record.gt_transform), gt_c, record.overlap_ratio,
        record.nonrigid_proportion, Split(record.split), OverlapBin(record.overlap_bin), tuple(record.frames),
        record.seed[0], {"visible_static": record.visible_static},
    )


def load_dataset(root) -> list[ScenePair]:
    root = Path(root)
    return [load_pair(r, root) for r in read_manifest(root / MANIFEST)]


# --- generation ----------------------------------------------------------


@dataclass
class Attempt:
    """One rejection-sampling draw; everything follows from its rng key."""

    key: tuple
    scene: Scene
    cam_a: Camera
    cam_b: Camera
    frames: tuple


def draw_attempt(cfg: DatasetConfig, key: tuple, split: Split, bin_: OverlapBin | None) -> Attempt:
    """Scene, frame pair and cameras for rng key ``key``; raises when the draw is unusable."""
    rng = np.random.default_rng(list(key))
    scene = random_scene(rng, cfg.scene, seed=int(rng.integers(2**31)), n_movable=MOVABLE_FOR_SPLIT[split])
    a, b = select_frame_pair(scene, cfg.n_frames, cfg.change_threshold)
    cams = sample_camera_poses(scene, cfg.camera)
    cam_a = cams[int(rng.integers(len(cams)))]
    v = rng.normal(size=3)
    v[2] *= cfg.offset_vertical_scale
    v *= rng.uniform(*cfg.offset_m) / np.linalg.norm(v)
    shift = 0.0
    if bin_ is OverlapBin.LO:
        shift = rng.choice([-1.0, 1.0]) * rng.uniform(*cfg.lo_look_shift_m)
    cam_b = camera_on_grid(scene, cam_a.azimuth_deg, cam_a.elevation_deg, cfg.camera, offset=v, look_shift=shift)
    yaw = rng.choice([-1.0, 1.0]) * rng.uniform(*cfg.follow_yaw_deg)
    scene = replace(scene, follow_yaw_deg_per_frame=float(yaw) / (b - a), follow_ref_frame=a)
    if standoff_distance(scene, cam_b.position, b) < cfg.camera.standoff:
        raise NoValidPose("offset camera is too close to an object")
    return Attempt(key, scene, cam_a, cam_b, (a, b))


def render_attempt(cfg: DatasetConfig, att: Attempt, split: Split) -> ScenePair:
    pc = replace(cfg.pair, seed=int(att.key[-1]))
    build = frozen_twin if split is Split.RIGID_ONLY else build_pair
    return build(att.scene, att.cam_a, att.cam_b, att.frames, pc)


def _try(args):
    cfg, key, split, bin_ = args
    try:
        att = draw_attempt(cfg, key, split, bin_)
        pair = render_attempt(cfg, att, split)
    except (NoQualifyingPair, NoValidPose, EmptyOverlap, EmptyCloud) as exc:
        return key, None, str(exc)
    floor = cfg.min_visible_static_lo if bin_ is OverlapBin.LO else cfg.min_visible_static
    if pair.meta.get("visible_static", 0) < floor:
        return key, None, "too few static objects in view"
    if pair.split is not split or pair.overlap_bin is None or (bin_ is not None and pair.overlap_bin is not bin_):
        return key, None, f"landed in ({pair.split}, {pair.overlap_bin})"
    return key, (att, pair), None


def quotas(cfg: DatasetConfig) -> list[tuple[Split, OverlapBin | None, int]]:
    """Split ``n_pairs`` over the requested cells; earlier cells take the remainder."""
    cells = [(Split(s), None if b is None else OverlapBin(b)) for s in cfg.splits for b in cfg.overlap_bins]
    base, extra = divmod(cfg.n_pairs, len(cells))
    return [(s, b, base + (k < extra)) for k, (s, b) in enumerate(cells)]


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


def generate_pairs(cfg: DatasetConfig, workers: int | None = None) -> list[tuple[Attempt, ScenePair]]:
    """Rejection-sample every quota cell in order.

    Attempts for cell ``c`` use rng keys ``(seed, c, j)`` for j = 0, 1, ...;
    results are consumed in key order, so the outcome does not depend on the
    number of workers.
    """
    if cfg.n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    workers = resolve_workers(workers)
    out: list[tuple[Attempt, ScenePair]] = []
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for c, (split, bin_, need) in enumerate(quotas(cfg)):
            got, j = 0, 0
            budget = cfg.attempts_per_pair * need
            while got < need:
                if j >= budget:
                    raise QuotaUnreachable(
                        f"cell ({split.value}, {bin_.value if bin_ else 'any'}) has {got}/{need} pairs "
                        f"after {budget} attempts"
                    )
                batch = [(cfg, (cfg.seed, c, k), split, bin_) for k in range(j, min(j + max(workers, 1), budget))]
                j += len(batch)
                results = pool.map(_try, batch) if pool else map(_try, batch)
                for key, res, why in results:
                    if res is None:
                        log.debug("attempt %s rejected: %s", key, why)
                    elif got < need:
                        out.append(res)
                        got += 1
    finally:
        if pool:
            pool.shutdown()
    return out


def generate_dataset(cfg: DatasetConfig, out_dir, workers: int | None = None) -> list[PairRecord]:
    """Generate, write clouds, ground truth and the manifest; returns the records."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, (att, pair) in enumerate(generate_pairs(cfg, workers)):
        stem = f"pair_{i:04d}"
        write_ply(out_dir / f"{stem}_src.ply", pair.source)
        write_ply(out_dir / f"{stem}_tgt.ply", pair.target)
        pair.gt_correspondences.save(out_dir / f"{stem}_gt.txt")
        records.append(
            PairRecord(
                i, f"{stem}_src.ply", f"{stem}_tgt.ply", f"{stem}_gt.txt", pair.gt_transform.as_matrix(),
                pair.overlap_ratio, pair.nonrigid_proportion, pair.split.value, pair.overlap_bin.value,
                att.key, att.frames, att.cam_a.pose.as_matrix(), att.cam_b.pose.as_matrix(),
                att.scene.follow_yaw_deg_per_frame, int(pair.meta.get("visible_static", 0)),
            )
        )
    header = {
        "seed": cfg.seed,
        "pairs": len(records),
        "splits": " ".join(Split(s).value for s in cfg.splits),
        "overlap_bins": " ".join("any" if b is None else OverlapBin(b).value for b in cfg.overlap_bins),
    }
    write_manifest(out_dir / MANIFEST, records, header)
    return records


def rebuild_attempt(cfg: DatasetConfig, record: PairRecord) -> Attempt:
    """Re-draw the scene and cameras behind a manifest record."""
    split = Split(record.split)
    cells = quotas(cfg)
    bin_ = cells[record.seed[1]][1] if record.seed[1] < len(cells) else None
    att = draw_attempt(cfg, record.seed, split, bin_)
    if not np.array_equal(att.cam_a.pose.as_matrix(), record.camera_source):
        raise HybridRegError("record does not match this configuration")
    return att
