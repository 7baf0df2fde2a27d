"""Rigid transforms, point clouds, superpoint graphs and neighbor queries.

Rotations are stored as explicit 3x3 matrices. All arrays are float64.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration, EmptyCloud, FormatError, KTooLarge

# middle covariance eigenvalue below this means the points are (nearly) collinear
COLLINEAR_EIG = 1e-12


class MotionLabel(enum.IntEnum):
    BACKGROUND = 0
    RIGID_FOREGROUND = 1
    NONRIGID_FOREGROUND = 2


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, p) -> np.ndarray:
        """Transform a single 3-vector or an (N, 3) array."""
        p = np.asarray(p, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.all(np.abs(r.T @ r - np.eye(3)) <= tol)
            and abs(np.linalg.det(r) - 1.0) <= tol
            and np.all(np.isfinite(self.translation))
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def apply(t: RigidTransform, p) -> np.ndarray:
    return t.apply(p)


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def axis_angle(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def rot_z(deg: float) -> np.ndarray:
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_transform(rng: np.random.Generator, scale: float = 1.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.normal(scale=scale, size=3))


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray = None
    source_pixel: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.labels is None:
            self.labels = np.zeros(len(self.points), dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if len(self.labels) != len(self.points):
            raise ValueError("labels length must equal points length")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.source_pixel is not None:
            self.source_pixel = np.asarray(self.source_pixel, dtype=np.int64).reshape(-1, 2)

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> PointCloud:
        pix = None if self.source_pixel is None else self.source_pixel[idx]
        return PointCloud(self.points[idx], self.labels[idx], pix)

    def transformed(self, t: RigidTransform) -> PointCloud:
        return PointCloud(t.apply(self.points), self.labels.copy(), self.source_pixel)


@dataclass
class SuperpointGraph:
    superpoints: np.ndarray
    assignment: np.ndarray
    patches: list[np.ndarray] = field(repr=False)

    def __len__(self):
        return len(self.superpoints)


def weighted_kabsch(src, tgt, weights=None) -> RigidTransform:
    """Least-squares rigid transform minimizing sum_i w_i |R src_i + t - tgt_i|^2."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(tgt, dtype=np.float64).reshape(-1, 3)
    if src.shape != tgt.shape:
        raise ValueError("src and tgt must have the same shape")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    keep = w > 0
    if keep.sum() < 3 or w.sum() <= 0:
        raise DegenerateConfiguration("need at least 3 points with positive weight")
    src, tgt, w = src[keep], tgt[keep], w[keep]
    w = w / w.sum()
    cs = w @ src
    ct = w @ tgt
    a = src - cs
    b = tgt - ct
    cov = (a * w[:, None]).T @ a
    if np.linalg.eigvalsh(cov)[1] < COLLINEAR_EIG:
        raise DegenerateConfiguration("points are collinear or coincident")
    h = (a * w[:, None]).T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, ct - r @ cs)


def _nearest_index(tree: cKDTree, queries: np.ndarray) -> np.ndarray:
    """Nearest neighbor with exact ties broken by lower index."""
    k = min(4, tree.n)
    d, idx = tree.query(queries, k=k)
    if k == 1:
        return np.asarray(idx).reshape(-1)
    d = d.reshape(len(queries), k)
    idx = idx.reshape(len(queries), k)
    tied = d == d[:, :1]
    masked = np.where(tied, idx, np.iinfo(np.int64).max)
    return masked.min(axis=1)


def voxel_downsample(cloud: PointCloud | np.ndarray, voxel: float) -> SuperpointGraph:
    """Superpoints at occupied-voxel centroids; each point joins its nearest superpoint."""
    if voxel <= 0:
        raise ValueError("voxel must be positive")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise EmptyCloud("cannot downsample an empty cloud")
    keys = np.floor(pts / voxel).astype(np.int64)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv)
    centroids = np.stack([np.bincount(inv, weights=pts[:, c]) for c in range(3)], axis=1)
    centroids /= counts[:, None]
    while True:
        assign = _nearest_index(cKDTree(centroids), pts)
        used = np.bincount(assign, minlength=len(centroids)) > 0
        if used.all():
            break
        centroids = centroids[used]
    order = np.argsort(assign, kind="stable")
    bounds = np.searchsorted(assign[order], np.arange(len(centroids) + 1))
    patches = [order[bounds[i] : bounds[i + 1]] for i in range(len(centroids))]
    return SuperpointGraph(centroids, assign, patches)


def knn(query, cloud, k: int) -> np.ndarray:
    """Exact k nearest neighbors, ascending distance, ties by lower index."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    query = np.asarray(query, dtype=np.float64).reshape(3)
    if k > len(cloud):
        raise KTooLarge(f"k={k} exceeds cloud size {len(cloud)}")
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    tree = cKDTree(cloud)
    d, _ = tree.query(query, k=k)
    radius = float(np.max(np.atleast_1d(d)))
    # pull every point tied with the k-th distance, then order deterministically
    cand = np.array(tree.query_ball_point(query, radius * (1 + 1e-12) + 1e-300), dtype=np.int64)
    dist = np.linalg.norm(cloud[cand] - query, axis=1)
    order = np.lexsort((cand, dist))
    return cand[order][:k]


def knn_batch(queries, cloud, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized exact kNN for many queries (distance ties in arbitrary order)."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if k > len(cloud):
        raise KTooLarge(f"k={k} exceeds cloud size {len(cloud)}")
    d, idx = cKDTree(cloud).query(np.asarray(queries, dtype=np.float64), k=k)
    return np.asarray(d).reshape(-1, k), np.asarray(idx).reshape(-1, k)


def rmse_between(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


# --- PLY -----------------------------------------------------------------

_PLY_TYPES = {
    "double": float, "float64": float, "float": float, "float32": float,
    "uchar": int, "uint8": int, "int": int, "int32": int, "uint": int, "short": int,
    "ushort": int, "char": int,
}


def write_ply(path, cloud: PointCloud, comments: list[str] | None = None) -> None:
    lines = ["ply", "format ascii 1.0"]
    lines += [f"comment {c}" for c in comments or []]
    lines += [
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar motion_label",
        "end_header",
    ]
    body = [
        f"{x:.17g} {y:.17g} {z:.17g} {int(l)}"
        for (x, y, z), l in zip(cloud.points.tolist(), cloud.labels.tolist())
    ]
    Path(path).write_text("\n".join(lines + body) + "\n")


def read_ply(path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n = None
    props: list[str] = []
    in_vertex = False
    for i, line in enumerate(text):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise FormatError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unsupported property type {tok[1]}")
            props.append(tok[-1])
        elif tok[0] == "end_header":
            start = i + 1
            break
    else:
        raise FormatError(f"{path}: missing end_header")
    if n is None or not {"x", "y", "z"} <= set(props):
        raise FormatError(f"{path}: vertex element needs x, y, z")
    if n == 0:
        return PointCloud(np.zeros((0, 3)))
    data = np.loadtxt(text[start : start + n], dtype=np.float64, ndmin=2)
    if data.shape != (n, len(props)):
        raise FormatError(f"{path}: expected {n} rows of {len(props)} values")
    col = {p: j for j, p in enumerate(props)}
    pts = data[:, [col["x"], col["y"], col["z"]]]
    labels = data[:, col["motion_label"]].astype(np.uint8) if "motion_label" in col else None
    return PointCloud(pts, labels)
