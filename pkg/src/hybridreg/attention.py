"""Superpoint descriptors, geometric structure embedding, attention and the mask head."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .errors import EmptyPatch, FormatError, ShapeMismatch, TooFewPoints
from .geom import PointCloud, SuperpointGraph, voxel_downsample

D_T = 32
HIDDEN = 64


@dataclass
class DescriptorSet:
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeMismatch("descriptor matrix must be 2-D")

    def __len__(self):
        return len(self.features)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def normalized(self) -> DescriptorSet:
        f = self.features
        return DescriptorSet(f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12))


@dataclass
class UncertaintyMask:
    sigma_sq_source: np.ndarray
    sigma_sq_target: np.ndarray


# --- descriptor providers -------------------------------------------------


def toy_descriptors(graph: SuperpointGraph, cloud: PointCloud | np.ndarray, d: int = D_T, k: int = 4) -> DescriptorSet:
    """Hand-crafted per-superpoint features, zero-padded to width ``d``.

    Channels: covariance eigenvalues as fractions of their sum (ascending),
    patch thickness along its normal relative to the patch radius, log patch
    size, and mean distance to the ``k`` nearest superpoints.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(graph)
    if d < 6:
        raise ShapeMismatch("descriptor width must be at least 6")
    out = np.zeros((n, d))
    for i, patch in enumerate(graph.patches):
        if len(patch) == 0:
            raise EmptyPatch(f"superpoint {i} has an empty patch")
        p = pts[patch] - pts[patch].mean(axis=0)
        w, v = np.linalg.eigh(p.T @ p / len(patch))
        w = np.maximum(w, 0.0)
        tot = w.sum()
        out[i, 0:3] = w / tot if tot > 0 else 0.0
        along = p @ v[:, 0]
        radius = np.sqrt(np.max(np.sum(p * p, axis=1))) if len(patch) > 1 else 0.0
        out[i, 3] = (along.max() - along.min()) / radius if radius > 0 else 0.0
        out[i, 4] = np.log1p(len(patch))
    if n > 1:
        kk = min(k, n - 1)
        dist, _ = cKDTree(graph.superpoints).query(graph.superpoints, k=kk + 1)
        out[:, 5] = np.asarray(dist).reshape(n, -1)[:, 1:].mean(axis=1)
    return DescriptorSet(out)


def estimate_normals(points: np.ndarray, k: int = 12, viewpoint=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Per-point PCA normals oriented toward ``viewpoint``."""
    k = min(k, len(points))
    _, nn = cKDTree(points).query(points, k=k)
    nn = np.asarray(nn).reshape(len(points), k)
    q = points[nn] - points[nn].mean(axis=1, keepdims=True)
    _, v = np.linalg.eigh(np.einsum("nki,nkj->nij", q, q))
    nrm = v[:, :, 0]
    flip = np.einsum("ij,ij->i", nrm, points - np.asarray(viewpoint)) > 0
    nrm[flip] *= -1
    return nrm


def _ball_pairs(centers, points, radius):
    """(center index, point index) for every point within ``radius`` of a center."""
    if not len(centers) or not len(points):
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    m = cKDTree(centers).sparse_distance_matrix(cKDTree(points), radius, output_type="ndarray")
    return m["i"].astype(np.int64), m["j"].astype(np.int64)


def _cross(a, b):
    return np.stack(
        [
            a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1],
            a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2],
            a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0],
        ],
        axis=1,
    )


def superpoint_normals(centers, points, radius, viewpoint=(0.0, 0.0, 0.0)) -> np.ndarray:
    rows, cols = _ball_pairs(centers, points, radius)
    n = len(centers)
    cnt = np.maximum(np.bincount(rows, minlength=n), 1).astype(np.float64)
    p = points[cols]
    mean = np.stack([np.bincount(rows, p[:, a], minlength=n) for a in range(3)], axis=1) / cnt[:, None]
    outer = np.einsum("ni,nj->nij", p, p).reshape(-1, 9)
    second = np.stack([np.bincount(rows, outer[:, a], minlength=n) for a in range(9)], axis=1).reshape(n, 3, 3)
    cov = second / cnt[:, None, None] - np.einsum("ni,nj->nij", mean, mean)
    _, v = np.linalg.eigh(cov)
    nrm = v[:, :, 0]
    flip = np.einsum("ij,ij->i", nrm, centers - np.asarray(viewpoint)) > 0
    nrm[flip] *= -1
    return nrm


def pair_feature_histograms(centers, center_normals, points, point_normals, radius, shells=3, bins=5) -> np.ndarray:
    """Darboux-frame angle histograms per radial shell, square-rooted and L2-normalized.

    For every point within ``radius`` of a center, the three angles between
    the center normal, the connecting direction and the point normal are
    binned. Output width is 3 * shells * bins.
    """
    n = len(centers)
    rows, cols = _ball_pairs(centers, points, radius)
    diff = points[cols] - centers[rows]
    dist = np.linalg.norm(diff, axis=1)
    u = center_normals[rows]
    dn = diff / np.maximum(dist, 1e-12)[:, None]
    v = _cross(u, dn)
    v /= np.maximum(np.linalg.norm(v, axis=1), 1e-12)[:, None]
    w = _cross(u, v)
    n2 = point_normals[cols]
    ok = dist > 1e-9
    feats = (
        (np.einsum("ij,ij->i", v, n2), -1.0, 1.0),
        (np.einsum("ij,ij->i", u, dn), -1.0, 1.0),
        (np.arctan2(np.einsum("ij,ij->i", w, n2), np.einsum("ij,ij->i", u, n2)), -np.pi, np.pi),
    )
    shell = np.minimum((dist / radius * shells).astype(np.int64), shells - 1)
    hists = []
    for val, lo, hi in feats:
        b = np.clip(((val - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1)
        key = (rows * shells + shell) * bins + b
        h = np.bincount(key[ok], minlength=n * shells * bins).reshape(n, shells * bins).astype(np.float64)
        hists.append(h / np.maximum(h.sum(axis=1, keepdims=True), 1.0))
    h = np.sqrt(np.concatenate(hists, axis=1))
    return h / np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)


def pair_feature_descriptors(
    graph: SuperpointGraph,
    cloud: PointCloud | np.ndarray,
    radius: float = 1.2,
    shells: int = 3,
    bins: int = 5,
    fine_voxel: float = 0.06,
    normal_radius: float = 0.3,
    viewpoint=(0.0, 0.0, 0.0),
) -> DescriptorSet:
    """Point-pair-feature histograms around each superpoint over a thinned copy of the cloud."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if fine_voxel > 0:
        pts = voxel_downsample(pts, fine_voxel).superpoints
    sp = graph.superpoints
    n_sp = superpoint_normals(sp, pts, max(normal_radius, 1e-6), viewpoint)
    n_pt = estimate_normals(pts, viewpoint=viewpoint)
    return DescriptorSet(pair_feature_histograms(sp, n_sp, pts, n_pt, radius, shells, bins))


def load_descriptors(path, n_rows: int | None = None) -> DescriptorSet:
    """Externally computed descriptors, one whitespace-separated row per superpoint."""
    try:
        f = np.loadtxt(path, ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if n_rows is not None and len(f) != n_rows:
        raise ShapeMismatch(f"{path}: {len(f)} rows for {n_rows} superpoints")
    return DescriptorSet(f)


# --- geometric structure embedding ---------------------------------------


def sinusoid(x: np.ndarray, channels: int, dtype=np.float64) -> np.ndarray:
    """Interleaved sin/cos of ``x`` at geometric frequencies 10000^(-2k/channels).

    ``dtype`` sets the precision the trig runs at; the result is float64.
    """
    if channels % 2:
        raise ShapeMismatch("sinusoidal encoding needs an even channel count")
    freq = np.power(10000.0, -np.arange(0, channels, 2) / channels)
    ang = (np.asarray(x, dtype=np.float64)[..., None] * freq).astype(dtype)
    out = np.empty(np.shape(x) + (channels,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def geometric_embedding(
    superpoints: np.ndarray,
    d_t: int = D_T,
    sigma_d: float = 0.2,
    sigma_a_deg: float = 15.0,
    k_angle: int = 3,
    precision=np.float64,
) -> np.ndarray:
    """(n, n, d_t) pairwise encoding: distance channels then max-pooled angle channels.

    Angles are measured at point i between the direction to each of its
    ``k_angle`` nearest neighbors and the direction to point j. ``precision``
    sets the dtype of the trig; single precision is enough for a constant
    input that is never differentiated, and roughly halves the cost.
    """
    p = np.asarray(superpoints, dtype=np.float64)
    n = len(p)
    if n < k_angle + 1:
        raise TooFewPoints(f"need at least {k_angle + 1} superpoints, got {n}")
    half = d_t // 2
    diff = p[None, :, :] - p[:, None, :]  # diff[i, j] = p_j - p_i
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    dist_enc = sinusoid(dist / sigma_d, half, precision)
    ranked = dist + np.diag(np.full(n, np.inf))
    nbr = np.argsort(ranked, axis=1, kind="stable")[:, :k_angle]
    angle_enc = None
    for c in range(k_angle):
        a = diff[np.arange(n), nbr[:, c]]  # (n, 3) anchor directions
        cross = _cross(np.repeat(a, n, axis=0), diff.reshape(-1, 3))
        ang = np.arctan2(np.linalg.norm(cross, axis=1).reshape(n, n), np.einsum("ik,ijk->ij", a, diff))
        enc = sinusoid(ang / np.radians(sigma_a_deg), d_t - half, precision)
        angle_enc = enc if angle_enc is None else np.maximum(angle_enc, enc)
    return np.concatenate([dist_enc, angle_enc], axis=2)


# --- parameters ------------------------------------------------------------

_MAGIC = b"HRPARAMS"
_VERSION = 1


class ParameterSet(dict):
    """Ordered name -> float64 array mapping."""

    def copy(self) -> ParameterSet:
        return ParameterSet({k: v.copy() for k, v in self.items()})

    def save(self, path) -> None:
        head = [_MAGIC, struct.pack("<II", _VERSION, len(self))]
        for name, arr in self.items():
            raw = name.encode("utf-8")
            head.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.values())
        Path(path).write_bytes(b"".join(head) + payload)

    @classmethod
    def load(cls, path) -> ParameterSet:
        buf = Path(path).read_bytes()
        if buf[:8] != _MAGIC:
            raise FormatError(f"{path}: bad parameter file magic")
        try:
            version, count = struct.unpack_from("<II", buf, 8)
            if version != _VERSION:
                raise FormatError(f"{path}: unsupported version {version}")
            off = 16
            table = []
            for _ in range(count):
                (ln,) = struct.unpack_from("<H", buf, off)
                name = buf[off + 2 : off + 2 + ln].decode("utf-8")
                off += 2 + ln
                (ndim,) = struct.unpack_from("<B", buf, off)
                shape = struct.unpack_from(f"<{ndim}I", buf, off + 1)
                off += 1 + 4 * ndim
                table.append((name, shape))
            out = cls()
            for name, shape in table:
                size = int(np.prod(shape))
                out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
                off += 8 * size
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise FormatError(f"{path}: truncated parameter file ({exc})") from None
        if off != len(buf):
            raise FormatError(f"{path}: trailing bytes in parameter file")
        return out


def init_params(
    rng: np.random.Generator, d: int, d_t: int = D_T, hidden: int = HIDDEN, blocks: int = 1, value_scale: float = 1e-3
) -> ParameterSet:
    """Random attention weights plus a mask head and the point-matching dustbin score.

    Value projections start near zero so the residual blocks begin close to
    the identity on the input descriptors.
    """
    p = ParameterSet()
    for b in range(blocks):
        for kind in ("self", "cross"):
            p[f"block{b}.{kind}.wq"] = rng.normal(scale=1 / np.sqrt(d), size=(d, d_t))
            p[f"block{b}.{kind}.wk"] = rng.normal(scale=1 / np.sqrt(d), size=(d, d_t))
            if kind == "self":
                p[f"block{b}.self.wr"] = rng.normal(scale=1 / np.sqrt(d_t), size=(d_t, d_t))
            p[f"block{b}.{kind}.wv"] = rng.normal(scale=value_scale / np.sqrt(d), size=(d, d))
    p["head.w1"] = rng.normal(scale=1 / np.sqrt(d), size=(d, hidden))
    p["head.b1"] = np.zeros(hidden)
    p["head.w2"] = rng.normal(scale=1 / np.sqrt(hidden), size=(hidden, 1))
    p["head.b2"] = np.zeros(1)
    p["dustbin"] = np.array(1.0)
    return p


def n_blocks(params) -> int:
    return len({k.split(".")[0] for k in params if k.startswith("block")})


# --- attention --------------------------------------------------------------


def self_attention(x, emb, wq, wk, wr, wv):
    """Softmax_j((x_i Wq) . (x_j Wk + r_ij Wr) / sqrt(d_t)) weighted sum of x_j Wv."""
    x, emb = ad.as_tensor(x), ad.as_tensor(emb)
    wq, wk, wr, wv = (ad.as_tensor(w) for w in (wq, wk, wr, wv))
    d_t = wq.shape[1]
    if emb.ndim != 3 or emb.shape[:2] != (x.shape[0], x.shape[0]) or emb.shape[2] != wr.shape[0]:
        raise ShapeMismatch(f"embedding {emb.shape} does not fit {x.shape[0]} points and d_t={wr.shape[0]}")
    if wr.shape[1] != d_t:
        raise ShapeMismatch("geometric projection must map d_t to d_t")
    q = x @ wq
    k = x @ wk
    scores = (q @ k.T + ad.pair_dot(q @ wr.T, emb)) * (1.0 / np.sqrt(d_t))
    return ad.softmax_rows(scores) @ (x @ wv)


def cross_attention(p, q, wq, wk, wv):
    """Rows of ``p`` attend over rows of ``q``."""
    p, q = ad.as_tensor(p), ad.as_tensor(q)
    wq, wk, wv = ad.as_tensor(wq), ad.as_tensor(wk), ad.as_tensor(wv)
    d_t = wq.shape[1]
    scores = ((p @ wq) @ (q @ wk).T) * (1.0 / np.sqrt(d_t))
    return ad.softmax_rows(scores) @ (q @ wv)


def attention_weights(p, q, wq, wk) -> np.ndarray:
    d_t = wq.shape[1]
    s = (p @ wq) @ (q @ wk).T / np.sqrt(d_t)
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def transformer(xp, xq, emb_p, emb_q, params):
    """Residual self- then cross-attention blocks; returns (G_P, G_Q) before normalization."""
    hp, hq = ad.as_tensor(xp), ad.as_tensor(xq)
    for b in range(n_blocks(params)):
        s = lambda name: params[f"block{b}.self.{name}"]  # noqa: E731
        c = lambda name: params[f"block{b}.cross.{name}"]  # noqa: E731
        hp = hp + self_attention(hp, emb_p, s("wq"), s("wk"), s("wr"), s("wv"))
        hq = hq + self_attention(hq, emb_q, s("wq"), s("wk"), s("wr"), s("wv"))
        gp = hp + cross_attention(hp, hq, c("wq"), c("wk"), c("wv"))
        gq = hq + cross_attention(hq, hp, c("wq"), c("wk"), c("wv"))
        hp, hq = gp, gq
    return hp, hq


def mask_head(g, w1, b1, w2, b2):
    """sigmoid(relu(g W1 + b1) W2 + b2) as an (n, 1) tensor."""
    g = ad.as_tensor(g)
    w1 = ad.as_tensor(w1)
    if g.shape[1] != w1.shape[0]:
        raise ShapeMismatch(f"head expects width {w1.shape[0]}, got {g.shape[1]}")
    hidden = ad.relu(g @ w1 + ad.as_tensor(b1))
    return ad.sigmoid(hidden @ ad.as_tensor(w2) + ad.as_tensor(b2))


def predict_uncertainty(gp, gq, params) -> UncertaintyMask:
    """Per-superpoint sigma^2 for both clouds with one shared head."""
    h = [params[k] for k in ("head.w1", "head.b1", "head.w2", "head.b2")]
    sp = mask_head(gp, *h).data[:, 0]
    sq = mask_head(gq, *h).data[:, 0]
    return UncertaintyMask(sp, sq)
