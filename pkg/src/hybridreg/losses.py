"""Training losses for the uncertainty head and a two-stage toy training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import attention as att
from . import autodiff as ad
from .errors import DivergedLoss, EmptyBatch, NonFinite, NonPositiveVariance, ShapeMismatch, ZeroProbabilityEntry
from .geom import MotionLabel, RigidTransform
from .matching import correlation_tensor, point_matching_tensor
from .pipeline import MASK_EPS, CloudFeatures, PipelineConfig, oracle_sigma, prepare_cloud

log = logging.getLogger(__name__)

LOG2 = float(np.log(2.0))
SQRT2 = float(np.sqrt(2.0))
_OFF = -1e9  # added to logits of entries outside a set so they vanish from a log-sum-exp


def laplace_nll(c: float, mu: float, sigma_sq: float) -> float:
    """Negative log density of ``c`` under a Laplace with mean ``mu`` and variance ``sigma_sq``."""
    if not sigma_sq > 0:
        raise NonPositiveVariance(f"variance must be positive, got {sigma_sq}")
    return 0.5 * np.log(2.0 * sigma_sq) + np.sqrt(2.0 / sigma_sq) * abs(c - mu)


def _column(x, name):
    x = ad.as_tensor(x)
    if x.ndim == 1:
        x = ad.reshape(x, (x.shape[0], 1))
    if x.ndim != 2 or x.shape[1] != 1:
        raise ShapeMismatch(f"{name} must be a vector, got {x.shape}")
    return x


def uncertainty_mask_loss(c, mu, sigma_p, sigma_q, lambda_reg: float = 0.01, nll_sum: bool = False):
    """Mask loss over every (i, j) pair.

    ``alpha_ij = log(sigma_p[i] * sigma_q[j])`` and each pair contributes the
    exponent ``-log 2 - alpha - sqrt(2) exp(-alpha / 2) |c - mu|``. The default
    reduces the exponents with a negated log-sum-exp; ``nll_sum`` instead sums
    the negated exponents (one NLL per pair). A ``lambda_reg * mean(1 - sigma_p
    sigma_q)`` term is added in both cases.
    """
    c = np.asarray(c, dtype=np.float64)
    mu = ad.as_tensor(mu)
    sp, sq = _column(sigma_p, "sigma_p"), _column(sigma_q, "sigma_q")
    if c.shape != mu.shape or c.shape != (sp.shape[0], sq.shape[0]):
        raise ShapeMismatch(f"labels {c.shape}, mu {mu.shape}, masks {sp.shape[0]}x{sq.shape[0]}")
    alpha = ad.log(sp) + ad.transpose(ad.log(sq))
    expo = -LOG2 - alpha - SQRT2 * ad.exp(alpha * -0.5) * ad.abs(mu - c)
    if nll_sum:
        loss = ad.sum(-expo)
    else:
        loss = -ad.logsumexp(expo)
    reg = ad.mean(1.0 - sp * ad.transpose(sq))
    out = loss + lambda_reg * reg
    if not np.isfinite(out.data):
        raise NonFinite("mask loss is not finite")
    return out


def overlap_circle_loss(
    dist,
    pos_mask,
    neg_mask,
    overlaps,
    pos_margin: float = 0.1,
    neg_margin: float = 0.4,
    gamma: float = 10.0,
    clamp_weights: bool = False,
):
    """Overlap-weighted circle loss over the rows of ``dist`` that have a positive.

    Per anchor row: ``log(1 + sum_pos exp(l * bp * (d - dp)) * sum_neg exp(bn * (dn - d)))``
    with ``l = sqrt(overlap)``, ``bp = gamma (d - dp)`` and ``bn = gamma (dn - d)``.
    ``clamp_weights`` floors both weights at zero. No anchors gives 0.
    """
    dist = ad.as_tensor(dist)
    pos = np.asarray(pos_mask, dtype=bool)
    neg = np.asarray(neg_mask, dtype=bool)
    ov = np.asarray(overlaps, dtype=np.float64)
    if not (pos.shape == neg.shape == ov.shape == dist.shape):
        raise ShapeMismatch("distances, masks and overlaps must share a shape")
    anchors = np.nonzero(pos.any(axis=1))[0]
    if not len(anchors):
        return ad.as_tensor(0.0) + 0.0 * ad.sum(dist)
    d = ad.take(dist, anchors)
    pos, neg, ov = pos[anchors], neg[anchors], ov[anchors]
    wp = gamma * (d - pos_margin)
    wn = gamma * (neg_margin - d)
    if clamp_weights:
        wp, wn = ad.relu(wp), ad.relu(wn)
    lam = np.sqrt(np.clip(ov, 0.0, 1.0))
    lp = lam * wp * (d - pos_margin) + np.where(pos, 0.0, _OFF)
    ln = wn * (neg_margin - d) + np.where(neg, 0.0, _OFF)
    inner = ad.logsumexp(lp, axis=1, keepdims=True) + ad.logsumexp(ln, axis=1, keepdims=True)
    # log(1 + e^x) as a two-term log-sum-exp
    per_anchor = ad.logsumexp(ad.concat([np.zeros((len(anchors), 1)), inner], axis=1), axis=1)
    return ad.mean(per_anchor)


def overlap_circle_loss_both(dist, pos_mask, neg_mask, overlaps, **kw):
    """Average of the loss anchored on the source and on the target side."""
    dist = ad.as_tensor(dist)
    pos, neg, ov = (np.asarray(a) for a in (pos_mask, neg_mask, overlaps))
    a = overlap_circle_loss(dist, pos, neg, ov, **kw)
    b = overlap_circle_loss(ad.transpose(dist), pos.T, neg.T, ov.T, **kw)
    return (a + b) * 0.5


def _required(matches, unmatched_src, unmatched_tgt, shape):
    n, m = shape[0] - 1, shape[1] - 1
    matches = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    us = np.asarray(unmatched_src, dtype=np.int64).reshape(-1)
    ut = np.asarray(unmatched_tgt, dtype=np.int64).reshape(-1)
    rows = np.concatenate([matches[:, 0], us, np.full(len(ut), n)])
    cols = np.concatenate([matches[:, 1], np.full(len(us), m), ut])
    if len(rows) and (rows.max() > n or cols.max() > m or rows.min() < 0 or cols.min() < 0):
        raise ShapeMismatch("index outside the assignment matrix")
    return rows, cols


def point_matching_loss(z, matches, unmatched_src, unmatched_tgt, clamp: float | None = 1e-12):
    """NLL of the required assignment entries (matches and both dustbins) for one patch.

    ``z`` holds probabilities, a Tensor or an array, dustbins last. Entries are
    floored at ``clamp`` before the log; with ``clamp=None`` a zero entry raises.
    """
    z = ad.as_tensor(z.z_bar if hasattr(z, "z_bar") else z)
    rows, cols = _required(matches, unmatched_src, unmatched_tgt, z.shape)
    picked = ad.take(z, (rows, cols))
    if clamp is None:
        if np.any(picked.data <= 0):
            raise ZeroProbabilityEntry("a required assignment entry is zero")
    else:
        picked = ad.maximum(picked, clamp)
    return -ad.sum(ad.log(picked))


def point_matching_loss_log(log_z, matches, unmatched_src, unmatched_tgt, clamp: float = 1e-12):
    """Same loss from log-probabilities, which keeps tiny entries differentiable."""
    log_z = ad.as_tensor(log_z)
    rows, cols = _required(matches, unmatched_src, unmatched_tgt, log_z.shape)
    return -ad.sum(ad.maximum(ad.take(log_z, (rows, cols)), float(np.log(clamp))))


def batch_point_matching_loss(per_patch: list):
    if not per_patch:
        raise EmptyBatch("no patches to average")
    total = per_patch[0]
    for t in per_patch[1:]:
        total = total + t
    return total * (1.0 / len(per_patch))


# --- optimizer --------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - b1**self.step_count)
            vh = v / (1 - b2**self.step_count)
            params[k] = params[k] - self.lr * mh / (np.sqrt(vh) + self.eps)


# --- ground truth for a pair --------------------------------------------------


@dataclass
class PatchLabels:
    c: np.ndarray  # (n, m) 0/1
    overlap: np.ndarray  # (n, m) patch overlap under the ground-truth transform
    nonrigid_src: np.ndarray  # bool per source superpoint
    nonrigid_tgt: np.ndarray


def _fine_background(f: CloudFeatures) -> np.ndarray:
    return f.cloud.labels[f.fine_rep] == MotionLabel.BACKGROUND


def _owner(f: CloudFeatures) -> np.ndarray:
    own = np.empty(len(f.fine_points), dtype=np.int64)
    for i, idx in enumerate(f.fine_patch):
        own[idx] = i
    return own


def correspondence_labels(
    fp: CloudFeatures, fq: CloudFeatures, gt: RigidTransform, tau: float = 0.05, min_overlap: float = 0.1
) -> PatchLabels:
    """Superpoint pairs whose background patches overlap under ``gt``.

    A fine background point counts toward (i, j) when its nearest background
    neighbour on the other side lies within ``tau`` and belongs to patch j.
    The overlap is the mean of the two directed fractions. Rows and columns of
    superpoints that are mostly moving are zeroed.
    """
    n, m = len(fp.graph), len(fq.graph)
    bp, bq = _fine_background(fp), _fine_background(fq)
    own_p, own_q = _owner(fp), _owner(fq)
    xp = gt.apply(fp.fine_points)
    xq = fq.fine_points
    cnt_pq = np.zeros((n, m))
    cnt_qp = np.zeros((m, n))
    ip, iq = np.nonzero(bp)[0], np.nonzero(bq)[0]
    if len(ip) and len(iq):
        d, nn = cKDTree(xq[iq]).query(xp[ip], distance_upper_bound=tau)
        ok = np.isfinite(d)
        np.add.at(cnt_pq, (own_p[ip[ok]], own_q[iq[nn[ok]]]), 1.0)
        d, nn = cKDTree(xp[ip]).query(xq[iq], distance_upper_bound=tau)
        ok = np.isfinite(d)
        np.add.at(cnt_qp, (own_q[iq[ok]], own_p[ip[nn[ok]]]), 1.0)
    size_p = np.array([max(len(i), 1) for i in fp.fine_patch], dtype=np.float64)
    size_q = np.array([max(len(j), 1) for j in fq.fine_patch], dtype=np.float64)
    ov = 0.5 * (cnt_pq / size_p[:, None] + cnt_qp.T / size_q[None, :])
    nr_p = oracle_sigma(fp.cloud, fp.graph) > 0.5
    nr_q = oracle_sigma(fq.cloud, fq.graph) > 0.5
    c = (ov >= min_overlap).astype(np.float64)
    c[nr_p, :] = 0.0
    c[:, nr_q] = 0.0
    return PatchLabels(c, ov, nr_p, nr_q)


def patch_point_matches(fp: CloudFeatures, fq: CloudFeatures, i: int, j: int, gt: RigidTransform, tau: float = 0.05):
    """Mutual-nearest background point pairs within ``tau`` plus the unmatched rows and columns."""
    pi, qj = fp.fine_patch[i], fq.fine_patch[j]
    bp, bq = _fine_background(fp)[pi], _fine_background(fq)[qj]
    xp, xq = gt.apply(fp.fine_points[pi]), fq.fine_points[qj]
    d = np.linalg.norm(xp[:, None, :] - xq[None, :, :], axis=2)
    d[~bp, :] = np.inf
    d[:, ~bq] = np.inf
    a = d.argmin(axis=1)
    b = d.argmin(axis=0)
    u = np.nonzero((b[a] == np.arange(len(pi))) & (d[np.arange(len(pi)), a] <= tau))[0]
    matches = np.stack([u, a[u]], axis=1) if len(u) else np.zeros((0, 2), dtype=np.int64)
    un_p = np.setdiff1d(np.arange(len(pi)), matches[:, 0])
    un_q = np.setdiff1d(np.arange(len(qj)), matches[:, 1])
    return matches, un_p, un_q


# --- training -------------------------------------------------------------------


@dataclass
class TrainConfig:
    stage1_epochs: int = 30
    stage2_epochs: int = 20
    lr: float = 1e-4
    seed: int = 0
    lambda_reg: float = 0.01
    nll_sum: bool = False
    n_sampled: int = 128  # ground-truth patch pairs per step for the point loss
    tau: float = 0.05
    min_overlap: float = 0.1
    gamma: float = 10.0
    pos_margin: float = 0.1
    neg_margin: float = 0.4
    train_backbone: bool = False
    balance_classes: bool = True  # stage 1 weighs moving and static superpoints equally
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)


@dataclass
class PreparedPair:
    fp: CloudFeatures
    fq: CloudFeatures
    gt: RigidTransform
    labels: PatchLabels
    oracle_p: np.ndarray
    oracle_q: np.ndarray
    positives: np.ndarray  # (k, 2) superpoint pairs with c = 1


def prepare_training_pair(pair, cfg: TrainConfig) -> PreparedPair:
    fp = prepare_cloud(pair.source, cfg.pipeline)
    fq = prepare_cloud(pair.target, cfg.pipeline)
    lab = correspondence_labels(fp, fq, pair.gt_transform, cfg.tau, cfg.min_overlap)
    return PreparedPair(
        fp, fq, pair.gt_transform, lab, oracle_sigma(fp.cloud, fp.graph), oracle_sigma(fq.cloud, fq.graph),
        np.argwhere(lab.c > 0),
    )


@dataclass
class TrainResult:
    params: att.ParameterSet
    curve: list[dict]  # one row per (stage, epoch)
    smoothed: list[dict]
    stage1_initial: float | None = None  # stage-1 objective before and after its epochs
    stage1_final: float | None = None
    plain_l1: tuple | None = None  # unweighted mean absolute gap, before and after

    def write_csv(self, path, smoothed: bool = False) -> None:
        cols = ["epoch", "stage", "L_um", "L_oc", "L_p", "total"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.smoothed if smoothed else self.curve:
                w.writerow([_cell(row.get(k)) for k in cols])


def _cell(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def _head(params):
    return [params[k] for k in ("head.w1", "head.b1", "head.w2", "head.b2")]


def _backbone(pp: PreparedPair, params):
    return att.transformer(pp.fp.descriptors.features, pp.fq.descriptors.features, pp.fp.embedding, pp.fq.embedding, params)


def _abs_gap(pred, target: np.ndarray, balance: bool):
    gap = ad.abs(pred - target[:, None])
    moving = target > 0.5
    if not balance or moving.all() or not moving.any():
        return ad.mean(gap)
    # moving and static superpoints each carry half the weight
    w = np.where(moving, 0.5 / moving.sum(), 0.5 / (~moving).sum())[:, None]
    return ad.sum(gap * w)


def stage1_loss(pp: PreparedPair, params, g=None, balance: bool = True):
    """Absolute gap between predicted sigma^2 and the moving-point fraction, averaged over both clouds.

    With ``balance`` the mostly-moving and the static superpoints of a cloud
    weigh equally; otherwise it is the plain mean.
    """
    gp, gq = g if g is not None else _backbone(pp, params)
    sp = att.mask_head(gp, *_head(params))
    sq = att.mask_head(gq, *_head(params))
    return (_abs_gap(sp, pp.oracle_p, balance) + _abs_gap(sq, pp.oracle_q, balance)) * 0.5


def stage2_losses(pp: PreparedPair, params, cfg: TrainConfig, rng: np.random.Generator, g=None):
    gp, gq = g if g is not None else _backbone(pp, params)
    hp, hq = ad.normalize_rows(gp), ad.normalize_rows(gq)
    s = correlation_tensor(hp, hq)
    sp = att.mask_head(gp, *_head(params))
    sq = att.mask_head(gq, *_head(params))
    l_um = uncertainty_mask_loss(pp.labels.c, s, sp, sq, cfg.lambda_reg, cfg.nll_sum)

    dist = ad.sqrt(ad.maximum(ad.l2_distance_matrix(hp, hq), 1e-12))
    pos = pp.labels.c > 0
    neg = pp.labels.overlap <= 0
    kw = dict(pos_margin=cfg.pos_margin, neg_margin=cfg.neg_margin, gamma=cfg.gamma)
    l_oc = overlap_circle_loss_both(dist, pos, neg, pp.labels.overlap, **kw)

    l_p = None
    if len(pp.positives):
        k = min(cfg.n_sampled, len(pp.positives))
        pick = pp.positives[np.sort(rng.choice(len(pp.positives), size=k, replace=False))]
        feat_p = pp.fp.point_features(pick[:, 0])
        feat_q = pp.fq.point_features(pick[:, 1])
        terms = []
        for i, j in pick:
            if not len(pp.fp.fine_patch[i]) or not len(pp.fq.fine_patch[j]):
                continue
            mt, up, uq = patch_point_matches(pp.fp, pp.fq, int(i), int(j), pp.gt, cfg.tau)
            log_z = point_matching_tensor(feat_p[int(i)], feat_q[int(j)], params["dustbin"], cfg.pipeline.point_scale)
            terms.append(point_matching_loss_log(log_z, mt, up, uq))
        if terms:
            l_p = batch_point_matching_loss(terms)
    return l_um, l_oc, l_p


def _check(value: float, stage: int, epoch: int, pair: int):
    if not np.isfinite(value):
        raise DivergedLoss(f"non-finite loss {value} at stage {stage}, epoch {epoch}, pair {pair}")


def _monotone(curve: list[dict]) -> list[dict]:
    """Running minimum of each loss column within a stage."""
    out, best = [], {}
    for row in curve:
        new = dict(row)
        for k in ("L_um", "L_oc", "L_p", "total"):
            v = row.get(k)
            if v is None:
                continue
            key = (row["stage"], k)
            best[key] = min(best.get(key, v), v)
            new[k] = best[key]
        out.append(new)
    return out


def train_toy(params: att.ParameterSet, pairs, config: TrainConfig | None = None, prepared=None) -> TrainResult:
    """Stage 1 fits the head to moving-point fractions with an L1 loss; stage 2
    fine-tunes on the sum of the mask, circle and point losses.

    The backbone stays fixed unless ``train_backbone`` is set, in which case
    stage 2 also updates the attention weights. Pair order is shuffled per
    epoch from ``seed``, so runs are bit-reproducible.
    """
    cfg = config or TrainConfig()
    if prepared is None:
        if not len(pairs):
            raise EmptyBatch("training needs at least one pair")
        prepared = [prepare_training_pair(p, cfg) for p in pairs]
    params = params.copy()
    curve: list[dict] = []
    head_keys = [k for k in params if k.startswith("head.")]
    fixed_g = [tuple(t.data for t in _backbone(pp, params)) for pp in prepared]

    def stage1_eval(balance=cfg.balance_classes):
        return float(np.mean([stage1_loss(pp, params, g, balance).item() for pp, g in zip(prepared, fixed_g)]))

    init1 = final1 = plain = None
    if cfg.stage1_epochs > 0:
        init1 = stage1_eval()
        plain0 = stage1_eval(False)
        curve.append({"epoch": 0, "stage": 1, "total": init1})
        opt = Adam(cfg.lr)
        for ep in range(1, cfg.stage1_epochs + 1):
            order = np.random.default_rng([cfg.seed, 1, ep]).permutation(len(prepared))
            for k in order:
                with ad.Tape() as tape:
                    leaves = {name: tape.leaf(params[name]) for name in head_keys}
                    local = dict(params, **leaves)
                    loss = stage1_loss(prepared[k], local, fixed_g[k], cfg.balance_classes)
                _check(loss.item(), 1, ep, int(k))
                grads = ad.backward(tape, loss)
                opt.step(params, {name: grads[t] for name, t in leaves.items()})
            curve.append({"epoch": ep, "stage": 1, "total": stage1_eval()})
        final1 = curve[-1]["total"]
        plain = (plain0, stage1_eval(False))
        log.info("stage 1: L1 %.6g -> %.6g", init1, final1)

    if cfg.stage2_epochs > 0:
        train_keys = head_keys + ["dustbin"]
        if cfg.train_backbone:
            train_keys += [k for k in params if k.startswith("block")]
        opt = Adam(cfg.lr)
        for ep in range(1, cfg.stage2_epochs + 1):
            order = np.random.default_rng([cfg.seed, 2, ep]).permutation(len(prepared))
            sums = {"L_um": [], "L_oc": [], "L_p": [], "total": []}
            for k in order:
                rng = np.random.default_rng([cfg.seed, 3, ep, int(k)])
                with ad.Tape() as tape:
                    leaves = {name: tape.leaf(params[name]) for name in train_keys}
                    local = dict(params, **leaves)
                    g = None if cfg.train_backbone else fixed_g[k]
                    l_um, l_oc, l_p = stage2_losses(prepared[k], local, cfg, rng, g)
                    total = l_um + l_oc + (l_p if l_p is not None else 0.0)
                _check(total.item(), 2, ep, int(k))
                grads = ad.backward(tape, total)
                opt.step(params, {name: grads[t] for name, t in leaves.items()})
                sums["L_um"].append(l_um.item())
                sums["L_oc"].append(l_oc.item())
                if l_p is not None:
                    sums["L_p"].append(l_p.item())
                sums["total"].append(total.item())
            curve.append({"epoch": ep, "stage": 2, **{k: float(np.mean(v)) if v else None for k, v in sums.items()}})
        log.info("stage 2: total %.6g", curve[-1]["total"])
    return TrainResult(params, curve, _monotone(curve), init1, final1, plain)


def mean_sigma_by_motion(params: att.ParameterSet, prepared: list[PreparedPair]) -> tuple[float, float]:
    """Mean predicted sigma^2 over mostly-moving and over fully static superpoints."""
    moving, static = [], []
    for pp in prepared:
        gp, gq = _backbone(pp, params)
        for g, oracle in ((gp, pp.oracle_p), (gq, pp.oracle_q)):
            s = att.mask_head(g.data, *_head(params)).data[:, 0]
            moving.append(s[oracle > 0.5])
            static.append(s[oracle <= MASK_EPS])
    m, s = np.concatenate(moving), np.concatenate(static)
    return (float(m.mean()) if len(m) else float("nan"), float(s.mean()) if len(s) else float("nan"))

