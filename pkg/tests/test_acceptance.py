"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from hybridreg import attention as att
from hybridreg.attention import UncertaintyMask
from hybridreg.checks import TOLERANCE, gradient_suite
from hybridreg.correspondence import CorrespondenceSet
from hybridreg.geom import MotionLabel, RigidTransform, axis_angle, random_transform
from hybridreg.losses import TrainConfig, laplace_nll, mean_sigma_by_motion, prepare_training_pair, train_toy
from hybridreg.matching import Polarity, dual_normalize, select_superpoint_correspondences
from hybridreg.metrics import (
    PROFILES,
    evaluate_pair,
    feature_matching_recall,
    registration_recall,
    rre,
)
from hybridreg.pipeline import Estimator, MaskMode, PipelineConfig, estimate, match_pair, prepare_cloud
from hybridreg.scenegen import DatasetConfig, generate_dataset
from hybridreg.scenegen.dataset import generate_pairs, rebuild_attempt
from hybridreg.scenegen.scene import cast_rays

TAU = PROFILES["indoor"]


def _rmse_brute(t, c, src, tgt):
    total = 0.0
    for i, j in c.pairs.tolist():
        p = t.rotation @ src[i] + t.translation
        total += sum((p[k] - tgt[j][k]) ** 2 for k in range(3))
    return math.sqrt(total / len(c))


def _recall(pairs, est, rigid_tau=TAU.rmse):
    """Registration recall of one estimator over prepared (pair, matches) tuples."""
    errs = []
    for pair, m in pairs:
        try:
            res = estimate(m, pair.source, pair.target, est, CFG)
            errs.append(_rmse_brute(res.transform, pair.gt_correspondences, pair.source.points, pair.target.points))
        except Exception:  # noqa: BLE001 - a failed estimate counts as a miss
            errs.append(math.inf)
    return registration_recall(errs, rigid_tau)


CFG = PipelineConfig()


@pytest.fixture(scope="module")
def rigid_run(rigid_set):
    pairs = rigid_set[3]
    t0 = time.perf_counter()
    prepared = []
    for pair in pairs:
        fp, fq = prepare_cloud(pair.source, CFG), prepare_cloud(pair.target, CFG)
        prepared.append((pair, match_pair(fp, fq, CFG)))
    rr = {est: _recall(prepared, est) for est in Estimator}
    return rr, time.perf_counter() - t0, len(pairs)


def test_criterion_1_rigid_recovery(rigid_run, verdict):
    rr, seconds, n = rigid_run
    ok = n == 100 and rr[Estimator.RANSAC] == 1.0 and rr[Estimator.LGR] == 1.0 and seconds < 60
    verdict(1, ok, f"{n} rigid-only pairs, RR ransac={rr[Estimator.RANSAC]:.2f} lgr={rr[Estimator.LGR]:.2f}, "
                   f"registration time {seconds:.1f} s (limit 60 s)")
    assert ok


def test_criterion_2_hybrid_degradation_and_rescue(hybrid_set, rigid_run, verdict):
    pairs = hybrid_set[3]
    assert all(0.3 <= p.nonrigid_proportion <= 0.5 for p in pairs)
    rr = {}
    prepared = {mode: [] for mode in (MaskMode.NONE, MaskMode.ORACLE)}
    for pair in pairs:
        fp, fq = prepare_cloud(pair.source, CFG), prepare_cloud(pair.target, CFG)
        for mode in prepared:
            prepared[mode].append((pair, match_pair(fp, fq, CFG, None, mode)))
    for mode, items in prepared.items():
        rr[mode] = _recall(items, Estimator.LGR)
    rigid = rigid_run[0][Estimator.LGR]
    a = rr[MaskMode.NONE] < rigid
    b = rr[MaskMode.ORACLE] >= rr[MaskMode.NONE] + 0.10 - 1e-12
    verdict(2, a and b, f"{len(pairs)} pairs at 30-50% non-rigid, LGR RR unmasked={rr[MaskMode.NONE]:.2f} "
                        f"(rigid-only {rigid:.2f}), oracle mask={rr[MaskMode.ORACLE]:.2f}")
    assert a and b


def _constructed_pair(k):
    rng = np.random.default_rng([2024, k])
    n = 40 + 5 * k
    src = rng.uniform(-2, 2, (n, 3))
    gt = random_transform(rng)
    tgt = gt.apply(src) + rng.normal(scale=0.02, size=(n, 3))
    # estimated correspondences: a k-dependent share of them is wrong
    est_pairs = np.stack([np.arange(n), np.arange(n)], axis=1)
    wrong = rng.random(n) < 0.1 * k
    est_pairs[wrong, 1] = rng.integers(0, n, size=int(wrong.sum()))
    gt_c = CorrespondenceSet(np.stack([np.arange(n), np.arange(n)], axis=1))
    # estimate: ground truth disturbed by a rotation and a shift that grow with k,
    # so early pairs register and later ones do not
    axis = rng.normal(size=3)
    angle = 1.0 + 3.0 * k
    shift = rng.normal(size=3) * (0.01 + 0.03 * k)
    t_est = RigidTransform(axis_angle(axis, math.radians(angle)) @ gt.rotation, gt.translation + shift)
    return src, tgt, gt, t_est, gt_c, CorrespondenceSet(est_pairs)


def test_criterion_3_metric_formulas(verdict):
    worst = 0.0
    lib, brute = [], []
    for k in range(10):
        src, tgt, gt, t_est, gt_c, est_c = _constructed_pair(k)
        rep = evaluate_pair(t_est, gt, gt_c, est_c, src, tgt, TAU)
        inl = 0
        for i, j in est_c.pairs.tolist():
            p = gt.rotation @ src[i] + gt.translation
            inl += math.sqrt(sum((p[a] - tgt[j][a]) ** 2 for a in range(3))) < TAU.inlier
        rel = Rotation.from_matrix(t_est.rotation.T @ gt.rotation)
        b = (
            _rmse_brute(t_est, gt_c, src, tgt),
            inl / len(est_c),
            math.degrees(rel.magnitude()),
            math.sqrt(sum((t_est.translation[a] - gt.translation[a]) ** 2 for a in range(3))),
        )
        lib.append((rep.rmse_m, rep.ir, rep.rre_deg, rep.rte_m))
        brute.append(b)
    lib_arr, brute_arr = np.array(lib), np.array(brute)
    worst = max(worst, float(np.abs(lib_arr - brute_arr).max()))
    rr_lib = registration_recall(lib_arr[:, 0], TAU.rmse)
    rr_brute = sum(e < TAU.rmse for e in brute_arr[:, 0]) / 10
    fmr_lib = feature_matching_recall(lib_arr[:, 1], TAU.fmr)
    fmr_brute = sum(r > TAU.fmr for r in brute_arr[:, 1]) / 10
    worst = max(worst, abs(rr_lib - rr_brute), abs(fmr_lib - fmr_brute))
    theta_err = 0.0
    for deg in (1.0, 37.0, 90.0, 179.0):
        axis = np.random.default_rng(int(deg)).normal(size=3)
        theta_err = max(theta_err, abs(rre(axis_angle(axis, math.radians(deg)), np.eye(3)) - deg))
    ok = worst <= 1e-9 and theta_err <= 1e-9 and 0 < rr_brute < 1
    verdict(3, ok, f"10 constructed pairs (RR {rr_lib:.1f}, FMR {fmr_lib:.1f}), max |library - brute force| = {worst:.2e}; "
                   f"axis-angle RRE max error {theta_err:.2e} deg")
    assert ok


def test_criterion_4_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = gradient_suite(seed=0, per_kind=25)
    seconds = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in results)
    kinds = sorted({r.kind for r in results})
    ok = len(results) >= 100 and len(kinds) == 4 and worst <= TOLERANCE and seconds < 30
    verdict(4, ok, f"{len(results)} instances over {', '.join(kinds)}; "
                   f"max relative error {worst:.2e}; {seconds:.1f} s (limit 30 s)")
    assert ok


def test_criterion_5_laplace_nll(verdict):
    at_mean = laplace_nll(1.25, 1.25, 0.5)
    unit = laplace_nll(1.0, 0.0, 1.0)
    err = abs(unit - (0.5 * math.log(2) + math.sqrt(2)))
    ok = at_mean == 0.0 and err <= 1e-12
    verdict(5, ok, f"nll(c=mu, var=0.5) = {float(at_mean)!r}; nll(|c-mu|=1, var=1) error {err:.1e}")
    assert ok


def test_criterion_6_matching_algebra(verdict):
    dn = dual_normalize(np.array([[2.0, 1.0], [1.0, 2.0]]))
    dn_err = float(np.abs(dn - np.array([[4, 1], [1, 4]]) / 9).max())
    scale_ok = uniform_ok = True
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n, m = rng.integers(2, 12, size=2)
        s = rng.random((n, m))
        k = int(rng.integers(1, n * m + 1))
        mask = UncertaintyMask(rng.uniform(0.01, 0.99, n), rng.uniform(0.01, 0.99, m))
        c = float(10 ** rng.uniform(-3, 3))
        for msk in (None, mask):
            a = select_superpoint_correspondences(s, msk, k)
            b = select_superpoint_correspondences(c * s, msk, k)
            scale_ok &= np.array_equal(a.pairs, b.pairs)
        sigma = float(rng.uniform(0.01, 0.99))
        uniform = UncertaintyMask(np.full(n, sigma), np.full(m, sigma))
        plain = select_superpoint_correspondences(s, None, k)
        for pol in Polarity:
            uniform_ok &= np.array_equal(plain.pairs, select_superpoint_correspondences(s, uniform, k, pol).pairs)
    ok = dn_err <= 1e-12 and scale_ok and uniform_ok
    verdict(6, ok, f"dual_normalize error {dn_err:.1e}; scale invariance {scale_ok}; "
                   f"uniform mask equals unmasked {uniform_ok} (200 seeded instances)")
    assert ok


def _dynamic_pixel_share(att_):
    """Pixels whose nearest hit is a dynamic object, by object id."""
    scene, cam = att_.scene, att_.cam_a
    o, d, _ = cam.pixel_rays()
    _, _, obj = cast_rays(scene, o, d, att_.frames[0])
    first_dynamic = 1 + len(scene.static_objects)  # ids: room 0, then statics, then dynamic objects
    return np.count_nonzero(obj >= first_dynamic) / len(obj)


def test_criterion_7_dataset_consistency(rigid_set, hybrid_set, tmp_path, verdict):
    worst_gt = worst_ov = worst_prop = 0.0
    n_pairs = 0
    for cfg, _, records, pairs in (rigid_set, hybrid_set):
        for rec, pair in zip(records, pairs):
            n_pairs += 1
            c = pair.gt_correspondences
            res = np.linalg.norm(pair.gt_transform.apply(pair.source.points[c.src]) - pair.target.points[c.tgt], axis=1)
            worst_gt = max(worst_gt, float(res.max()))
            sb = pair.source.points[pair.source.labels == MotionLabel.BACKGROUND]
            tb = pair.target.points[pair.target.labels == MotionLabel.BACKGROUND]
            hits = cKDTree(tb).query_ball_point(pair.gt_transform.apply(sb), cfg.pair.match_radius, return_length=True)
            worst_ov = max(worst_ov, abs(np.count_nonzero(hits > 0) / len(sb) - rec.overlap_ratio))
            if rec.split == "rigid-only":
                prop = 0.0 if np.all(pair.source.labels == MotionLabel.BACKGROUND) else 1.0
            else:
                prop = _dynamic_pixel_share(rebuild_attempt(cfg, rec))
            worst_prop = max(worst_prop, abs(prop - rec.nonrigid_proportion))

    small = DatasetConfig(seed=5, n_pairs=3, splits=("rigid-only", "nonrigid-10-30", "nonrigid-30-50"))
    generate_dataset(small, tmp_path / "a")
    generate_dataset(small, tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = files == sorted(p.name for p in (tmp_path / "b").iterdir()) and all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files
    )
    ok = worst_gt <= 1e-6 and worst_ov <= 1e-9 and worst_prop <= 1e-9 and same
    verdict(7, ok, f"{n_pairs} pairs: gt residual max {worst_gt:.1e} m, overlap gap {worst_ov:.1e}, "
                   f"proportion gap {worst_prop:.1e}; regeneration byte-identical {same}")
    assert ok


def test_criterion_8_toy_training(verdict):
    t0 = time.perf_counter()
    data = generate_pairs(DatasetConfig(seed=7, n_pairs=10, splits=("nonrigid-30-50",)))
    cfg = TrainConfig(stage1_epochs=200, stage2_epochs=20, seed=0)
    prepared = [prepare_training_pair(pair, cfg) for _, pair in data]
    d = prepared[0].fp.descriptors.d
    params = att.init_params(np.random.default_rng(0), d, cfg.pipeline.d_t, cfg.pipeline.hidden, cfg.pipeline.blocks)
    first = train_toy(params, None, cfg, prepared=prepared)
    seconds = time.perf_counter() - t0
    second = train_toy(params, None, cfg, prepared=prepared)
    same = all(np.array_equal(first.params[k], second.params[k]) for k in first.params) and first.curve == second.curve
    before, after = first.plain_l1
    moving, static = mean_sigma_by_motion(first.params, prepared)
    ok = after <= 0.5 * before and moving > static and same and seconds < 300
    verdict(8, ok, f"10 pairs: stage-1 L1 {before:.4f} -> {after:.4f} ({100 * (1 - after / before):.0f}% lower); "
                   f"mean sigma^2 non-rigid {moving:.3f} vs background {static:.3f}; "
                   f"deterministic {same}; {seconds:.0f} s (limit 300 s)")
    assert ok
