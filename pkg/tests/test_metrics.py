import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridreg.correspondence import CorrespondenceSet
from hybridreg.errors import EmptyBatch, EmptyCorrespondences, InvalidRotation
from hybridreg.geom import RigidTransform, axis_angle, random_rotation, random_transform, rot_z
from hybridreg.metrics import (
    PROFILES,
    PairReport,
    Thresholds,
    aggregate,
    feature_matching_recall,
    inlier_ratio,
    median,
    registration_recall,
    rmse,
    rre,
    rte,
)

seeds = st.integers(0, 2**32 - 1)
I = RigidTransform.identity()


def _pairs(k):
    return CorrespondenceSet(np.stack([np.arange(k), np.arange(k)], axis=1))


def test_profiles():
    assert PROFILES["indoor"] == Thresholds(0.2, 0.1, 0.05)
    assert PROFILES["eth"] == Thresholds(0.5, 0.2, 0.05)


def test_rmse_examples(rng):
    src = rng.normal(size=(6, 3))
    t = random_transform(rng)
    assert rmse(t, _pairs(6), src, t.apply(src)) == pytest.approx(0.0, abs=1e-14)
    shifted = RigidTransform(np.eye(3), [0.0, 0.3, 0.4])
    assert rmse(shifted, _pairs(6), src, src) == pytest.approx(0.5, abs=1e-14)
    tgt = np.array([[0.1, 0.0, 0.0], [0.0, 0.3, 0.0]])
    assert rmse(I, _pairs(2), np.zeros((2, 3)), tgt) == pytest.approx(math.sqrt(0.05), abs=1e-15)


def test_rmse_empty():
    with pytest.raises(EmptyCorrespondences):
        rmse(I, _pairs(0), np.zeros((1, 3)), np.zeros((1, 3)))


def test_registration_recall_examples():
    assert registration_recall([0.0, 0.0], 0.2) == 1.0
    assert registration_recall([0.1, 0.3], 0.2) == 0.5
    assert registration_recall([0.2], 0.2) == 0.0  # strict
    with pytest.raises(EmptyBatch):
        registration_recall([], 0.2)


def test_inlier_ratio_examples(rng):
    src = np.zeros((4, 3))
    tgt = np.array([[0.05, 0, 0], [0, 0.05, 0], [0, 0, 0.05], [0.2, 0, 0]])
    assert inlier_ratio(_pairs(4), I, src, tgt, 0.1) == 0.75
    assert inlier_ratio(_pairs(4), I, src, src, 0.1) == 1.0
    assert inlier_ratio(_pairs(4), I, src, tgt, 1e-300) == 0.0
    with pytest.raises(EmptyCorrespondences):
        inlier_ratio(_pairs(0), I, src, tgt, 0.1)


def test_feature_matching_recall_examples():
    assert feature_matching_recall([1.0, 1.0], 0.05) == 1.0
    assert feature_matching_recall([0.04, 0.06], 0.05) == 0.5
    assert feature_matching_recall([0.05], 0.05) == 0.0


@pytest.mark.parametrize("deg", [0.0, 1.0, 37.0, 90.0, 179.0])
def test_rre_of_axis_angle(deg):
    axis = np.random.default_rng(int(deg)).normal(size=3)
    assert abs(rre(axis_angle(axis, math.radians(deg)), np.eye(3)) - deg) <= 1e-9


def test_rre_z90():
    assert rre(rot_z(90), np.eye(3)) == pytest.approx(90.0, abs=1e-12)


@given(seeds)
def test_rre_symmetric_and_left_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_rotation(rng) for _ in range(3))
    assert rre(a, b) == pytest.approx(rre(b, a), abs=1e-9)
    assert rre(c @ a, c @ b) == pytest.approx(rre(a, b), abs=1e-6)
    assert 0.0 <= rre(a, b) <= 180.0


def test_rre_rejects_non_rotation():
    with pytest.raises(InvalidRotation):
        rre(np.diag([1.0, 1.0, -1.0]), np.eye(3))
    with pytest.raises(InvalidRotation):
        rre(np.eye(2), np.eye(3))


def test_rte_examples():
    assert rte([1, 2, 3], [1, 2, 3]) == 0.0
    assert rte([0, 0, 0], [3, 4, 0]) == 5.0
    assert rte([1, -2, 0.5], [0, 3, 1]) == rte([0, 3, 1], [1, -2, 0.5])


def test_median_rules():
    assert median([]) is None
    assert median([3.0]) == 3.0
    assert median([1.0, 3.0]) == 2.0
    assert median([5.0, 1.0, 3.0]) == 3.0


def _report(rre_deg, ok, rte_m=0.01, split="s", b="high"):
    return PairReport(0.05 if ok else 1.0, 0.5, rre_deg, rte_m, ok, split, b)


def test_aggregate_single_success():
    s = aggregate([_report(4.0, True, 0.03)]).per_split[0]
    assert (s.median_rre_deg, s.median_rte_m, s.rr) == (4.0, 0.03, 1.0)


def test_aggregate_excludes_failures_from_medians():
    s = aggregate([_report(1.0, True), _report(3.0, True), _report(90.0, False)]).per_split[0]
    assert s.median_rre_deg == 2.0
    assert s.rr == pytest.approx(2 / 3)


def test_aggregate_no_successes():
    rep = aggregate([_report(90.0, False), _report(45.0, False)])
    s = rep.per_split[0]
    assert s.rr == 0.0 and s.median_rre_deg is None and s.median_rte_m is None
    assert rep.to_csv().splitlines()[1].endswith(",NA,NA")


def test_aggregate_groups_in_first_seen_order():
    reps = [_report(1, True, split="b"), _report(1, True, split="a"), _report(2, False, split="b")]
    rows = aggregate(reps).per_split
    assert [(r.split, r.n_pairs) for r in rows] == [("b", 2), ("a", 1)]
    lines = aggregate(reps).to_csv().splitlines()
    assert lines[0] == "split,overlap_bin,pairs,RR,FMR,IR,medRRE_deg,medRTE_cm"
    assert lines[1] == "b,high,2,0.5,1,0.5,1,1"


def test_aggregate_empty():
    with pytest.raises(EmptyBatch):
        aggregate([])
