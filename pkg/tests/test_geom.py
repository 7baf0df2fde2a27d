import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridreg.errors import DegenerateConfiguration, EmptyCloud, FormatError, KTooLarge
from hybridreg.geom import (
    MotionLabel,
    PointCloud,
    RigidTransform,
    apply,
    compose,
    inverse,
    knn,
    random_transform,
    read_ply,
    rmse_between,
    rot_z,
    voxel_downsample,
    weighted_kabsch,
    write_ply,
)

seeds = st.integers(0, 2**32 - 1)
I = RigidTransform.identity()


def close(a: RigidTransform, b: RigidTransform, tol):
    return np.abs(a.rotation - b.rotation).max() <= tol and np.abs(a.translation - b.translation).max() <= tol


def test_compose_identity():
    assert close(compose(I, I), I, 0.0)


@given(seeds)
def test_compose_with_inverse_is_identity(seed):
    t = random_transform(np.random.default_rng(seed), 3.0)
    assert close(compose(t, inverse(t)), I, 1e-12)
    assert close(compose(inverse(t), t), I, 1e-12)


def test_compose_z_rotations_adds_angles():
    out = compose(RigidTransform(rot_z(30), np.zeros(3)), RigidTransform(rot_z(60), np.zeros(3)))
    np.testing.assert_allclose(out.rotation, rot_z(90), atol=1e-12)


def test_compose_applies_right_operand_first():
    a = RigidTransform(rot_z(90), [1.0, 0.0, 0.0])
    b = RigidTransform(np.eye(3), [0.0, 0.0, 2.0])
    p = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-12)


@given(seeds)
def test_compose_result_is_valid_rotation(seed):
    rng = np.random.default_rng(seed)
    t = compose(random_transform(rng), random_transform(rng))
    assert t.is_valid()


def test_apply_examples():
    np.testing.assert_array_equal(apply(I, [1, 2, 3]), [1, 2, 3])
    np.testing.assert_array_equal(apply(RigidTransform(np.eye(3), [1, 0, 0]), [0, 0, 0]), [1, 0, 0])
    np.testing.assert_allclose(apply(RigidTransform(rot_z(90), np.zeros(3)), [1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_matrix_roundtrip(rng):
    t = random_transform(rng)
    assert close(RigidTransform.from_matrix(t.as_matrix()), t, 0.0)


def test_transform_arrays_are_read_only(rng):
    t = random_transform(rng)
    with pytest.raises(ValueError):
        t.rotation[0, 0] = 2.0


def test_kabsch_identity():
    src = np.random.default_rng(0).normal(size=(10, 3))
    assert close(weighted_kabsch(src, src), I, 1e-10)


@given(seeds)
def test_kabsch_recovers_known_transform(seed):
    rng = np.random.default_rng(seed)
    t = random_transform(rng, 2.0)
    src = rng.normal(size=(10, 3))
    assert close(weighted_kabsch(src, t.apply(src)), t, 1e-9)


def test_kabsch_ignores_zero_weight_outlier(rng):
    t = random_transform(rng)
    src = rng.normal(size=(10, 3))
    tgt = t.apply(src)
    tgt[4] += [50.0, -20.0, 7.0]
    w = np.ones(10)
    w[4] = 0.0
    assert close(weighted_kabsch(src, tgt, w), t, 1e-9)


@given(seeds, st.floats(1e-3, 1e3))
def test_kabsch_invariant_to_weight_scale(seed, c):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(12, 3))
    tgt = random_transform(rng).apply(src) + rng.normal(scale=0.05, size=(12, 3))
    w = rng.uniform(0.1, 2.0, 12)
    assert close(weighted_kabsch(src, tgt, w), weighted_kabsch(src, tgt, c * w), 1e-12)


def test_kabsch_never_returns_reflection(rng):
    src = rng.normal(size=(8, 3))
    tgt = src * np.array([1.0, 1.0, -1.0])  # mirror image
    assert np.linalg.det(weighted_kabsch(src, tgt).rotation) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize(
    "pts, w",
    [
        (np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]), None),  # collinear
        (np.ones((5, 3)), None),  # coincident
        (np.eye(3), [1.0, 1.0, 0.0]),  # two effective points
    ],
)
def test_kabsch_degenerate(pts, w):
    with pytest.raises(DegenerateConfiguration):
        weighted_kabsch(pts, pts, w)


def test_voxel_single_point():
    g = voxel_downsample(np.array([[0.3, -1.0, 2.0]]), 0.5)
    np.testing.assert_array_equal(g.superpoints, [[0.3, -1.0, 2.0]])


def test_voxel_two_distant_points():
    assert len(voxel_downsample(np.array([[0.0, 0, 0], [10.0, 0, 0]]), 0.1)) == 2


def test_voxel_cube_centroid():
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    g = voxel_downsample(corners, 10.0)
    np.testing.assert_allclose(g.superpoints, [[0.5, 0.5, 0.5]])


def test_voxel_empty():
    with pytest.raises(EmptyCloud):
        voxel_downsample(np.zeros((0, 3)), 0.1)


@given(seeds, st.floats(0.05, 1.0))
def test_voxel_assignment_is_nearest_and_partitions(seed, voxel):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(200, 3))
    g = voxel_downsample(pts, voxel)
    d = np.linalg.norm(pts[:, None, :] - g.superpoints[None], axis=2)
    np.testing.assert_allclose(d[np.arange(len(pts)), g.assignment], d.min(axis=1), atol=1e-12)
    allidx = np.sort(np.concatenate(g.patches))
    np.testing.assert_array_equal(allidx, np.arange(len(pts)))
    for i, p in enumerate(g.patches):
        assert np.all(g.assignment[p] == i)
    # reassigning against the returned superpoints gives the same answer
    np.testing.assert_array_equal(d.argmin(axis=1), g.assignment)


def test_knn_examples():
    cloud = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    np.testing.assert_array_equal(knn([0.9, 0, 0], cloud, 2), [1, 0])
    np.testing.assert_array_equal(knn(cloud[2], cloud, 1), [2])
    assert sorted(knn([5.0, 1, 1], cloud, 3)) == [0, 1, 2]


def test_knn_ties_by_lower_index():
    cloud = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, 0, 5.0]])
    np.testing.assert_array_equal(knn([0, 0, 0], cloud, 3), [0, 1, 2])
    np.testing.assert_array_equal(knn([0, 0, 0], cloud[::-1], 2), [1, 2])


def test_knn_too_large():
    with pytest.raises(KTooLarge):
        knn([0, 0, 0], np.zeros((2, 3)), 3)


@given(seeds, st.integers(1, 30))
def test_knn_matches_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    cloud = rng.integers(-3, 4, size=(30, 3)).astype(float)  # many exact ties
    q = rng.integers(-3, 4, size=3).astype(float)
    d = np.linalg.norm(cloud - q, axis=1)
    expected = np.lexsort((np.arange(30), d))[:k]
    np.testing.assert_array_equal(knn(q, cloud, k), expected)


@given(seeds)
def test_rmse_of_identical_sets_is_zero(seed):
    rng = np.random.default_rng(seed)
    t = random_transform(rng)
    p = rng.normal(size=(20, 3))
    assert rmse_between(t.apply(p), t.apply(p)) == 0.0


def test_pointcloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        PointCloud([[0.0, np.nan, 0.0]])


def test_ply_roundtrip(tmp_path, rng):
    labels = rng.integers(0, 3, 25).astype(np.uint8)
    cloud = PointCloud(rng.normal(size=(25, 3)), labels)
    write_ply(tmp_path / "c.ply", cloud)
    back = read_ply(tmp_path / "c.ply")
    np.testing.assert_array_equal(back.points, cloud.points)
    np.testing.assert_array_equal(back.labels, labels)
    assert set(np.unique(back.labels)) <= {m.value for m in MotionLabel}


def test_ply_rejects_garbage(tmp_path):
    (tmp_path / "bad.ply").write_text("not a ply\n")
    with pytest.raises(FormatError):
        read_ply(tmp_path / "bad.ply")
    (tmp_path / "short.ply").write_text(
        "ply\nformat ascii 1.0\nelement vertex 3\nproperty double x\nproperty double y\n"
        "property double z\nend_header\n0 0 0\n"
    )
    with pytest.raises(FormatError):
        read_ply(tmp_path / "short.ply")
