import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridreg import attention as att
from hybridreg import autodiff as ad
from hybridreg import losses
from hybridreg.errors import DivergedLoss, EmptyBatch, NonFinite, NonPositiveVariance, ZeroProbabilityEntry
from hybridreg.losses import (
    Adam,
    TrainConfig,
    batch_point_matching_loss,
    laplace_nll,
    mean_sigma_by_motion,
    overlap_circle_loss,
    point_matching_loss,
    point_matching_loss_log,
    prepare_training_pair,
    train_toy,
    uncertainty_mask_loss,
)

seeds = st.integers(0, 2**32 - 1)


# --- Laplace NLL ----------------------------------------------------------------


def test_nll_at_mean_with_half_variance_is_zero():
    assert laplace_nll(0.3, 0.3, 0.5) == 0.0


def test_nll_unit_gap_unit_variance():
    assert abs(laplace_nll(1.0, 0.0, 1.0) - (0.5 * math.log(2) + math.sqrt(2))) <= 1e-12


@given(st.floats(-5, 5), st.floats(0, 5), st.floats(1e-3, 10))
def test_nll_symmetric(mu, d, var):
    assert laplace_nll(mu + d, mu, var) == pytest.approx(laplace_nll(mu - d, mu, var), rel=1e-12, abs=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(1e-3, 10))
def test_nll_is_negative_log_density(c, mu, var):
    b = math.sqrt(var / 2)  # Laplace scale with this variance
    density = math.exp(-abs(c - mu) / b) / (2 * b)
    assert laplace_nll(c, mu, var) == pytest.approx(-math.log(density), rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("var", [0.0, -1.0])
def test_nll_rejects_non_positive_variance(var):
    with pytest.raises(NonPositiveVariance):
        laplace_nll(0.0, 0.0, var)


# --- mask loss --------------------------------------------------------------------


def brute_mask_loss(c, mu, sp, sq, lam, nll_sum):
    terms, reg = [], []
    for i in range(len(sp)):
        for j in range(len(sq)):
            a = math.log(sp[i] * sq[j])
            terms.append(-math.log(2) - a - math.sqrt(2) * math.exp(-a / 2) * abs(c[i][j] - mu[i][j]))
            reg.append(1 - sp[i] * sq[j])
    core = sum(-t for t in terms) if nll_sum else -math.log(sum(math.exp(t) for t in terms))
    return core + lam * sum(reg) / len(reg)


def test_mask_loss_single_pair_unit_variance():
    out = uncertainty_mask_loss(np.array([[0.4]]), np.array([[0.4]]), np.array([1.0]), np.array([1.0]))
    assert out.item() == pytest.approx(math.log(2), abs=1e-15)


@given(seeds, st.booleans())
def test_mask_loss_matches_brute_force(seed, nll_sum):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 5, size=2)
    c = (rng.random((n, m)) < 0.5).astype(float)
    mu, sp, sq = rng.random((n, m)), rng.uniform(0.05, 0.95, n), rng.uniform(0.05, 0.95, m)
    out = uncertainty_mask_loss(c, mu, sp, sq, 0.3, nll_sum).item()
    assert out == pytest.approx(brute_mask_loss(c, mu, sp, sq, 0.3, nll_sum), rel=1e-12, abs=1e-12)


@given(seeds)
def test_mask_loss_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    c = (rng.random((4, 5)) < 0.5).astype(float)
    mu, sp, sq = rng.random((4, 5)), rng.uniform(0.05, 0.95, 4), rng.uniform(0.05, 0.95, 5)
    pi, pj = rng.permutation(4), rng.permutation(5)
    a = uncertainty_mask_loss(c, mu, sp, sq).item()
    b = uncertainty_mask_loss(c[pi][:, pj], mu[pi][:, pj], sp[pi], sq[pj]).item()
    assert a == pytest.approx(b, rel=1e-13)


def test_mask_loss_gradient_wrt_every_sigma(rng):
    c = (rng.random((4, 4)) < 0.5).astype(float)
    mu = rng.random((4, 4))
    errs = ad.gradcheck(lambda sp, sq: uncertainty_mask_loss(c, mu, sp, sq), [rng.uniform(0.1, 0.9, 4), rng.uniform(0.1, 0.9, 4)])
    assert max(errs) <= 1e-4


def test_mask_loss_rejects_zero_sigma():
    with pytest.raises(NonFinite):
        uncertainty_mask_loss(np.zeros((1, 1)), np.zeros((1, 1)), np.array([0.0]), np.array([0.5]))


# --- circle loss -------------------------------------------------------------------


def brute_circle(d, pos, neg, ov, dp=0.1, dn=0.4, gamma=10.0):
    vals = []
    for i in range(d.shape[0]):
        if not pos[i].any():
            continue
        sp = sum(math.exp(math.sqrt(ov[i, j]) * gamma * (d[i, j] - dp) ** 2) for j in range(d.shape[1]) if pos[i, j])
        sn = sum(math.exp(gamma * (dn - d[i, j]) ** 2) for j in range(d.shape[1]) if neg[i, j])
        vals.append(math.log(1 + sp * sn))
    return sum(vals) / len(vals) if vals else 0.0


def test_circle_loss_no_anchors():
    out = overlap_circle_loss(np.ones((2, 3)), np.zeros((2, 3), bool), np.ones((2, 3), bool), np.zeros((2, 3)))
    assert out.item() == 0.0


def test_circle_loss_at_margins_is_log2():
    d = np.array([[0.1, 0.4]])
    out = overlap_circle_loss(d, np.array([[True, False]]), np.array([[False, True]]), np.array([[1.0, 0.0]]))
    assert out.item() == pytest.approx(math.log(2), abs=1e-15)


@given(seeds)
def test_circle_loss_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 5, size=2)
    d = rng.uniform(0, 1.2, (n, m))
    pos = rng.random((n, m)) < 0.4
    neg = ~pos & (rng.random((n, m)) < 0.7)
    ov = np.where(pos, rng.uniform(0.05, 1, (n, m)), 0.0)
    assert overlap_circle_loss(d, pos, neg, ov).item() == pytest.approx(brute_circle(d, pos, neg, ov), rel=1e-11, abs=1e-12)


@given(seeds, st.floats(0.01, 0.5))
def test_circle_loss_decreases_with_positive_distance_above_margin(seed, step):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.0, 1.0, (3, 4))
    pos = np.zeros((3, 4), bool)
    pos[0, 0] = True
    neg = ~pos
    ov = np.where(pos, 1.0, 0.0)
    d[0, 0] = 0.1 + step + 0.05
    before = overlap_circle_loss(d, pos, neg, ov).item()
    d[0, 0] -= step
    assert overlap_circle_loss(d, pos, neg, ov).item() < before


def test_clamped_weights_flatten_inside_margins():
    d = np.array([[0.05, 0.6]])  # positive closer than its margin, negative beyond its margin
    pos, neg, ov = np.array([[True, False]]), np.array([[False, True]]), np.array([[1.0, 0.0]])
    out = overlap_circle_loss(d, pos, neg, ov, clamp_weights=True).item()
    assert out == pytest.approx(math.log(2), abs=1e-15)


# --- point matching loss ----------------------------------------------------------


def test_point_loss_perfect_assignment():
    z = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    assert point_matching_loss(z, [[0, 0]], [1], [1]).item() == 0.0


def test_point_loss_uniform_two_by_two():
    assert point_matching_loss(np.full((2, 2), 0.25), [[0, 0]], [], []).item() == pytest.approx(-math.log(0.25), abs=1e-15)


def test_point_loss_additive_over_patches(rng):
    zs = [rng.uniform(0.01, 1, (3, 4)), rng.uniform(0.01, 1, (4, 3))]
    per = [point_matching_loss(zs[0], [[0, 1]], [1], [0]), point_matching_loss(zs[1], [[2, 1], [0, 0]], [1], [])]
    total = batch_point_matching_loss(per).item() * 2
    assert total == pytest.approx(per[0].item() + per[1].item(), rel=1e-14)
    with pytest.raises(EmptyBatch):
        batch_point_matching_loss([])


def test_point_loss_zero_entry():
    z = np.array([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ZeroProbabilityEntry):
        point_matching_loss(z, [[0, 0]], [], [], clamp=None)
    assert point_matching_loss(z, [[0, 0]], [], []).item() == pytest.approx(-math.log(1e-12))


def test_point_loss_log_form_agrees(rng):
    z = rng.uniform(0.01, 1, (3, 3))
    a = point_matching_loss(z, [[0, 1]], [1], [0]).item()
    b = point_matching_loss_log(np.log(z), [[0, 1]], [1], [0]).item()
    assert a == pytest.approx(b, rel=1e-14)


# --- optimizer ------------------------------------------------------------------------


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    Adam(lr=0.1).step(p, {"w": np.array([3.0, -0.5, 2e-3])})
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 0.4], atol=1e-6)


def test_adam_minimizes_quadratic():
    p = {"x": np.array([3.0])}
    opt = Adam(lr=0.05)
    for _ in range(400):
        opt.step(p, {"x": 2 * p["x"]})
    assert abs(p["x"][0]) < 0.05


# --- training ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def prepared(small_set):
    _, _, _, pairs = small_set
    cfg = TrainConfig()
    return [prepare_training_pair(p, cfg) for p in pairs[2:]]


def _params(prepared):
    return att.init_params(np.random.default_rng(0), prepared[0].fp.descriptors.d)


def test_ground_truth_labels_invariants(prepared):
    assert len(prepared) == 4
    for pp in prepared:
        c = pp.labels.c
        assert set(np.unique(c)) <= {0.0, 1.0}
        assert np.all(c[pp.labels.nonrigid_src] == 0) and np.all(c[:, pp.labels.nonrigid_tgt] == 0)
        assert np.all((pp.labels.overlap >= 0) & (pp.labels.overlap <= 1))
        assert len(pp.positives) == int(c.sum())


def test_zero_epochs_leave_parameters_unchanged(prepared):
    p0 = _params(prepared)
    out = train_toy(p0, None, TrainConfig(stage1_epochs=0, stage2_epochs=0), prepared)
    assert all(np.array_equal(out.params[k], p0[k]) for k in p0)
    assert out.curve == []


def test_training_is_deterministic_and_logs_curves(prepared, tmp_path):
    cfg = TrainConfig(stage1_epochs=4, stage2_epochs=2, seed=5)
    a = train_toy(_params(prepared), None, cfg, prepared)
    b = train_toy(_params(prepared), None, cfg, prepared)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert [r["stage"] for r in a.curve] == [1] * 5 + [2] * 2
    for stage in (1, 2):
        tot = [r["total"] for r in a.smoothed if r["stage"] == stage]
        assert all(y <= x for x, y in zip(tot, tot[1:]))
    a.write_csv(tmp_path / "loss.csv")
    a.write_csv(tmp_path / "again.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,stage,L_um,L_oc,L_p,total"
    assert lines[1].startswith("0,1,NA,NA,NA,")
    assert (tmp_path / "loss.csv").read_bytes() == (tmp_path / "again.csv").read_bytes()
    assert a.stage1_final < a.stage1_initial


def test_stage_one_moves_only_the_head(prepared):
    p0 = _params(prepared)
    out = train_toy(p0, None, TrainConfig(stage1_epochs=2, stage2_epochs=0), prepared)
    for k in p0:
        assert np.array_equal(out.params[k], p0[k]) != k.startswith("head.")


def test_non_finite_loss_aborts(prepared, monkeypatch):
    monkeypatch.setattr(losses, "stage1_loss", lambda *a, **k: ad.Tensor(np.nan))
    with pytest.raises(DivergedLoss):
        train_toy(_params(prepared), None, TrainConfig(stage1_epochs=1, stage2_epochs=0), prepared)


def test_empty_training_set():
    with pytest.raises(EmptyBatch):
        train_toy(att.init_params(np.random.default_rng(0), 8), [], TrainConfig())


def test_mean_sigma_split(prepared):
    moving, static = mean_sigma_by_motion(_params(prepared), prepared)
    assert 0 < moving < 1 and 0 < static < 1
