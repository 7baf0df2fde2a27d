"""Finite-difference checks of the training losses and the attention + mask stack."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as att
from . import autodiff as ad
from .losses import overlap_circle_loss_both, point_matching_loss_log, uncertainty_mask_loss
from .matching import correlation_tensor, point_matching_tensor

TOLERANCE = 1e-4
KINDS = ("mask_loss", "circle_loss", "point_loss", "attention_stack")


@dataclass
class GradCheck:
    kind: str
    instance: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _mask_loss_case(rng):
    n, m = rng.integers(2, 6, size=2)
    c = (rng.random((n, m)) < 0.4).astype(np.float64)
    nll_sum = bool(rng.random() < 0.5)
    fn = lambda mu, zp, zq: uncertainty_mask_loss(c, mu, ad.sigmoid(zp), ad.sigmoid(zq), 0.01, nll_sum)  # noqa: E731
    return fn, [rng.random((n, m)), rng.normal(size=n), rng.normal(size=m)]


def _circle_loss_case(rng):
    n, m = rng.integers(2, 6, size=2)
    pos = rng.random((n, m)) < 0.3
    pos[0, 0] = True
    neg = ~pos & (rng.random((n, m)) < 0.7)
    ov = np.where(pos, rng.uniform(0.1, 1.0, (n, m)), 0.0)
    clamp = bool(rng.random() < 0.5)
    # keep distances away from the margins, where the clamped weights have a kink
    d = rng.uniform(0.15, 0.35, (n, m)) if clamp else rng.uniform(0.0, 1.5, (n, m))
    fn = lambda dist: overlap_circle_loss_both(dist, pos, neg, ov, clamp_weights=clamp)  # noqa: E731
    return fn, [d]


def _point_loss_case(rng):
    n, m, w = rng.integers(2, 6), rng.integers(2, 6), 4
    k = int(rng.integers(1, min(n, m) + 1))
    rows = rng.choice(n, k, replace=False)
    cols = rng.choice(m, k, replace=False)
    matches = np.stack([rows, cols], axis=1)
    un_p = np.setdiff1d(np.arange(n), rows)
    un_q = np.setdiff1d(np.arange(m), cols)

    def fn(fp, fq, dustbin):
        return point_matching_loss_log(point_matching_tensor(fp, fq, dustbin, scale=2.0), matches, un_p, un_q)

    return fn, [rng.normal(size=(n, w)) * 0.5, rng.normal(size=(m, w)) * 0.5, np.array(rng.normal())]


def _stack_case(rng):
    n, m, d, d_t, hidden = 5, 4, 6, 4, 5
    params = att.init_params(rng, d, d_t, hidden, blocks=1, value_scale=0.3)
    names = list(params)
    xp, xq = rng.normal(size=(n, d)), rng.normal(size=(m, d))
    ep, eq = rng.normal(size=(n, n, d_t)) * 0.3, rng.normal(size=(m, m, d_t)) * 0.3
    c = (rng.random((n, m)) < 0.4).astype(np.float64)

    def fn(*values):
        p = dict(zip(names, values))
        gp, gq = att.transformer(xp, xq, ep, eq, p)
        s = correlation_tensor(ad.normalize_rows(gp), ad.normalize_rows(gq))
        h = [p[k] for k in ("head.w1", "head.b1", "head.w2", "head.b2")]
        return uncertainty_mask_loss(c, s, att.mask_head(gp, *h), att.mask_head(gq, *h))

    return fn, [params[k] for k in names]


_CASES = {
    "mask_loss": _mask_loss_case,
    "circle_loss": _circle_loss_case,
    "point_loss": _point_loss_case,
    "attention_stack": _stack_case,
}


def gradient_suite(seed: int = 0, per_kind: int = 25, kinds=KINDS) -> list[GradCheck]:
    """Central-difference checks over ``per_kind`` seeded instances of each kind."""
    out = []
    for ki, kind in enumerate(kinds):
        for i in range(per_kind):
            rng = np.random.default_rng([seed, ki, i])
            fn, inputs = _CASES[kind](rng)
            errs = ad.gradcheck(fn, inputs)
            out.append(GradCheck(kind, i, max(errs)))
    return out
