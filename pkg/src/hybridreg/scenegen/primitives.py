"""Analytic primitives with vectorized ray intersection.

``intersect`` takes (N, 3) ray origins and unit directions and returns the
nearest hit distance beyond ``EPS`` (``inf`` on a miss).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geom import RigidTransform

EPS = 1e-9


def _dot(a, b):
    return np.einsum("ij,ij->i", a, b)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        oc = o - self.center
        b = _dot(oc, d)
        c = _dot(oc, oc) - self.radius**2
        h = b * b - c
        out = np.full(len(o), np.inf)
        ok = h >= 0
        sq = np.sqrt(np.where(ok, h, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > EPS, t0, np.where(t1 > EPS, t1, np.inf))
        out[ok] = t[ok]
        return out

    def distance(self, p) -> float:
        return float(np.linalg.norm(np.asarray(p) - self.center) - self.radius)

    def transformed(self, t: RigidTransform) -> Sphere:
        return Sphere(t.apply(self.center), self.radius)

    def aabb(self):
        r = np.full(3, self.radius)
        return self.center - r, self.center + r

    def surface_check(self, p: np.ndarray) -> np.ndarray:
        return np.abs(np.linalg.norm(p - self.center, axis=1) - self.radius)


@dataclass(frozen=True)
class Box:
    """Oriented box; ``rotation`` maps box-local axes into the parent frame."""

    center: np.ndarray
    half: np.ndarray
    rotation: np.ndarray = None

    def __post_init__(self):
        if self.rotation is None:
            object.__setattr__(self, "rotation", np.eye(3))

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        lo = (o - self.center) @ self.rotation
        ld = d @ self.rotation
        ld = np.where(np.abs(ld) < 1e-15, 1e-15, ld)
        t1 = (-self.half - lo) / ld
        t2 = (self.half - lo) / ld
        tnear = np.minimum(t1, t2).max(axis=1)
        tfar = np.maximum(t1, t2).min(axis=1)
        hit = (tnear <= tfar) & (tfar > EPS)
        t = np.where(tnear > EPS, tnear, tfar)
        return np.where(hit, t, np.inf)

    def distance(self, p) -> float:
        q = np.abs((np.asarray(p) - self.center) @ self.rotation) - self.half
        return float(np.linalg.norm(np.maximum(q, 0.0)) + min(q.max(), 0.0))

    def transformed(self, t: RigidTransform) -> Box:
        return Box(t.apply(self.center), self.half, t.rotation @ self.rotation)

    def aabb(self):
        ext = np.abs(self.rotation) @ self.half
        return self.center - ext, self.center + ext


@dataclass(frozen=True)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        r = self.radius
        ba = self.b - self.a
        oa = o - self.a
        baba = ba @ ba
        bard = d @ ba
        baoa = oa @ ba
        rdoa = _dot(d, oa)
        oaoa = _dot(oa, oa)
        aa = baba - bard * bard
        bb = baba * rdoa - baoa * bard
        cc = baba * oaoa - baoa * baoa - r * r * baba
        h = bb * bb - aa * cc
        out = np.full(len(o), np.inf)
        # cylinder body
        safe = aa > 1e-14
        with np.errstate(invalid="ignore", divide="ignore"):
            tb = (-bb - np.sqrt(np.where(h >= 0, h, 0.0))) / np.where(safe, aa, 1.0)
        y = baoa + tb * bard
        body = safe & (h >= 0) & (y > 0) & (y < baba) & (tb > EPS)
        out[body] = tb[body]
        # end caps: nearest hit of either sphere
        for c in (self.a, self.b):
            tc = Sphere(c, r).intersect(o, d)
            out = np.minimum(out, tc)
        return out

    def distance(self, p) -> float:
        p = np.asarray(p)
        ba = self.b - self.a
        u = np.clip((p - self.a) @ ba / (ba @ ba), 0.0, 1.0)
        return float(np.linalg.norm(p - (self.a + u * ba)) - self.radius)

    def transformed(self, t: RigidTransform) -> Capsule:
        return Capsule(t.apply(self.a), t.apply(self.b), self.radius)

    def aabb(self):
        r = np.full(3, self.radius)
        return np.minimum(self.a, self.b) - r, np.maximum(self.a, self.b) + r

    def surface_check(self, p: np.ndarray) -> np.ndarray:
        ba = self.b - self.a
        u = np.clip((p - self.a) @ ba / (ba @ ba), 0.0, 1.0)
        return np.abs(np.linalg.norm(p - (self.a + u[:, None] * ba), axis=1) - self.radius)


@dataclass(frozen=True)
class RoomBox:
    """Axis-aligned room seen from the inside (walls, floor, ceiling)."""

    lo: np.ndarray
    hi: np.ndarray

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        dd = np.where(np.abs(d) < 1e-15, 1e-15, d)
        t = np.where(dd > 0, (self.hi - o) / dd, (self.lo - o) / dd)
        t = t.min(axis=1)
        inside = np.all((o > self.lo) & (o < self.hi), axis=1)
        return np.where(inside & (t > EPS), t, np.inf)

    def distance(self, p) -> float:
        p = np.asarray(p)
        return float(min((p - self.lo).min(), (self.hi - p).min()))

    def contains(self, lo, hi) -> bool:
        return bool(np.all(lo >= self.lo) and np.all(hi <= self.hi))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)


def aabb_overlap(a, b, margin: float = 0.0) -> bool:
    (alo, ahi), (blo, bhi) = a, b
    return bool(np.all(alo - margin < bhi) and np.all(blo - margin < ahi))
