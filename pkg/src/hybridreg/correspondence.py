"""Hard correspondence sets shared by matching, estimation and metrics."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import FormatError


class Level(str, enum.Enum):
    SUPERPOINT = "superpoint"
    POINT = "point"


@dataclass
class CorrespondenceSet:
    pairs: np.ndarray  # (K, 2) int64 (source index, target index)
    scores: np.ndarray = None
    level: Level = Level.POINT

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if self.scores is None:
            self.scores = np.ones(len(self.pairs))
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.scores) != len(self.pairs):
            raise ValueError("one score per pair required")
        self.level = Level(self.level)

    def __len__(self):
        return len(self.pairs)

    @property
    def src(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def tgt(self) -> np.ndarray:
        return self.pairs[:, 1]

    def validate(self, n_src: int, n_tgt: int) -> None:
        if len(self.pairs) and (self.src.min() < 0 or self.tgt.min() < 0 or self.src.max() >= n_src or self.tgt.max() >= n_tgt):
            raise ValueError("correspondence index out of range")
        if len(np.unique(self.pairs, axis=0)) != len(self.pairs):
            raise ValueError("duplicate correspondence pairs")

    def deduplicated(self) -> CorrespondenceSet:
        """Keeps the best-scoring copy of each pair, ordered by (src, tgt)."""
        if not len(self):
            return self
        order = np.lexsort((-self.scores, self.tgt, self.src))
        p, s = self.pairs[order], self.scores[order]
        first = np.ones(len(p), dtype=bool)
        first[1:] = np.any(p[1:] != p[:-1], axis=1)
        return CorrespondenceSet(p[first], s[first], self.level)

    @staticmethod
    def concat(sets, level: Level = Level.POINT) -> CorrespondenceSet:
        sets = list(sets)
        if not sets:
            return CorrespondenceSet(np.zeros((0, 2)), np.zeros(0), level)
        return CorrespondenceSet(
            np.concatenate([s.pairs for s in sets]), np.concatenate([s.scores for s in sets]), level
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(f"# level={self.level.value} count={len(self)}\n")
            for (i, j), s in zip(self.pairs, self.scores):
                f.write(f"{i} {j} {s:.17g}\n")

    @classmethod
    def load(cls, path) -> CorrespondenceSet:
        with open(path) as f:
            header = f.readline().split()
            if not header or header[0] != "#":
                raise FormatError(f"{path}: missing correspondence header")
            meta = dict(kv.split("=", 1) for kv in header[1:])
            rows = [line.split() for line in f if line.strip()]
        if len(rows) != int(meta.get("count", -1)):
            raise FormatError(f"{path}: count mismatch")
        if not rows:
            return cls(np.zeros((0, 2)), np.zeros(0), meta["level"])
        pairs = np.array([[int(r[0]), int(r[1])] for r in rows])
        return cls(pairs, np.array([float(r[2]) for r in rows]), meta["level"])

