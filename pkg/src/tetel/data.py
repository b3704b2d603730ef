"""Longitudinal data containers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Subject:
    """Responses ``y`` (m,), covariate rows ``X`` (m, q) and times ``t`` (m,) for one subject."""

    y: np.ndarray
    X: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        t = np.asarray(self.t, dtype=float).reshape(-1)
        m = y.size
        if m < 1:
            raise ValueError("a subject needs at least one time point")
        if X.shape[0] != m or t.size != m:
            raise ValueError(f"inconsistent subject sizes: y={m}, X={X.shape}, t={t.size}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(t))):
            raise ValueError("subject data must be finite")
        if m > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("observation times must be strictly increasing within a subject")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "t", t)

    @property
    def m(self) -> int:
        return self.y.size


class LongitudinalDataset:
    """`n` independent subjects stored as zero-padded arrays.

    ``y`` has shape (n, M), ``X`` (n, M, q) and ``t`` (n, M) where ``M`` is the
    largest number of time points; ``sizes[i]`` is the number of valid leading
    entries for subject ``i``. Padded entries are exactly zero.
    """

    def __init__(self, y, X, t, sizes=None):
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        t = np.asarray(t, dtype=float)
        if y.ndim != 2 or X.ndim != 3 or X.shape[:2] != y.shape:
            raise ValueError(f"expected y (n, M) and X (n, M, q); got {y.shape} and {X.shape}")
        if t.ndim == 1:
            t = np.broadcast_to(t, y.shape).copy()
        if t.shape != y.shape:
            raise ValueError(f"times have shape {t.shape}, expected {y.shape}")
        n, M = y.shape
        if n < 1:
            raise ValueError("a dataset needs at least one subject")
        sizes = np.full(n, M, dtype=int) if sizes is None else np.asarray(sizes, dtype=int)
        if sizes.shape != (n,) or np.any(sizes < 1) or np.any(sizes > M):
            raise ValueError("subject sizes must lie in [1, M]")
        mask = np.arange(M)[None, :] < sizes[:, None]
        for name, arr in (("y", y), ("X", X), ("t", t)):
            valid = arr[mask]
            if not np.all(np.isfinite(valid)):
                raise ValueError(f"non-finite values in {name}")
        if M > 1 and np.any((np.diff(t, axis=1) <= 0) & mask[:, 1:]):
            raise ValueError("observation times must be strictly increasing within a subject")
        self.y = np.where(mask, y, 0.0)
        self.X = np.where(mask[..., None], X, 0.0)
        self.t = np.where(mask, t, 0.0)
        self.sizes = sizes
        self.mask = mask
        for arr in (self.y, self.X, self.t, self.sizes, self.mask):
            arr.flags.writeable = False

    @classmethod
    def from_subjects(cls, subjects: Iterable[Subject]) -> "LongitudinalDataset":
        subjects = list(subjects)
        if not subjects:
            raise ValueError("a dataset needs at least one subject")
        q = subjects[0].X.shape[1]
        if any(s.X.shape[1] != q for s in subjects):
            raise ValueError("all subjects must have the same number of covariates")
        M = max(s.m for s in subjects)
        n = len(subjects)
        y = np.zeros((n, M))
        X = np.zeros((n, M, q))
        t = np.zeros((n, M))
        sizes = np.empty(n, dtype=int)
        for i, s in enumerate(subjects):
            y[i, : s.m] = s.y
            X[i, : s.m] = s.X
            t[i, : s.m] = s.t
            sizes[i] = s.m
        return cls(y, X, t, sizes)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def q(self) -> int:
        return self.X.shape[2]

    @property
    def max_m(self) -> int:
        return self.y.shape[1]

    @property
    def balanced(self) -> bool:
        return bool(np.all(self.sizes == self.max_m))

    def subject(self, i: int) -> Subject:
        m = self.sizes[i]
        return Subject(self.y[i, :m], self.X[i, :m], self.t[i, :m])

    @property
    def subjects(self) -> list[Subject]:
        return [self.subject(i) for i in range(self.n)]

    def with_y(self, y) -> "LongitudinalDataset":
        return LongitudinalDataset(y, self.X, self.t, self.sizes)

    def take(self, index: Sequence[int]) -> "LongitudinalDataset":
        index = np.asarray(index)
        return LongitudinalDataset(self.y[index], self.X[index], self.t[index], self.sizes[index])

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"LongitudinalDataset(n={self.n}, q={self.q}, max_m={self.max_m}, balanced={self.balanced})"
