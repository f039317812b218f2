"""Hypothesis-testing problem: contamination classes, covariance, sampling.

Coordinates are 1-based throughout, matching ``[n] = {1, ..., n}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Iterator, Optional

import numpy as np


class ModelKind(str, Enum):
    NORMALIZED = "normalized"
    UNNORMALIZED = "unnormalized"


class ClassKind(str, Enum):
    K_SETS = "k_sets"
    K_INTERVALS = "k_intervals"
    DISJOINT_K_INTERVALS = "disjoint_k_intervals"
    RECTANGLES = "rectangles"


class InvalidClassError(ValueError):
    pass


def _unrank_combination(n: int, k: int, index: int) -> tuple[int, ...]:
    # lexicographic order over k-subsets of {1..n}
    out = []
    x = 1
    for remaining in range(k, 0, -1):
        while True:
            c = math.comb(n - x, remaining - 1)
            if index < c:
                break
            index -= c
            x += 1
        out.append(x)
        x += 1
    return tuple(out)


@dataclass(frozen=True)
class ContaminationClass:
    """A class of candidate contaminated sets, each of cardinality ``k``.

    Canonical enumeration order: lexicographic for k-sets, by left endpoint
    for intervals, by block index for disjoint intervals, and row-major over
    the top-left corner for rectangles (coordinates of the ``n1 x n2`` grid
    are embedded row-major, ``(r, c) -> r * n2 + c + 1``).
    """

    kind: ClassKind
    n: int
    k: int
    n1: Optional[int] = None
    n2: Optional[int] = None
    k1: Optional[int] = None
    k2: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ClassKind(self.kind))
        if self.n < 1 or self.k < 1:
            raise InvalidClassError(f"n and k must be positive (n={self.n}, k={self.k})")
        if self.k > self.n:
            raise InvalidClassError(f"k={self.k} exceeds n={self.n}")
        if self.kind is ClassKind.DISJOINT_K_INTERVALS and self.n // self.k < 1:
            raise InvalidClassError("no disjoint interval fits")
        if self.kind is ClassKind.RECTANGLES:
            dims = (self.n1, self.n2, self.k1, self.k2)
            if any(d is None or d < 1 for d in dims):
                raise InvalidClassError("rectangles need positive n1, n2, k1, k2")
            if self.n1 * self.n2 != self.n or self.k1 * self.k2 != self.k:
                raise InvalidClassError("rectangles need n1*n2 == n and k1*k2 == k")
            if self.k1 > self.n1 or self.k2 > self.n2:
                raise InvalidClassError("rectangle larger than grid")

    @classmethod
    def k_sets(cls, n: int, k: int) -> "ContaminationClass":
        return cls(ClassKind.K_SETS, n, k)

    @classmethod
    def intervals(cls, n: int, k: int) -> "ContaminationClass":
        return cls(ClassKind.K_INTERVALS, n, k)

    @classmethod
    def disjoint_intervals(cls, n: int, k: int) -> "ContaminationClass":
        return cls(ClassKind.DISJOINT_K_INTERVALS, n, k)

    @classmethod
    def rectangles(cls, n1: int, n2: int, k1: int, k2: int) -> "ContaminationClass":
        return cls(ClassKind.RECTANGLES, n1 * n2, k1 * k2, n1, n2, k1, k2)

    def size(self) -> int:
        if self.kind is ClassKind.K_SETS:
            return math.comb(self.n, self.k)
        if self.kind is ClassKind.K_INTERVALS:
            return self.n - self.k + 1
        if self.kind is ClassKind.DISJOINT_K_INTERVALS:
            return self.n // self.k
        return (self.n1 - self.k1 + 1) * (self.n2 - self.k2 + 1)

    def member(self, index: int) -> tuple[int, ...]:
        """The ``index``-th member (0-based) in canonical order, as sorted coordinates."""
        size = self.size()
        if not 0 <= index < size:
            raise IndexError(f"member index {index} out of range [0, {size})")
        k = self.k
        if self.kind is ClassKind.K_SETS:
            return _unrank_combination(self.n, k, index)
        if self.kind is ClassKind.K_INTERVALS:
            return tuple(range(index + 1, index + k + 1))
        if self.kind is ClassKind.DISJOINT_K_INTERVALS:
            return tuple(range(index * k + 1, (index + 1) * k + 1))
        ncols = self.n2 - self.k2 + 1
        r0, c0 = divmod(index, ncols)
        return tuple(
            (r0 + dr) * self.n2 + c0 + dc + 1
            for dr in range(self.k1)
            for dc in range(self.k2)
        )

    def members(self) -> Iterator[tuple[int, ...]]:
        for i in range(self.size()):
            yield self.member(i)

    def sample(self, rng: np.random.Generator) -> tuple[int, ...]:
        """A uniformly random member."""
        if self.kind is ClassKind.K_SETS:
            return tuple(sorted(int(c) + 1 for c in rng.choice(self.n, self.k, replace=False)))
        return self.member(int(rng.integers(self.size())))

    def contains(self, subset) -> bool:
        s = tuple(sorted(int(c) for c in subset))
        if len(s) != self.k or len(set(s)) != self.k or s[0] < 1 or s[-1] > self.n:
            return False
        if self.kind is ClassKind.K_SETS:
            return True
        if self.kind is ClassKind.K_INTERVALS:
            return s[-1] - s[0] == self.k - 1
        if self.kind is ClassKind.DISJOINT_K_INTERVALS:
            j, rem = divmod(s[0] - 1, self.k)
            return rem == 0 and j < self.size() and s == self.member(j)
        r0, c0 = divmod(s[0] - 1, self.n2)
        if r0 + self.k1 > self.n1 or c0 + self.k2 > self.n2:
            return False
        return s == self.member(r0 * (self.n2 - self.k2 + 1) + c0)

    def to_dict(self) -> dict:
        d = {"class_kind": self.kind.value, "n": self.n, "k": self.k}
        if self.kind is ClassKind.RECTANGLES:
            d.update(n1=self.n1, n2=self.n2, k1=self.k1, k2=self.k2)
        return d


@dataclass(frozen=True)
class ProblemInstance:
    """A testing problem together with the hypothesis that generates data.

    ``support`` is ``None`` under the null, otherwise the contaminated set.
    """

    contamination: ContaminationClass
    rho: float
    model: ModelKind = ModelKind.NORMALIZED
    support: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "model", ModelKind(self.model))
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if self.support is not None:
            s = tuple(sorted(int(c) for c in self.support))
            if not self.contamination.contains(s):
                raise ValueError(f"support {s} is not a member of the class")
            object.__setattr__(self, "support", s)

    @property
    def n(self) -> int:
        return self.contamination.n

    @property
    def k(self) -> int:
        return self.contamination.k

    @property
    def is_null(self) -> bool:
        return self.support is None

    def null(self) -> "ProblemInstance":
        return ProblemInstance(self.contamination, self.rho, self.model, None)

    def alternative(self, support) -> "ProblemInstance":
        return ProblemInstance(self.contamination, self.rho, self.model, tuple(support))

    @cached_property
    def _mask(self) -> np.ndarray:
        # index 0 unused so coordinates index directly
        mask = np.zeros(self.n + 1, dtype=bool)
        if self.support is not None:
            mask[list(self.support)] = True
        return mask

    def contaminated(self, coords) -> np.ndarray:
        return self._mask[np.asarray(coords)]

    def covariance_entry(self, i: int, j: int) -> float:
        n = self.n
        if not (1 <= i <= n and 1 <= j <= n):
            raise IndexError(f"coordinates ({i}, {j}) outside [1, {n}]")
        in_i, in_j = bool(self._mask[i]), bool(self._mask[j])
        if i == j:
            if in_i and self.model is ModelKind.UNNORMALIZED:
                return 1.0 + self.rho
            return 1.0
        return self.rho if (in_i and in_j) else 0.0

    def covariance_matrix(self, coords) -> np.ndarray:
        """Dense covariance of the coordinates ``coords`` (small problems only)."""
        coords = [int(c) for c in coords]
        return np.array([[self.covariance_entry(i, j) for j in coords] for i in coords])

    def to_dict(self) -> dict:
        return {
            "model": self.model.value,
            **self.contamination.to_dict(),
            "rho": self.rho,
            "truth": "null" if self.support is None else list(self.support),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemInstance":
        kind = ClassKind(d["class_kind"])
        if kind is ClassKind.RECTANGLES:
            contamination = ContaminationClass.rectangles(d["n1"], d["n2"], d["k1"], d["k2"])
        else:
            contamination = ContaminationClass(kind, int(d["n"]), int(d["k"]))
        truth = d.get("truth", "null")
        support = None if truth == "null" else tuple(truth)
        return cls(contamination, float(d["rho"]), ModelKind(d["model"]), support)


def _check_queries(instance: ProblemInstance, queries: np.ndarray) -> None:
    if queries.size == 0 or queries.shape[-1] == 0:
        raise ValueError("empty query")
    if queries.min() < 1 or queries.max() > instance.n:
        raise ValueError(f"query coordinate outside [1, {instance.n}]")
    if queries.shape[-1] > 1 and not np.all(np.diff(queries, axis=-1) > 0):
        raise ValueError("query coordinates must be strictly increasing")


def sample_rounds(instance: ProblemInstance, queries, rng: np.random.Generator) -> np.ndarray:
    """Observe a block of rounds; row ``t`` of ``queries`` is the query set of round ``t``.

    Every round draws a fresh latent vector, through the common-signal form
    ``sqrt(1-rho) Y_i + sqrt(rho) N`` (normalized) or ``Y_i + sqrt(rho) N``
    (unnormalized) on contaminated coordinates. Only queried coordinates are
    generated.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.int64))
    _check_queries(instance, queries)
    rounds, width = queries.shape
    y = rng.standard_normal((rounds, width))
    if instance.support is None or instance.rho == 0.0:
        return y
    common = rng.standard_normal((rounds, 1))
    mask = instance.contaminated(queries)
    sr = math.sqrt(instance.rho)
    if instance.model is ModelKind.NORMALIZED:
        y = np.where(mask, math.sqrt(1.0 - instance.rho) * y + sr * common, y)
    else:
        y = np.where(mask, y + sr * common, y)
    return y


def sample_round(instance: ProblemInstance, query, rng: np.random.Generator) -> np.ndarray:
    """Observe the coordinates ``query`` (sorted) of one fresh latent vector."""
    query = np.asarray(query, dtype=np.int64)
    if query.ndim != 1:
        raise ValueError("a single round takes a one-dimensional query")
    return sample_rounds(instance, query[None, :], rng)[0]
