"""Budgeted sensing protocol: strategies run against sessions that record traces.

A session charges ``|A^t|`` coordinate measurements per round against a
budget ``M``. Queries that do not fit are refused and the session ends; no
empty padding rounds are recorded.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Optional, Protocol

import numpy as np

from .model import ProblemInstance, sample_rounds


class BudgetRefused(Exception):
    """Raised when a round would exceed the remaining budget."""


class ProtocolError(RuntimeError):
    """Raised when a strategy keeps querying after a refusal."""


@dataclass
class Budget:
    total: int
    consumed: int = 0

    def __post_init__(self):
        if self.total < 0:
            raise ValueError("budget must be non-negative")

    @property
    def remaining(self) -> int:
        return self.total - self.consumed

    def charge(self, cost: int) -> None:
        if cost > self.remaining:
            raise BudgetRefused(f"cost {cost} exceeds remaining budget {self.remaining}")
        self.consumed += cost


@dataclass
class RoundBlock:
    """Consecutive rounds sharing a query width. Row ``t`` is one round."""

    queries: np.ndarray
    obs: np.ndarray

    def __len__(self) -> int:
        return self.queries.shape[0]


@dataclass
class History:
    blocks: list[RoundBlock] = field(default_factory=list)

    @property
    def n_rounds(self) -> int:
        return sum(len(b) for b in self.blocks)

    @property
    def cost(self) -> int:
        return int(sum(b.queries.size for b in self.blocks))

    def __len__(self) -> int:
        return self.n_rounds

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for b in self.blocks:
            for q, x in zip(b.queries, b.obs):
                yield q, x

    def rounds(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(self)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All rounds as ``(queries, obs)`` arrays; rounds must share one width."""
        widths = {b.queries.shape[1] for b in self.blocks}
        if len(widths) != 1:
            raise ValueError("rounds have differing query sizes")
        return (np.concatenate([b.queries for b in self.blocks]),
                np.concatenate([b.obs for b in self.blocks]))

    def write_jsonl(self, fh) -> None:
        for t, (q, x) in enumerate(self, start=1):
            fh.write(json.dumps({"t": t, "query": q.tolist(), "obs": x.tolist()}) + "\n")

    @classmethod
    def read_jsonl(cls, fh) -> "History":
        hist = cls()
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if len(rec["query"]) != len(rec["obs"]):
                raise ValueError(f"round {rec['t']}: observations do not cover the query")
            hist.blocks.append(RoundBlock(np.array([rec["query"]], dtype=np.int64),
                                          np.array([rec["obs"]], dtype=float)))
        return hist


class SensingSession:
    """Runs rounds against an instance while enforcing the budget.

    ``measure`` accepts a single query or a block of equal-width queries.
    When a block does not fit, the fitting prefix is observed and recorded,
    the rest is refused with :class:`BudgetRefused`, and the session is
    closed to further queries.
    """

    def __init__(self, instance: ProblemInstance, budget: Budget, rng: np.random.Generator):
        self.instance = instance
        self.budget = budget
        self.rng = rng
        self.history = History()
        self.refused = False

    def measure(self, queries) -> np.ndarray:
        if self.refused:
            raise ProtocolError("query emitted after budget refusal")
        queries = np.asarray(queries, dtype=np.int64)
        single = queries.ndim == 1
        queries = np.atleast_2d(queries)
        width = queries.shape[1]
        if width == 0:
            raise ValueError("empty query")
        fit = min(queries.shape[0], self.budget.remaining // width)
        if fit < queries.shape[0]:
            if fit:
                self._observe(queries[:fit])
            self.refused = True
            raise BudgetRefused(
                f"round of size {width} exceeds remaining budget {self.budget.remaining}")
        obs = self._observe(queries)
        return obs[0] if single else obs

    def _observe(self, queries: np.ndarray) -> np.ndarray:
        obs = sample_rounds(self.instance, queries, self.rng)
        self.budget.charge(queries.size)
        self.history.blocks.append(RoundBlock(queries, obs))
        return obs


class SensingStrategy(Protocol):
    adaptive: bool

    def next_query(self, history: History) -> Optional[np.ndarray]:
        """Next query (1-D) or block of rounds (2-D); ``None`` when done."""


def run_session(strategy: SensingStrategy, instance: ProblemInstance, budget: Budget,
                rng: np.random.Generator) -> History:
    """Drive ``strategy`` until it is done or the budget refuses a round."""
    if budget.total < 1:
        raise ValueError("budget must allow at least one measurement")
    session = SensingSession(instance, budget, rng)
    drive(strategy, session)
    assert session.history.cost <= budget.total
    return session.history


def drive(strategy: SensingStrategy, session: SensingSession) -> bool:
    """Feed the strategy's queries to an open session; False on budget refusal."""
    while True:
        query = strategy.next_query(session.history)
        if query is None:
            return True
        try:
            session.measure(query)
        except BudgetRefused:
            return False


class _BlockStrategy:
    """Emits one precomputed block of rounds, then stops."""

    adaptive = False

    def __init__(self, block: np.ndarray):
        self._block = block
        self._done = False

    @property
    def schedule(self) -> np.ndarray:
        return self._block

    def next_query(self, history: History) -> Optional[np.ndarray]:
        if self._done:
            return None
        self._done = True
        return self._block


def uniform_strategy(n: int, m: int) -> _BlockStrategy:
    """``A^t = [n]`` for ``t = 1..m``."""
    if m < 1:
        raise ValueError("uniform sensing needs m >= 1")
    return _BlockStrategy(np.tile(np.arange(1, n + 1), (m, 1)))


def truncated_coordinates(n: int, k: int, p: int) -> np.ndarray:
    """Union of the p-truncated intervals ``{(j-1)k+1, ..., (j-1)k+p}``."""
    starts = np.arange(n // k) * k
    return (starts[:, None] + np.arange(1, p + 1)[None, :]).ravel()


def truncated_interval_strategy(n: int, k: int, p: int, m: int) -> _BlockStrategy:
    """Measure the first ``p`` coordinates of every disjoint interval ``floor(mk/p)`` times."""
    if not 2 <= p <= k:
        raise ValueError(f"p={p} outside [2, k={k}]")
    if n % k:
        raise ValueError("k must divide n")
    rounds = (m * k) // p
    if rounds < 1:
        raise ValueError("no full round fits the budget")
    return _BlockStrategy(np.tile(truncated_coordinates(n, k, p), (rounds, 1)))


class RandomizedSubsampleStrategy(_BlockStrategy):
    """Query a fixed random subsample ``B`` of ``floor(2np/k)`` coordinates.

    ``B`` is drawn once at construction from the strategy's own stream, so
    the query sequence never depends on observations.
    """

    def __init__(self, n: int, k: int, p: float, m: int, rng: np.random.Generator):
        if not 2 <= p <= k:
            raise ValueError(f"p={p} outside [2, k={k}]")
        size = int(2 * n * p // k)
        if size > n:
            raise ValueError(f"subsample of {size} exceeds n={n}")
        self.subsample = np.sort(rng.choice(n, size, replace=False)) + 1
        self.rounds = int(m * k // (2 * p))
        super().__init__(np.tile(self.subsample, (self.rounds, 1)))


def randomized_subsample_strategy(n, k, p, m, rng) -> RandomizedSubsampleStrategy:
    return RandomizedSubsampleStrategy(n, k, p, m, rng)


def singleton_block(schedule) -> np.ndarray:
    return np.asarray(schedule, dtype=np.int64).reshape(-1, 1)


def singleton_rounds_strategy(schedule) -> _BlockStrategy:
    """One single-coordinate round per schedule entry; each round is a fresh draw."""
    block = singleton_block(schedule)
    if block.shape[0] == 0:
        raise ValueError("empty schedule")
    return _BlockStrategy(block)
