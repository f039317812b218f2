"""Detection procedures: the uniform scan and sum tests plus sequential thresholding variants."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Optional, Protocol, Union

import numpy as np
from scipy import stats

from .divergence import equicorr_loglik, _equicorr_terms, h_inverse
from .model import ClassKind, ContaminationClass, ModelKind
from .sensing import (BudgetRefused, RandomizedSubsampleStrategy, SensingSession, drive,
                      singleton_block, truncated_coordinates)

ENUMERATION_CAP = 2_000_000
GREEDY_RESTARTS = 20
DEFAULT_MEDIAN_SIMS = 100_000
CALIBRATION_SEED = 20140601


class Termination(str, Enum):
    COMPLETED = "completed"
    BUDGET_STOP = "budget_stop"
    SIZE_STOP = "size_stop"


class ModelMismatchError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass
class TestOutcome:
    reject: bool
    statistic: float
    threshold: float
    rounds_used: int = 0
    coordinate_cost: int = 0
    termination: Termination = Termination.COMPLETED
    approximate: bool = False
    history: object = field(default=None, repr=False, compare=False)

    __test__ = False

    def to_dict(self) -> dict:
        return {
            "reject": bool(self.reject),
            "statistic": float(self.statistic),
            "threshold": float(self.threshold),
            "rounds_used": int(self.rounds_used),
            "coordinate_cost": int(self.coordinate_cost),
            "termination": self.termination.value,
            "approximate": bool(self.approximate),
        }


def _session_outcome(session: SensingSession, reject, statistic, threshold,
                     termination=Termination.COMPLETED, approximate=False) -> TestOutcome:
    return TestOutcome(bool(reject), float(statistic), float(threshold),
                       session.history.n_rounds, session.budget.consumed, termination,
                       approximate, session.history)


# ---------------------------------------------------------------------------
# localized squared sum (scan) statistic

@dataclass(frozen=True)
class ScanStatistic:
    value: float
    exact: bool = True


def _kset_exact(gram: np.ndarray, k: int) -> float:
    q = gram.shape[0]
    diag = np.diag(gram)
    if k == 1:
        return float(diag.max())
    if k == 2:
        iu = np.triu_indices(q, 1)
        return float((diag[iu[0]] + diag[iu[1]] + 2 * gram[iu]).max())
    best = -np.inf
    combos = itertools.combinations(range(q), k)
    chunk = max(1, 200_000 // (k * k))
    while True:
        block = np.fromiter(itertools.chain.from_iterable(itertools.islice(combos, chunk)),
                            dtype=np.int64)
        if block.size == 0:
            return float(best)
        idx = block.reshape(-1, k)
        vals = gram[idx[:, :, None], idx[:, None, :]].sum(axis=(1, 2))
        best = max(best, float(vals.max()))


def _kset_greedy(gram: np.ndarray, k: int, rng: np.random.Generator) -> float:
    q = gram.shape[0]
    diag = np.diag(gram)
    best = -np.inf
    for _ in range(GREEDY_RESTARTS):
        inside = np.zeros(q, dtype=bool)
        inside[rng.choice(q, k, replace=False)] = True
        while True:
            v = gram[:, inside].sum(axis=1)
            a_idx = np.flatnonzero(inside)
            b_idx = np.flatnonzero(~inside)
            # gain of swapping a out and b in
            gain = (diag[b_idx][None, :] + 2 * v[b_idx][None, :]
                    - 2 * gram[np.ix_(a_idx, b_idx)]
                    + diag[a_idx][:, None] - 2 * v[a_idx][:, None])
            i, j = np.unravel_index(np.argmax(gain), gain.shape)
            if gain[i, j] <= 1e-12:
                break
            inside[a_idx[i]] = False
            inside[b_idx[j]] = True
        best = max(best, float(gram[np.ix_(inside, inside)].sum()))
    return best


def localized_scan_statistic(samples, contamination: ContaminationClass,
                             rng: Optional[np.random.Generator] = None) -> ScanStatistic:
    """``max_S sum_t (sum_{i in S} X_i^t)^2`` over the class.

    ``samples`` has one row per round and one column per coordinate of the
    class's ambient space. k-set classes larger than the enumeration cap are
    maximised by swap ascent and flagged inexact.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    m, q = x.shape
    if q != contamination.n:
        raise ValueError(f"class over {contamination.n} coordinates, samples cover {q}")
    kind, k = contamination.kind, contamination.k
    if kind is ClassKind.K_INTERVALS:
        c = np.concatenate([np.zeros((m, 1)), np.cumsum(x, axis=1)], axis=1)
        windows = c[:, k:] - c[:, :-k]
        return ScanStatistic(float((windows ** 2).sum(axis=0).max()))
    if kind is ClassKind.DISJOINT_K_INTERVALS:
        blocks = contamination.size()
        sums = x[:, :blocks * k].reshape(m, blocks, k).sum(axis=2)
        return ScanStatistic(float((sums ** 2).sum(axis=0).max()))
    if kind is ClassKind.RECTANGLES:
        n1, n2, k1, k2 = contamination.n1, contamination.n2, contamination.k1, contamination.k2
        grid = x.reshape(m, n1, n2)
        c = np.zeros((m, n1 + 1, n2 + 1))
        c[:, 1:, 1:] = grid.cumsum(axis=1).cumsum(axis=2)
        w = c[:, k1:, k2:] - c[:, :-k1, k2:] - c[:, k1:, :-k2] + c[:, :-k1, :-k2]
        return ScanStatistic(float((w ** 2).sum(axis=0).max()))
    gram = x.T @ x
    if contamination.size() <= ENUMERATION_CAP:
        return ScanStatistic(_kset_exact(gram, k))
    rng = rng if rng is not None else np.random.default_rng(CALIBRATION_SEED)
    return ScanStatistic(_kset_greedy(gram, k, rng), exact=False)


@dataclass(frozen=True)
class MonteCarloNull:
    """Threshold = empirical (1 - alpha) quantile of the statistic over null datasets."""

    alpha: float = 0.05
    n_sims: int = 10_000
    seed: int = CALIBRATION_SEED


@dataclass(frozen=True)
class AnalyticH:
    """Threshold ``k m H^{-1}(2 log(|C| / alpha) / m)`` from the chi-square tail bound."""

    alpha: float = 0.05


Calibration = Union[MonteCarloNull, AnalyticH]


def _simulate_null_scan(contamination: ContaminationClass, m: int, n_sims: int,
                        rng: np.random.Generator) -> np.ndarray:
    if contamination.kind is ClassKind.DISJOINT_K_INTERVALS:
        # block sums are independent N(0, k): the statistic is k * max of chi2_m
        blocks = contamination.size()
        out = np.empty(n_sims)
        step = max(1, 2_000_000 // blocks)
        for lo in range(0, n_sims, step):
            hi = min(n_sims, lo + step)
            out[lo:hi] = rng.chisquare(m, size=(hi - lo, blocks)).max(axis=1)
        return contamination.k * out
    return np.array([
        localized_scan_statistic(rng.standard_normal((m, contamination.n)), contamination, rng).value
        for _ in range(n_sims)
    ])


@lru_cache(maxsize=256)
def scan_threshold(contamination: ContaminationClass, m: int, calibration: Calibration) -> float:
    """Rejection threshold for the scan statistic with ``m`` rounds."""
    if isinstance(calibration, AnalyticH):
        b = h_inverse(2.0 * math.log(contamination.size() / calibration.alpha) / m)
        return contamination.k * m * b
    if calibration.n_sims < 10.0 / calibration.alpha:
        raise CalibrationError(
            f"n_sims={calibration.n_sims} below 10/alpha={10.0 / calibration.alpha:g}")
    rng = np.random.default_rng(calibration.seed)
    null = _simulate_null_scan(contamination, m, calibration.n_sims, rng)
    return float(np.quantile(null, 1.0 - calibration.alpha, method="higher"))


def localized_scan_test(samples, contamination: ContaminationClass, rho: float = 0.0,
                        calibration: Calibration = MonteCarloNull()) -> TestOutcome:
    """Reject when the scan statistic exceeds its calibrated threshold.

    ``rho`` is accepted for interface symmetry; neither calibration uses it.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.shape[0] < 1:
        raise ValueError("need at least one round")
    stat = localized_scan_statistic(x, contamination)
    thr = scan_threshold(contamination, x.shape[0], calibration)
    return TestOutcome(stat.value > thr, stat.value, thr, x.shape[0], x.size,
                       approximate=not stat.exact)


def simple_sum_test(samples, alpha: float = 0.05) -> TestOutcome:
    """Reject when ``sum_t (sum_i X_i^t)^2 > n * chi2_m quantile(1 - alpha)``."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    m, n = x.shape
    stat = float((x.sum(axis=1) ** 2).sum())
    thr = n * float(stats.chi2.ppf(1.0 - alpha, m))
    return TestOutcome(stat > thr, stat, thr, m, x.size)


# ---------------------------------------------------------------------------
# row likelihood models for sequential thresholding

class RowLikelihoodModel(Protocol):
    dim: int
    monotone: bool

    def log_lr(self, batch: np.ndarray) -> np.ndarray:
        """``sum_t log f1(z^t) - log f0(z^t)`` for a batch of shape (rows, reps, dim)."""

    def sample_null(self, shape: tuple, rng: np.random.Generator) -> np.ndarray:
        """Draws from f0 of shape ``shape + (dim,)``."""


@dataclass(frozen=True)
class EquicorrelatedRows:
    """f0 = N(0, I_d); f1 = equicorrelated Gaussian of the given model kind.

    In the unnormalized model the log-LR is increasing in ``sum_t s_t^2`` with
    ``s_t`` the row sum, whose null law is ``d * chi2_reps``.
    """

    dim: int
    rho: float
    model: ModelKind = ModelKind.NORMALIZED

    @property
    def monotone(self) -> bool:
        return ModelKind(self.model) is ModelKind.UNNORMALIZED

    def _coefs(self):
        q_coef, s_coef, logdet = _equicorr_terms(self.dim, self.rho, self.model)
        return q_coef - 0.5, s_coef, -0.5 * logdet

    def log_lr_from_sums(self, q_total, s2_total, reps: int):
        a, b, c = self._coefs()
        return -a * q_total + b * s2_total + reps * c

    def log_lr(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=float)
        q = np.einsum("rtd,rtd->r", batch, batch)
        s2 = (batch.sum(axis=2) ** 2).sum(axis=1)
        return self.log_lr_from_sums(q, s2, batch.shape[1])

    def log_lr_dense(self, batch: np.ndarray) -> np.ndarray:
        """Same quantity through per-observation log-densities."""
        batch = np.asarray(batch, dtype=float)
        f1 = equicorr_loglik(batch, self.rho, self.model)
        f0 = -0.5 * (batch ** 2).sum(axis=-1) - 0.5 * self.dim * math.log(2 * math.pi)
        return (f1 - f0).sum(axis=1)

    def sample_null(self, shape, rng):
        return rng.standard_normal(tuple(shape) + (self.dim,))

    def simulate_null_log_lr(self, reps: int, size: int, rng: np.random.Generator) -> np.ndarray:
        # null: sum_t s_t^2 / d ~ chi2_reps independent of sum_t q_t - s_t^2/d ~ chi2_{reps(d-1)}
        v = rng.chisquare(reps, size)
        u = rng.chisquare(reps * (self.dim - 1), size) if self.dim > 1 else np.zeros(size)
        return self.log_lr_from_sums(u + v, self.dim * v, reps)

    def statistic(self, batch: np.ndarray) -> np.ndarray:
        return (np.asarray(batch).sum(axis=2) ** 2).sum(axis=1)

    def statistic_null_median(self, reps: int) -> float:
        return self.dim * float(stats.chi2.median(reps))

    def log_lr_from_statistic(self, stat, reps: int):
        _, b, c = self._coefs()
        return b * np.asarray(stat) + reps * c


@dataclass(frozen=True)
class ChiSquareScale:
    """Squared single coordinates: f0 = chi2_1, f1 = (1 + rho) chi2_1.

    Rows are raw coordinate values; the log-LR is increasing in ``sum_t x_t^2``,
    whose null law is ``chi2_reps``.
    """

    rho: float
    dim: int = 1
    monotone: bool = True

    def statistic(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=float)
        return (batch ** 2).sum(axis=(1, 2))

    def log_lr_from_statistic(self, stat, reps: int):
        r = self.rho
        return -0.5 * reps * math.log1p(r) + r / (2.0 * (1.0 + r)) * np.asarray(stat)

    def log_lr(self, batch: np.ndarray) -> np.ndarray:
        return self.log_lr_from_statistic(self.statistic(batch), np.asarray(batch).shape[1])

    def log_lr_dense(self, batch: np.ndarray) -> np.ndarray:
        y = np.asarray(batch, dtype=float)[..., 0] ** 2
        f0 = stats.chi2.logpdf(y, 1)
        f1 = stats.chi2.logpdf(y / (1.0 + self.rho), 1) - math.log1p(self.rho)
        return (f1 - f0).sum(axis=1)

    def statistic_null_median(self, reps: int) -> float:
        return float(stats.chi2.median(reps))

    def sample_null(self, shape, rng):
        return rng.standard_normal(tuple(shape) + (1,))

    def simulate_null_log_lr(self, reps: int, size: int, rng: np.random.Generator) -> np.ndarray:
        return self.log_lr_from_statistic(rng.chisquare(reps, size), reps)


def null_median_lr(model: RowLikelihoodModel, reps: int, rng: Optional[np.random.Generator] = None,
                   n_sims: int = DEFAULT_MEDIAN_SIMS) -> float:
    """Median of the log-LR of ``reps`` null observations of one row.

    Exact through the sufficient statistic when the model is monotone in one;
    otherwise the empirical median over ``n_sims`` simulated null batches.
    """
    if reps < 1:
        raise ValueError("reps must be positive")
    if getattr(model, "monotone", False):
        return float(model.log_lr_from_statistic(model.statistic_null_median(reps), reps))
    if n_sims < 1000:
        raise ValueError("n_sims must be at least 1000")
    rng = rng if rng is not None else np.random.default_rng(CALIBRATION_SEED)
    if hasattr(model, "simulate_null_log_lr"):
        llr = model.simulate_null_log_lr(reps, n_sims, rng)
    else:
        llr = model.log_lr(model.sample_null((n_sims, reps), rng))
    return float(np.median(llr))


@lru_cache(maxsize=512)
def cached_null_median(model: RowLikelihoodModel, reps: int, n_sims: int = DEFAULT_MEDIAN_SIMS,
                       seed: int = CALIBRATION_SEED) -> float:
    return null_median_lr(model, reps, np.random.default_rng(seed), n_sims)


# ---------------------------------------------------------------------------
# row access for sequential thresholding

class RowSampler(Protocol):
    n_rows: int
    dim: int
    session: SensingSession

    def observe(self, rows: np.ndarray, reps: int) -> np.ndarray:
        """``reps`` fresh observations of each row, shape (len(rows), reps, dim)."""


class GroupRows:
    """Rows are fixed coordinate groups observed jointly in each round."""

    def __init__(self, session: SensingSession, groups):
        self.session = session
        self.groups = np.asarray(groups, dtype=np.int64)
        self.n_rows, self.dim = self.groups.shape

    def observe(self, rows, reps):
        flat = self.groups[rows].ravel()
        order = np.argsort(flat, kind="stable")
        obs_sorted = self.session.measure(np.tile(flat[order], (reps, 1)))
        obs = np.empty_like(obs_sorted)
        obs[:, order] = obs_sorted
        return obs.reshape(reps, len(rows), self.dim).transpose(1, 0, 2)


class SingletonRows:
    """Rows are single coordinates; every observation is its own one-coordinate round."""

    dim = 1

    def __init__(self, session: SensingSession, coords):
        self.session = session
        self.coords = np.asarray(coords, dtype=np.int64)
        self.n_rows = len(self.coords)

    def observe(self, rows, reps):
        obs = self.session.measure(singleton_block(np.repeat(self.coords[rows], reps)))
        return obs.reshape(len(rows), reps, 1)


def default_passes(n_rows: int, alpha: float = 0.05) -> int:
    """``ceil(log2(n_rows / alpha))``: null false-survival union bound ``n_rows / 2^K <= alpha``."""
    return max(1, math.ceil(math.log2(n_rows / alpha)))


def sequential_thresholding(rows: RowSampler, reps_total: int, model: RowLikelihoodModel, *,
                            passes: Optional[int] = None, alpha: float = 0.05,
                            size_cap: Optional[float] = None, orientation: str = "likelihood",
                            gamma: Optional[float] = None, n_sims: int = DEFAULT_MEDIAN_SIMS,
                            calibration_seed: int = CALIBRATION_SEED) -> TestOutcome:
    """Multi-pass halving of the row set at the null median of the log-LR.

    Each pass takes ``reps_total // 4`` fresh observations of every surviving
    row and keeps rows whose statistic exceeds the null median. Detection is
    called when rows survive every pass; the statistic is the final survivor
    count (zero after an early stop). The run stops without detection when
    the cumulative survivor count exceeds ``size_cap`` (default twice the row
    count) or when the session budget refuses a pass.

    ``orientation="likelihood"`` scores rows by ``log f1 - log f0``;
    ``"inverted"`` scores by ``log f0 - log f1`` and exists for comparison only.
    """
    n_rows = rows.n_rows
    if n_rows < 2:
        raise ValueError("need at least two rows")
    reps = reps_total // 4
    if reps < 1:
        raise ValueError(f"reps_total={reps_total} leaves no observations per pass")
    if orientation not in ("likelihood", "inverted"):
        raise ValueError(f"unknown orientation {orientation!r}")
    passes = default_passes(n_rows, alpha) if passes is None else int(passes)
    size_cap = 2 * n_rows if size_cap is None else size_cap
    if gamma is None:
        gamma = cached_null_median(model, reps, n_sims, calibration_seed)
    sign = 1.0 if orientation == "likelihood" else -1.0
    threshold = sign * gamma

    session = rows.session
    surviving = np.arange(n_rows)
    cumulative = 0
    for _ in range(passes):
        try:
            batch = rows.observe(surviving, reps)
        except BudgetRefused:
            return _session_outcome(session, False, 0, 0, Termination.BUDGET_STOP)
        score = sign * model.log_lr(batch)
        surviving = surviving[score > threshold]
        cumulative += len(surviving)
        if cumulative > size_cap:
            return _session_outcome(session, False, 0, 0, Termination.SIZE_STOP)
        if len(surviving) == 0:
            break
    return _session_outcome(session, len(surviving) > 0, len(surviving), 0)


def _interval_groups(n: int, k: int, width: int) -> np.ndarray:
    return truncated_coordinates(n, k, width).reshape(n // k, width)


def st_disjoint_intervals(session: SensingSession, n: int, k: int, m: int, rho: float,
                          **st_options) -> TestOutcome:
    """Sequential thresholding with one row per disjoint interval (``d = k``, ``m~ = m``)."""
    model = EquicorrelatedRows(k, rho, session.instance.model)
    rows = GroupRows(session, _interval_groups(n, k, k))
    return sequential_thresholding(rows, m, model, **st_options)


def truncation_width(rho: float, k: int) -> int:
    """Coordinates kept per interval: ``min(k, ceil(1/rho))`` when ``rho k > 1``, else ``k``."""
    if rho * k > 1:
        return max(2, min(k, math.ceil(1.0 / rho)))
    return k


def modified_st_disjoint_intervals(session: SensingSession, n: int, k: int, m: int, rho: float,
                                   **st_options) -> TestOutcome:
    """Sequential thresholding on p-truncated intervals with ``floor(mk/p)`` measurements."""
    if n % k:
        raise ValueError("k must divide n")
    p = truncation_width(rho, k)
    if p == k:
        return st_disjoint_intervals(session, n, k, m, rho, **st_options)
    model = EquicorrelatedRows(p, rho, session.instance.model)
    rows = GroupRows(session, _interval_groups(n, k, p))
    return sequential_thresholding(rows, (m * k) // p, model, **st_options)


def rectangle_tiles(contamination: ContaminationClass) -> np.ndarray:
    """Disjoint ``k1 x k2`` tiles of the grid, one row of coordinates per tile."""
    if contamination.kind is not ClassKind.RECTANGLES:
        raise ValueError("tiles need a rectangle class")
    n1, n2, k1, k2 = contamination.n1, contamination.n2, contamination.k1, contamination.k2
    tiles = []
    for r0 in range(0, n1 - k1 + 1, k1):
        for c0 in range(0, n2 - k2 + 1, k2):
            tiles.append([(r0 + dr) * n2 + c0 + dc + 1 for dr in range(k1) for dc in range(k2)])
    return np.array(tiles, dtype=np.int64)


def st_rectangle_tiles(session: SensingSession, contamination: ContaminationClass, m: int,
                       rho: float, **st_options) -> TestOutcome:
    """Sequential thresholding over the disjoint tiling of a rectangle class."""
    tiles = rectangle_tiles(contamination)
    model = EquicorrelatedRows(tiles.shape[1], rho, session.instance.model)
    return sequential_thresholding(GroupRows(session, tiles), m, model, **st_options)


def randomized_ksets_test(session: SensingSession, n: int, k: int, p: float, m: int,
                          strategy_rng: np.random.Generator, alpha: float = 0.05,
                          calibration: Optional[Calibration] = None) -> TestOutcome:
    """Scan test for ``floor(p)``-sets on a random subsample of ``floor(2np/k)`` coordinates."""
    strategy = RandomizedSubsampleStrategy(n, k, p, m, strategy_rng)
    if strategy.rounds < 1:
        raise ValueError("budget allows no round on the subsample")
    if not drive(strategy, session):
        return _session_outcome(session, False, 0.0, 0.0, Termination.BUDGET_STOP)
    _, samples = session.history.stacked()
    local = ContaminationClass.k_sets(len(strategy.subsample), int(math.floor(p)))
    calibration = calibration if calibration is not None else MonteCarloNull(alpha)
    out = localized_scan_test(samples, local, session.instance.rho, calibration)
    return _session_outcome(session, out.reject, out.statistic, out.threshold,
                            approximate=out.approximate)


def variance_subsample_size(n: int, k: int) -> tuple[int, int]:
    """``(p, floor(2np/k))`` with ``p = max(2, ceil(log log2 n))``."""
    p = max(2, math.ceil(math.log(math.log2(n)))) if n > 2 else 2
    return p, min(n, (2 * n * p) // k)


def variance_thresholding(session: SensingSession, n: int, k: int, m: int, rho: float,
                          strategy_rng: np.random.Generator, **st_options) -> TestOutcome:
    """Sequential thresholding on squared single coordinates of a random subsample.

    Only meaningful in the unnormalized model, where contaminated coordinates
    have variance ``1 + rho``.
    """
    if session.instance.model is not ModelKind.UNNORMALIZED:
        raise ModelMismatchError("variance thresholding needs the unnormalized model")
    p, size = variance_subsample_size(n, k)
    coords = np.sort(strategy_rng.choice(n, size, replace=False)) + 1
    reps_total = (m * k) // (2 * p)
    return sequential_thresholding(SingletonRows(session, coords), reps_total,
                                   ChiSquareScale(rho), **st_options)
