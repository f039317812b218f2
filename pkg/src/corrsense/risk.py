"""Monte Carlo estimation of the worst-case risk of a testing procedure.

Every trial owns a random stream derived from ``(master_seed, hypothesis,
alternative index, trial index)``, so serial and parallel runs agree bit for
bit.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from . import detectors as det
from .model import ClassKind, ContaminationClass, ModelKind, ProblemInstance
from .sensing import Budget, SensingSession, drive, uniform_strategy

PROCEDURES = (
    "uniform_scan",
    "uniform_sum",
    "st_intervals",
    "modified_st_intervals",
    "st_rectangles",
    "randomized_ksets",
    "variance_thresholding",
)

CSV_COLUMNS = ("procedure", "model", "class", "n", "k", "rho", "m", "trials",
               "type1", "type2_worst", "risk", "ci")


class BudgetViolation(AssertionError):
    pass


@dataclass(frozen=True)
class Procedure:
    """A named testing procedure with its tuning, callable on one trial.

    Calling it with ``(instance, strategy_rng, data_rng)`` runs a fresh
    session with budget ``M = m n`` and returns the :class:`TestOutcome`.
    """

    name: str
    m: int
    alpha: float = 0.05
    p: Optional[float] = None
    calibration: str = "monte_carlo"
    n_sims: int = 10_000
    passes: Optional[int] = None
    orientation: str = "likelihood"

    def __post_init__(self):
        if self.name not in PROCEDURES:
            raise ValueError(f"unknown procedure {self.name!r}")
        if self.m < 1:
            raise ValueError("m must be at least 1")

    @property
    def scan_calibration(self) -> det.Calibration:
        if self.calibration == "analytic":
            return det.AnalyticH(self.alpha)
        return det.MonteCarloNull(self.alpha, self.n_sims)

    @property
    def st_options(self) -> dict:
        return {"passes": self.passes, "alpha": self.alpha, "orientation": self.orientation}

    @property
    def uniform(self) -> bool:
        return self.name in ("uniform_scan", "uniform_sum")

    def validate(self, contamination: ContaminationClass, model: ModelKind) -> None:
        """Reject incompatible procedure / class / model combinations before any trial."""
        kind = contamination.kind
        if self.name == "variance_thresholding":
            if ModelKind(model) is not ModelKind.UNNORMALIZED:
                raise det.ModelMismatchError("variance_thresholding needs the unnormalized model")
        if self.name in ("st_intervals", "modified_st_intervals") and \
                kind is not ClassKind.DISJOINT_K_INTERVALS:
            raise ValueError(f"{self.name} needs the disjoint_k_intervals class")
        if self.name == "modified_st_intervals" and contamination.n % contamination.k:
            raise ValueError("modified_st_intervals needs k to divide n")
        if self.name == "st_rectangles" and kind is not ClassKind.RECTANGLES:
            raise ValueError("st_rectangles needs the rectangles class")
        if self.name in ("randomized_ksets", "variance_thresholding") and kind is not ClassKind.K_SETS:
            raise ValueError(f"{self.name} needs the k_sets class")
        if self.name == "randomized_ksets":
            if self.p is None or not 2 <= self.p <= contamination.k:
                raise ValueError("randomized_ksets needs 2 <= p <= k")

    def exchangeable(self, contamination: ContaminationClass) -> bool:
        """Whether every member of the class yields the same risk."""
        kind = contamination.kind
        if self.uniform:
            return kind in (ClassKind.K_SETS, ClassKind.DISJOINT_K_INTERVALS)
        if self.name == "st_rectangles":
            return False
        return True

    def __call__(self, instance: ProblemInstance, strategy_rng: np.random.Generator,
                 data_rng: np.random.Generator) -> det.TestOutcome:
        n, k = instance.n, instance.k
        session = SensingSession(instance, Budget(self.m * n), data_rng)
        rho = instance.rho
        if self.uniform:
            drive(uniform_strategy(n, self.m), session)
            _, samples = session.history.stacked()
            if self.name == "uniform_sum":
                out = det.simple_sum_test(samples, self.alpha)
            else:
                out = det.localized_scan_test(samples, instance.contamination, rho,
                                              self.scan_calibration)
            out.history = session.history
            return out
        if self.name == "st_intervals":
            return det.st_disjoint_intervals(session, n, k, self.m, rho, **self.st_options)
        if self.name == "modified_st_intervals":
            return det.modified_st_disjoint_intervals(session, n, k, self.m, rho,
                                                      **self.st_options)
        if self.name == "st_rectangles":
            return det.st_rectangle_tiles(session, instance.contamination, self.m, rho,
                                          **self.st_options)
        if self.name == "randomized_ksets":
            return det.randomized_ksets_test(session, n, k, self.p, self.m, strategy_rng,
                                             self.alpha, self.scan_calibration)
        return det.variance_thresholding(session, n, k, self.m, rho, strategy_rng,
                                         **self.st_options)


def hoeffding_ci(n: int, delta: float = 0.05) -> float:
    """Two-sided Hoeffding half-width ``sqrt(log(2/delta) / (2N))``, clipped to 1."""
    if n < 1:
        raise ValueError("N must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return min(1.0, math.sqrt(math.log(2.0 / delta) / (2.0 * n)))


def alternatives_for(contamination: ContaminationClass, exchangeable: bool, count: int,
                     rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Contaminated sets to evaluate; the canonical member always comes first."""
    if count < 1:
        raise ValueError("count must be positive")
    canonical = contamination.member(0)
    if exchangeable:
        return [canonical]
    size = contamination.size()
    count = min(count, size)
    if size <= 10 * count or size < 100_000:
        picks = rng.choice(size - 1, count - 1, replace=False) + 1
        return [canonical] + [contamination.member(int(i)) for i in picks]
    chosen = {canonical}
    out = [canonical]
    while len(out) < count:
        s = contamination.sample(rng)
        if s not in chosen:
            chosen.add(s)
            out.append(s)
    return out


@dataclass
class RiskEstimate:
    type1_rate: float
    type2_worst_rate: float
    risk: float
    ci_halfwidth: float
    trials_null: int
    trials_alt: int
    alternatives_evaluated: int
    type2_rates: list = field(default_factory=list)
    delta: float = 0.05
    max_cost: int = 0
    budget: int = 0

    def summary_row(self, procedure: Procedure, contamination: ContaminationClass,
                    rho: float, model: ModelKind) -> dict:
        return {
            "procedure": getattr(procedure, "name", type(procedure).__name__),
            "model": ModelKind(model).value,
            "class": contamination.kind.value,
            "n": contamination.n,
            "k": contamination.k,
            "rho": rho,
            "m": procedure.m,
            "trials": self.trials_null,
            "type1": self.type1_rate,
            "type2_worst": self.type2_worst_rate,
            "risk": self.risk,
            "ci": self.ci_halfwidth,
        }

    def to_dict(self) -> dict:
        return asdict(self)


def trial_seed(master_seed: int, hypothesis: int, alt_index: int, trial: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=(hypothesis, alt_index, trial))


def _run_trials(procedure: Procedure, instance: ProblemInstance, hypothesis: int, alt_index: int,
                trials: range, master_seed: int, keep_history: bool) -> list[dict]:
    out = []
    budget = procedure.m * instance.n
    for t in trials:
        strategy_seq, data_seq = trial_seed(master_seed, hypothesis, alt_index, t).spawn(2)
        outcome = procedure(instance, np.random.default_rng(strategy_seq),
                            np.random.default_rng(data_seq))
        if outcome.coordinate_cost > budget:
            raise BudgetViolation(
                f"trial {t}: cost {outcome.coordinate_cost} exceeds budget {budget}")
        rec = {"hypothesis": "null" if hypothesis == 0 else "alt", "alt_index": alt_index,
               "trial": t, **outcome.to_dict()}
        if keep_history:
            rec["history"] = outcome.history
        out.append(rec)
    return out


def _chunks(total: int, parts: int) -> list[range]:
    step = max(1, math.ceil(total / parts))
    return [range(lo, min(total, lo + step)) for lo in range(0, total, step)]


def estimate_risk(procedure: Procedure, contamination: ContaminationClass, rho: float,
                  model: Union[ModelKind, str] = ModelKind.NORMALIZED, trials: int = 400, *,
                  alternatives: Union[str, int] = "canonical", delta: float = 0.05,
                  master_seed: int = 0, workers: int = 1, records: Optional[list] = None,
                  keep_history: bool = False) -> RiskEstimate:
    """Estimate ``P_0(reject) + max_S P_S(accept)`` with ``trials`` runs per hypothesis.

    ``procedure`` is a :class:`Procedure` or any picklable callable
    ``(instance, strategy_rng, data_rng) -> TestOutcome`` with an ``m``
    attribute; ``validate`` and ``exchangeable`` are used when present.

    ``alternatives`` is ``"canonical"`` (use the class's first member when the
    procedure is exchangeable over the class, else 8 sampled members) or a
    count of sampled members. Per-trial records are appended to ``records``
    when given.
    """
    if trials < 100:
        raise ValueError("need at least 100 trials per hypothesis")
    model = ModelKind(model)
    if hasattr(procedure, "validate"):
        procedure.validate(contamination, model)
    null = ProblemInstance(contamination, rho, model)
    exchangeable = (procedure.exchangeable(contamination)
                    if hasattr(procedure, "exchangeable") else True)
    count = 8 if alternatives == "canonical" else int(alternatives)
    alt_rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(2,)))
    supports = alternatives_for(contamination, exchangeable, count, alt_rng)

    jobs = [(null, 0, 0)] + [(null.alternative(s), 1, i) for i, s in enumerate(supports)]
    tasks = [(inst, h, i, chunk) for inst, h, i in jobs for chunk in _chunks(trials, max(1, workers))]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_trials, procedure, inst, h, i, chunk, master_seed,
                                   keep_history) for inst, h, i, chunk in tasks]
            results = [f.result() for f in futures]
    else:
        results = [_run_trials(procedure, inst, h, i, chunk, master_seed, keep_history)
                   for inst, h, i, chunk in tasks]
    flat = [rec for chunk in results for rec in chunk]
    if records is not None:
        records.extend(flat)

    null_rejects = [r["reject"] for r in flat if r["hypothesis"] == "null"]
    type1 = float(np.mean(null_rejects))
    type2 = []
    for i in range(len(supports)):
        accepts = [not r["reject"] for r in flat if r["hypothesis"] == "alt" and r["alt_index"] == i]
        type2.append(float(np.mean(accepts)))
    worst = max(type2)
    return RiskEstimate(
        type1_rate=type1,
        type2_worst_rate=worst,
        risk=type1 + worst,
        ci_halfwidth=hoeffding_ci(trials, delta),
        trials_null=trials,
        trials_alt=trials,
        alternatives_evaluated=len(supports),
        type2_rates=type2,
        delta=delta,
        max_cost=max(r["coordinate_cost"] for r in flat),
        budget=procedure.m * contamination.n,
    )
