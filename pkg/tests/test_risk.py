from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pytest

from corrsense.detectors import ModelMismatchError, TestOutcome
from corrsense.model import ContaminationClass, ProblemInstance
from corrsense.risk import (CSV_COLUMNS, BudgetViolation, Procedure, alternatives_for,
                            estimate_risk, hoeffding_ci)


@dataclass(frozen=True)
class Constant:
    decision: bool
    m: int = 1
    cost: int = 1
    name: str = "constant"

    def __call__(self, instance, strategy_rng, data_rng):
        return TestOutcome(self.decision, float(self.decision), 0.5, 1, self.cost)


@dataclass(frozen=True)
class CoinFlip:
    m: int = 1
    name: str = "coin"

    def __call__(self, instance, strategy_rng, data_rng):
        u = data_rng.random()
        return TestOutcome(u < 0.5, u, 0.5, 1, 1)


CLS = ContaminationClass.disjoint_intervals(20, 4)


def test_always_reject():
    est = estimate_risk(Constant(True), CLS, 0.3, trials=100)
    assert (est.type1_rate, est.type2_worst_rate, est.risk) == (1.0, 0.0, 1.0)


def test_always_accept():
    est = estimate_risk(Constant(False), CLS, 0.3, trials=100)
    assert (est.type1_rate, est.type2_worst_rate, est.risk) == (0.0, 1.0, 1.0)


def test_coin_flip():
    est = estimate_risk(CoinFlip(), CLS, 0.3, trials=5000, master_seed=8)
    assert abs(est.risk - 1.0) <= 2 * est.ci_halfwidth
    assert est.risk == est.type1_rate + est.type2_worst_rate


def test_hoeffding():
    # frozen from sqrt(log(2 / 0.05) / (2 * 5000))
    assert hoeffding_ci(5000, 0.05) == pytest.approx(0.019206455826398416, rel=1e-12)
    assert hoeffding_ci(1, 0.05) == 1.0
    deltas = np.linspace(0.01, 0.99, 50)
    values = [hoeffding_ci(200, d) for d in deltas]
    assert all(a > b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        hoeffding_ci(0, 0.05)
    with pytest.raises(ValueError):
        hoeffding_ci(10, 1.0)


def test_ci_uses_configured_delta():
    est = estimate_risk(Constant(True), CLS, 0.3, trials=400, delta=0.1)
    assert est.ci_halfwidth == pytest.approx(math.sqrt(math.log(20) / 800))


def test_alternatives_for():
    rng = np.random.default_rng(0)
    assert alternatives_for(CLS, True, 7, rng) == [(1, 2, 3, 4)]
    ks = ContaminationClass.k_sets(12, 3)
    alts = alternatives_for(ks, False, 5, rng)
    assert len(alts) == len(set(alts)) == 5
    assert alts[0] == (1, 2, 3)
    assert all(ks.contains(a) for a in alts)
    big = alternatives_for(ContaminationClass.k_sets(400, 40), False, 8, rng)
    assert len(set(big)) == 8 and big[0] == tuple(range(1, 41))
    with pytest.raises(ValueError):
        alternatives_for(ks, False, 0, rng)


def test_uniform_scan_on_intervals_is_exchangeable_in_practice():
    cls = ContaminationClass.intervals(64, 4)
    proc = Procedure("uniform_scan", 4)
    assert not proc.exchangeable(cls)
    est = estimate_risk(proc, cls, 0.35, trials=600, master_seed=2, alternatives=8)
    rates = np.array(est.type2_rates)
    assert len(rates) == 8
    pooled = rates.mean()
    se = math.sqrt(max(pooled * (1 - pooled), 1e-3) / 600)
    assert np.all(np.abs(rates - pooled) <= 4 * se)


def test_parallel_matches_serial():
    cls = ContaminationClass.disjoint_intervals(256, 8)
    proc = Procedure("st_intervals", 8)
    a = estimate_risk(proc, cls, 0.3, trials=200, master_seed=5, workers=1)
    b = estimate_risk(proc, cls, 0.3, trials=200, master_seed=5, workers=3)
    assert a == b
    c = estimate_risk(proc, cls, 0.3, trials=200, master_seed=6, workers=1)
    assert c != a


def test_records_and_histories():
    records: list = []
    est = estimate_risk(Procedure("uniform_sum", 2), CLS, 0.3, trials=100, records=records,
                        keep_history=True)
    assert len(records) == 200
    assert {r["hypothesis"] for r in records} == {"null", "alt"}
    assert all(r["history"].cost == r["coordinate_cost"] <= 40 for r in records)
    assert est.max_cost == 40 and est.budget == 40


def test_preconditions():
    with pytest.raises(ValueError):
        estimate_risk(Constant(True), CLS, 0.3, trials=99)
    with pytest.raises(ModelMismatchError):
        estimate_risk(Procedure("variance_thresholding", 4), ContaminationClass.k_sets(64, 8), 0.3,
                      "normalized", trials=100)
    with pytest.raises(ValueError):
        estimate_risk(Procedure("st_intervals", 4), ContaminationClass.k_sets(64, 8), 0.3, trials=100)
    with pytest.raises(ValueError):
        Procedure("bogus", 3)
    with pytest.raises(ValueError):
        estimate_risk(Procedure("randomized_ksets", 4), ContaminationClass.k_sets(64, 8), 0.3,
                      trials=100)


def test_budget_violation_is_caught():
    with pytest.raises(BudgetViolation):
        estimate_risk(Constant(True, m=1, cost=10**6), CLS, 0.3, trials=100)


def test_summary_row_columns():
    proc = Procedure("uniform_sum", 2)
    est = estimate_risk(proc, CLS, 0.3, trials=100)
    row = est.summary_row(proc, CLS, 0.3, "normalized")
    assert tuple(row) == CSV_COLUMNS
    assert row["class"] == "disjoint_k_intervals" and row["trials"] == 100


def test_procedure_is_callable_on_one_trial():
    inst = ProblemInstance(CLS, 0.3, support=CLS.member(1))
    out = Procedure("st_intervals", 8)(inst, np.random.default_rng(0), np.random.default_rng(1))
    assert out.coordinate_cost <= 8 * 20
