"""Closed-form divergences and minimax bounds."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats
from scipy.special import logsumexp

from .model import ClassKind, ContaminationClass, ModelKind


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class BoundReport:
    value: float
    branch: str = ""
    inputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"value": self.value, "branch": self.branch, "inputs": self.inputs}


def _check_rho(rho: float, upper: float = 1.0) -> None:
    if not 0.0 <= rho < upper:
        raise DomainError(f"rho={rho} outside [0, {upper})")


def kl_normalized(rho: float, k: int) -> float:
    """KL(P_0 || P_S) for the normalized model with ``|S| = k``."""
    _check_rho(rho)
    if k < 2:
        return 0.0
    inv = 1.0 / (1.0 - rho)
    lg = math.log1p(-rho)
    top = 1.0 + rho * (k - 1)
    return 0.5 * (k * (-1.0 + inv + lg) - (inv + lg) + (1.0 / top + math.log(top)))


def kl_unnormalized(rho: float, k: int) -> float:
    """KL(P_0 || P_S) for the unnormalized (spiked) model.

    Nonzero from ``k = 1`` on: a single contaminated coordinate already has
    variance ``1 + rho``.
    """
    if rho < 0:
        raise DomainError(f"rho={rho} must be non-negative")
    if k < 1:
        return 0.0
    x = rho * k
    return 0.5 * (-1.0 + 1.0 / (1.0 + x) + math.log1p(x))


def kl_chi2_scale(rho: float) -> float:
    """KL(chi2_1 || (1 + rho) chi2_1)."""
    if rho <= -1:
        raise DomainError(f"rho={rho} must exceed -1")
    return 0.5 * (math.log1p(rho) - rho / (1.0 + rho))


def d_bound(rho: float, k: int) -> BoundReport:
    _check_rho(rho)
    a = rho / (2.0 * (1.0 - rho))
    b = rho * rho * (k + 1)
    branch = "rho/(2(1-rho))" if a <= b else "rho^2(k+1)"
    return BoundReport(min(a, b), branch, {"rho": rho, "k": k})


def adaptive_lower_bound(rho: float, k: int, m: float) -> BoundReport:
    """``exp(-m k D(rho, k)) / 4``."""
    if m < 0:
        raise DomainError("m must be non-negative")
    d = d_bound(rho, k)
    return BoundReport(math.exp(-m * k * d.value) / 4.0, d.branch, {"rho": rho, "k": k, "m": m})


def class_complexity(contamination: ContaminationClass, budget: int) -> BoundReport:
    kind, n, k = contamination.kind, contamination.n, contamination.k
    if kind is ClassKind.RECTANGLES:
        raise DomainError("class complexity is not available for rectangles")
    value = budget * k / n
    branch = "Mk/n"
    if kind is ClassKind.DISJOINT_K_INTERVALS and n % k:
        value *= 2
        branch = "2Mk/n"
    return BoundReport(value, branch, {**contamination.to_dict(), "M": budget})


def kl_restriction_bound(rho: float, k: int, overlap: int,
                         model: ModelKind = ModelKind.NORMALIZED) -> float:
    """Ceiling on KL(P_0|_A || P_S|_A) in terms of ``|A ∩ S|``."""
    if not 0 <= overlap <= k:
        raise DomainError("overlap must lie in [0, k]")
    if ModelKind(model) is ModelKind.NORMALIZED:
        return d_bound(rho, k).value * overlap
    return min(rho / 2.0, rho * rho * k / 2.0) * overlap


def _interval_overlap_pmf(n: int, k: int) -> dict[int, float]:
    positions = n - k + 1
    counts = {0: 0}
    counts[k] = positions
    for d in range(1, positions):
        z = max(0, k - d)
        counts[z] = counts.get(z, 0) + 2 * (positions - d)
    total = positions * positions
    return {z: c / total for z, c in counts.items() if c}


def overlap_pmf(contamination: ContaminationClass) -> dict[int, float]:
    """Law of ``|S ∩ S'|`` for two independent uniform members."""
    kind, n, k = contamination.kind, contamination.n, contamination.k
    if kind is ClassKind.K_SETS:
        z = np.arange(0, k + 1)
        pmf = stats.hypergeom(n, k, k).pmf(z)
        return {int(a): float(b) for a, b in zip(z, pmf) if b > 0}
    if kind is ClassKind.K_INTERVALS:
        return _interval_overlap_pmf(n, k)
    if kind is ClassKind.DISJOINT_K_INTERVALS:
        blocks = n // k
        pmf = {k: 1.0 / blocks}
        if blocks > 1:
            pmf[0] = 1.0 - 1.0 / blocks
        return pmf
    rows = _interval_overlap_pmf(contamination.n1, contamination.k1)
    cols = _interval_overlap_pmf(contamination.n2, contamination.k2)
    out: dict[int, float] = {}
    for a, pa in rows.items():
        for b, pb in cols.items():
            out[a * b] = out.get(a * b, 0.0) + pa * pb
    return out


def _log_cosh(x: np.ndarray) -> np.ndarray:
    x = np.abs(x)
    return x + np.log1p(np.exp(-2.0 * x)) - math.log(2.0)


def _cosh_terms(contamination: ContaminationClass, scale: float, m: float):
    pmf = overlap_pmf(contamination)
    z = np.array(list(pmf), dtype=float)
    w = np.array(list(pmf.values()))
    return w / w.sum(), m * _log_cosh(scale * z)


def log_mean_cosh_power(contamination: ContaminationClass, scale: float, m: float) -> float:
    """``log E[cosh^m(scale * Z)]`` with ``Z`` the overlap of two uniform members."""
    w, terms = _cosh_terms(contamination, scale, m)
    return float(logsumexp(terms, b=w))


def _cosh_excess(contamination: ContaminationClass, scale: float, m: float) -> float:
    # E[cosh^m] - 1 without cancellation when it is small
    w, terms = _cosh_terms(contamination, scale, m)
    if terms.max() < 30.0:
        return float(np.dot(w, np.expm1(terms)))
    return math.expm1(min(float(logsumexp(terms, b=w)), 700.0))


def nonadaptive_lower_bound(contamination: ContaminationClass, rho: float, m: float,
                            model: ModelKind = ModelKind.NORMALIZED) -> BoundReport:
    """Uniform-sensing lower bound ``1/2 - sqrt(E[cosh^m(c Z)] - 1) / 4``, clipped to ``[0, 1/2]``."""
    _check_rho(rho, 0.9)
    model = ModelKind(model)
    scale = 8.0 * rho / (1.0 - rho) if model is ModelKind.NORMALIZED else 8.0 * rho
    excess = max(_cosh_excess(contamination, scale, m), 0.0)
    value = min(max(0.5 - 0.25 * math.sqrt(excess), 0.0), 0.5)
    return BoundReport(value, "cosh", {**contamination.to_dict(), "rho": rho, "m": m,
                                        "model": model.value})


def h_function(b: float) -> float:
    """``H(b) = b - 1 - log b`` for ``b > 1``."""
    if b <= 1.0:
        raise DomainError(f"H is defined for b > 1, got {b}")
    u = b - 1.0
    return u - math.log1p(u)


def h_inverse(y: float) -> float:
    """Unique ``b >= 1`` with ``H(b) = y``, to absolute tolerance 1e-12."""
    if y < 0:
        raise DomainError("H^{-1} needs y >= 0")
    if y == 0:
        return 1.0

    def f(u):
        return u - math.log1p(u) - y

    hi = max(1.0, 2.0 * y)
    while f(hi) <= 0:
        hi *= 2.0
    u = optimize.brentq(f, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    return 1.0 + u


def _equicorr_terms(d: int, rho: float, model: ModelKind) -> tuple[float, float, float]:
    # log density = -q_coef*q + s_coef*s^2 - logdet/2 - d/2 log(2 pi)
    if ModelKind(model) is ModelKind.NORMALIZED:
        _check_rho(rho)
        top = 1.0 + (d - 1) * rho
        q_coef = 0.5 / (1.0 - rho)
        s_coef = 0.5 * rho / ((1.0 - rho) * top)
        logdet = (d - 1) * math.log1p(-rho) + math.log(top)
    else:
        if rho < 0:
            raise DomainError("rho must be non-negative")
        top = 1.0 + d * rho
        q_coef = 0.5
        s_coef = 0.5 * rho / top
        logdet = math.log(top)
    return q_coef, s_coef, logdet


def equicorr_loglik(row, rho: float, model: ModelKind = ModelKind.NORMALIZED) -> np.ndarray:
    """Log-density of the equicorrelated Gaussian at ``row`` (last axis), in O(d)."""
    row = np.asarray(row, dtype=float)
    d = row.shape[-1]
    if d < 1:
        raise DomainError("row must be non-empty")
    q_coef, s_coef, logdet = _equicorr_terms(d, rho, model)
    q = np.einsum("...i,...i->...", row, row)
    s = row.sum(axis=-1)
    return -q_coef * q + s_coef * s * s - 0.5 * logdet - 0.5 * d * math.log(2 * math.pi)


def optimal_truncation(rho: float, k: int, m: int) -> tuple[int, float]:
    """``argmax_p floor(mk/p) * KL_p`` over ``p in {2..k}`` with its objective."""
    best_p, best = 2, -1.0
    for p in range(2, k + 1):
        value = (m * k // p) * kl_normalized(rho, p)
        if value > best:
            best_p, best = p, value
    return best_p, best


@dataclass(frozen=True)
class Domain:
    lo: float
    hi: float
    lo_closed: bool = False
    hi_closed: bool = False

    def grid(self, size: int, clip: float = 1e6) -> np.ndarray:
        """``size`` evenly spaced points of the domain, infinite ends clipped to ``+-clip``."""
        lo, hi = max(self.lo, -clip), min(self.hi, clip)
        keep_lo = self.lo_closed or lo != self.lo
        keep_hi = self.hi_closed or hi != self.hi
        x = np.linspace(lo, hi, size + (not keep_lo) + (not keep_hi))
        return x[(0 if keep_lo else 1):(None if keep_hi else -1)]


# Elementary inequalities used in the KL computations: name -> (domain, lhs, rhs), lhs <= rhs.
INEQUALITIES = {
    "log(1+x) <= x": (Domain(-1.0, math.inf), lambda x: np.log1p(x), lambda x: x),
    "log(1+x) + 1/(1+x) - 1 <= x^2": (
        Domain(0.0, math.inf), lambda x: np.log1p(x) + 1 / (1 + x) - 1, lambda x: x * x),
    "log(1-x) + 1/(1-x) - 1 <= 2x^2": (
        Domain(0.0, 0.5), lambda x: np.log1p(-x) + 1 / (1 - x) - 1, lambda x: 2 * x * x),
    "-log(1-x) - 1/(1-x) + 1 <= x^2": (
        Domain(-math.inf, 1.0), lambda x: -np.log1p(-x) - 1 / (1 - x) + 1, lambda x: x * x),
    "x^2/8 <= log(1+x) + 1/(1+x) - 1": (
        Domain(-1.0, 1.0, hi_closed=True), lambda x: x * x / 8,
        lambda x: np.log1p(x) + 1 / (1 + x) - 1),
    "log(1+x)/5 <= log(1+x) + 1/(1+x) - 1": (
        Domain(1.0, math.inf, lo_closed=True), lambda x: np.log1p(x) / 5,
        lambda x: np.log1p(x) + 1 / (1 + x) - 1),
}
