"""Renyi-DP accounting for the sampled Gaussian mechanism.

Per-round RDP at integer order alpha is ``log(A_alpha) / (alpha - 1)`` where
``A_alpha = sum_k C(alpha, k) (1-q)^(alpha-k) q^k exp((k^2 - k) / (2 sigma^2))``.
Rounds compose additively, the model and loss channels add, and the total is
converted to (epsilon, delta) with the tighter hypothesis-testing conversion
``R + ln((alpha-1)/alpha) - (ln delta + ln alpha) / (alpha - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import InfeasibleBudgetError

DEFAULT_ORDERS = tuple(range(2, 257))


@dataclass(frozen=True)
class RdpCurve:
    """RDP values on an integer order grid.

    A curve also remembers itself as an integer combination of per-release
    base curves, and ``values`` is always evaluated from that combination in a
    canonical order. This makes composition exactly linear:
    ``compose(c, a + b)`` and ``add_curves(compose(c, a), compose(c, b))``
    agree bit for bit.
    """
    orders: tuple
    values: np.ndarray  # epsilon(alpha) for each order
    terms: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (len(self.orders),):
            raise ValueError("orders and values differ in length")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("RDP values must be finite and nonnegative")
        orders = tuple(int(a) for a in self.orders)
        if any(a < 2 for a in orders):
            raise ValueError("RDP orders must be integers >= 2")
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "values", vals)
        if self.terms is None:
            terms = ((vals.tobytes(), 1),) if vals.any() else ()
            object.__setattr__(self, "terms", terms)

    @classmethod
    def zero(cls, orders: Sequence[int] = DEFAULT_ORDERS) -> "RdpCurve":
        return cls(tuple(orders), np.zeros(len(orders)))

    @classmethod
    def _from_terms(cls, orders: tuple, counts: dict) -> "RdpCurve":
        terms = tuple(sorted((k, n) for k, n in counts.items() if n))
        acc = np.zeros(len(orders))
        for key, n in terms:
            acc = acc + n * np.frombuffer(key, dtype=float)
        return cls(orders, acc, terms)


@dataclass(frozen=True)
class PrivacyParams:
    q: float
    sigma: float
    T: int
    delta: float

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ValueError("q must lie in (0, 1]")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


def sgm_rdp_order(q: float, sigma: float, alpha: int) -> float:
    """RDP of one sampled-Gaussian release at integer order alpha."""
    if not 0 <= q <= 1:
        raise ValueError("q must lie in [0, 1]")
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    if int(alpha) != alpha or alpha < 2:
        raise ValueError("alpha must be an integer >= 2")
    alpha = int(alpha)
    if q == 0:
        return 0.0
    if q == 1:
        return alpha / (2 * sigma**2)
    k = np.arange(alpha + 1, dtype=float)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        log_terms = (
            gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
            + k * math.log(q) + (alpha - k) * math.log1p(-q)
            + (k * k - k) / (2 * sigma**2)
        )
        log_a = float(logsumexp(log_terms))
    if not math.isfinite(log_a):
        raise OverflowError(f"log A_alpha is not finite for q={q}, sigma={sigma}, alpha={alpha}")
    # A_alpha >= 1 analytically; clip rounding noise around zero
    return max(log_a, 0.0) / (alpha - 1)


@lru_cache(maxsize=256)
def _sgm_curve_cached(q: float, sigma: float, orders: tuple) -> tuple:
    return tuple(sgm_rdp_order(q, sigma, a) for a in orders)


def sgm_curve(q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    """Per-round RDP curve of the sampled Gaussian mechanism."""
    orders = tuple(int(a) for a in orders)
    return RdpCurve(orders, np.array(_sgm_curve_cached(float(q), float(sigma), orders)))


def compose(curve: RdpCurve, rounds: int) -> RdpCurve:
    """T-fold self-composition."""
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    return RdpCurve._from_terms(curve.orders, {k: n * rounds for k, n in curve.terms})


def add_curves(a: RdpCurve, b: RdpCurve) -> RdpCurve:
    if a.orders != b.orders:
        raise ValueError("RDP curves are defined on different order grids")
    counts = dict(a.terms)
    for k, n in b.terms:
        counts[k] = counts.get(k, 0) + n
    return RdpCurve._from_terms(a.orders, counts)


def conversion_terms(orders: Sequence[int], delta: float) -> np.ndarray:
    al = np.asarray(orders, dtype=float)
    return np.log((al - 1) / al) - (math.log(delta) + np.log(al)) / (al - 1)


def rdp_to_dp(curve: RdpCurve, delta: float) -> tuple[float, int]:
    """Smallest epsilon over the order grid, and the order that attains it."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if not curve.orders:
        raise ValueError("empty RDP curve")
    eps = curve.values + conversion_terms(curve.orders, delta)
    i = int(np.argmin(eps))
    return float(eps[i]), curve.orders[i]


def accountant_floor(delta: float, orders: Sequence[int] = DEFAULT_ORDERS) -> float:
    """Epsilon reported for zero releases (the conversion terms alone)."""
    return rdp_to_dp(RdpCurve.zero(orders), delta)[0]


def total_curve(q: float, sigma: float, sigma_l: Optional[float], T: int,
                extra_loss_releases: int = 0,
                orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    """Model channel composed T times plus the loss channel composed
    ``T + extra_loss_releases`` times (loss channel skipped if ``sigma_l`` is None)."""
    total = compose(sgm_curve(q, sigma, orders), T)
    if sigma_l is not None:
        total = add_curves(total, compose(sgm_curve(q, sigma_l, orders), T + extra_loss_releases))
    return total


def fedfdp_privacy_loss(q: float, sigma: float, sigma_l: Optional[float], T: int, delta: float,
                        extra_loss_releases: int = 0,
                        orders: Sequence[int] = DEFAULT_ORDERS) -> tuple[float, float, int]:
    """(epsilon, delta, best_alpha) of one client after T rounds.

    ``sigma_l=None`` accounts the gradient channel only. ``extra_loss_releases``
    counts loss uploads outside the T training rounds (the initial loss pass).
    """
    eps, alpha = rdp_to_dp(total_curve(q, sigma, sigma_l, T, extra_loss_releases, orders), delta)
    return eps, delta, alpha


def max_rounds(epsilon_budget: float, delta: float, q: float, sigma: float,
               sigma_l_opt: Optional[float] = None, extra_loss_releases: int = 0,
               orders: Sequence[int] = DEFAULT_ORDERS, t_cap: int = 10**9) -> int:
    """Largest T whose accumulated epsilon stays within the budget.

    Raises :class:`InfeasibleBudgetError` if even T=0 overshoots. Returns
    ``t_cap`` when the budget is never exhausted (e.g. q=0).
    """
    def eps_at(T):
        return fedfdp_privacy_loss(q, sigma, sigma_l_opt, T, delta, extra_loss_releases, orders)[0]

    if eps_at(0) > epsilon_budget:
        raise InfeasibleBudgetError(epsilon_budget, eps_at(0))
    lo, hi = 0, 1
    while eps_at(hi) <= epsilon_budget:
        lo = hi
        if hi >= t_cap:
            return t_cap
        hi = min(hi * 2, t_cap)
    # invariant: eps_at(lo) <= budget < eps_at(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if eps_at(mid) <= epsilon_budget:
            lo = mid
        else:
            hi = mid
    return lo
