"""Convergence bound and the optimal fairness weight lambda*.

The bound as a function of lambda is

    P(lambda) = L / (2 mu T) * (a1 l^3 + a2 l^2 + a3 l + a4) / (a5 l + 1)

whose stationary points are the roots of the cubic

    G(lambda) = 2 a1 a5 l^3 + (3 a1 + a2 a5) l^2 + 2 a2 l + (a3 - a4 a5).

Shifting ``lambda = x - (a2 a5 + 3 a1) / (6 a1 a5)`` gives the depressed form
``x^3 + a6 x + a7`` which is solved with Cardano's formula.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import LambdaSolverError

GRID_FALLBACK_MAX = 100.0
OMEGA = complex(-0.5, math.sqrt(3) / 2)


@dataclass(frozen=True)
class BoundConstants:
    G: float
    L: float
    mu: float
    Gamma: float
    w_dist: float
    Q0: float
    Q1: float
    d: int
    B_hat: float
    sigma: float
    C: float
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.L >= self.mu > 0:
            raise ValueError("need L >= mu > 0")
        if not self.G > 0:
            raise ValueError("need G > 0")
        if self.B_hat < 1:
            raise ValueError("need B_hat >= 1")
        if self.Q0 > self.Q1:
            raise ValueError("need Q0 <= Q1")
        if self.Gamma < 0:
            raise ValueError("need Gamma >= 0")

    def noise_term(self) -> float:
        return 2 * self.sigma**2 * self.C**2 * self.d / self.B_hat**2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CubicCoeffs:
    a1: float
    a2: float
    a3: float
    a4: float
    a5: float
    a6: float = math.nan
    a7: float = math.nan
    degenerate: bool = False

    @property
    def shift(self) -> float:
        """lambda = x - shift."""
        return (self.a2 * self.a5 + 3 * self.a1) / (6 * self.a1 * self.a5)

    def G(self, lam):
        a1, a2, a3, a4, a5 = self.a1, self.a2, self.a3, self.a4, self.a5
        return 2 * a1 * a5 * lam**3 + (3 * a1 + a2 * a5) * lam**2 + 2 * a2 * lam + (a3 - a4 * a5)

    def F(self, lam):
        a1, a2, a3, a4, a5 = self.a1, self.a2, self.a3, self.a4, self.a5
        return (a1 * lam**3 + a2 * lam**2 + a3 * lam + a4) / (a5 * lam + 1)


def coeffs_from_constants(k: BoundConstants) -> CubicCoeffs:
    G2 = k.G**2
    a1 = G2 * k.Q1**3
    a2 = 6 * G2 * k.Q1**2
    a3 = 9 * k.Q1 * G2 + 2 * k.L * k.Gamma * k.Q1 + 2 * k.Q0 * k.w_dist
    a4 = 4 * G2 + 2 * k.L * k.Gamma + k.noise_term() + k.w_dist
    a5 = 2 * k.Q0
    if a1 == 0 or a5 == 0:
        return CubicCoeffs(a1, a2, a3, a4, a5, degenerate=True)
    a6 = -((3 * a1 - a2 * a5) ** 2) / (12 * a1**2 * a5**2)
    s = 3 * a1 + a2 * a5
    a7 = (108 * a1**2 * a5**2 * (a3 - a4 * a5) - 36 * (a1 * a2 * a5) * s + 2 * s**3) / (216 * a1**3 * a5**3)
    return CubicCoeffs(a1, a2, a3, a4, a5, a6, a7)


def _cbrt(z: complex) -> complex:
    if z == 0:
        return 0j
    if z.imag == 0 and z.real < 0:
        # real cube root keeps the all-real case free of rounding in the imaginary part
        return complex(-((-z.real) ** (1 / 3)), 0.0)
    return z ** (1 / 3)


def cardano_real_roots(a6: float, a7: float) -> list[float]:
    """Real roots of x^3 + a6 x + a7, sorted ascending (repeated roots kept)."""
    disc = cmath.sqrt(a7 * a7 / 4 + a6**3 / 27)
    u = _cbrt(-a7 / 2 + disc)
    if abs(u) < 1e-300:
        u = _cbrt(-a7 / 2 - disc)
        v = 0j if abs(u) < 1e-300 else -a6 / (3 * u)
    else:
        # pairing the second cube root through u*v = -a6/3 selects matching branches
        v = -a6 / (3 * u)
    candidates = [u + v, OMEGA * u + OMEGA**2 * v, OMEGA**2 * u + OMEGA * v]
    tol = 1e-8 * max(1.0, abs(a7))
    roots = []
    for z in candidates:
        if abs(z.imag) >= 1e-9 * max(1.0, abs(z)):
            continue
        x = z.real
        for _ in range(3):
            fp = 3 * x * x + a6
            if fp == 0:
                break
            step = (x**3 + a6 * x + a7) / fp
            if not math.isfinite(step) or abs(step) > 1e-6 * max(1.0, abs(x)):
                break
            x -= step
        if abs(x**3 + a6 * x + a7) <= tol:
            roots.append(x)
    return sorted(roots)


def P_value(coeffs: CubicCoeffs, k: BoundConstants, T: int, lam):
    return k.L / (2 * k.mu * T) * coeffs.F(lam)


@dataclass
class LambdaResult:
    lambda_star: float
    P_min: float
    roots: list
    flags: list
    numeric_lambda: Optional[float] = None
    numeric_P: Optional[float] = None
    coeffs: Optional[CubicCoeffs] = None

    def to_json(self) -> dict:
        return {
            "lambda_star": self.lambda_star,
            "P_min": self.P_min,
            "roots": list(self.roots),
            "flags": list(self.flags),
            "numeric_lambda": self.numeric_lambda,
        }


def golden_section(f, lo: float, hi: float, tol: float = 1e-12, maxiter: int = 500) -> float:
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(maxiter):
        if abs(b - a) <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return (a + b) / 2


def grid_minimize(f, lo: float, hi: float, points: int) -> float:
    """Grid search refined by golden section between the neighbours of the best point."""
    grid = np.linspace(lo, hi, points)
    vals = np.array([f(x) for x in grid])
    i = int(np.argmin(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, points - 1)]
    x = golden_section(f, a, b)
    return x if f(x) <= vals[i] else float(grid[i])


def optimal_lambda(k: BoundConstants, T: int, guard_grid: int = 10_000, rel_tol: float = 1e-4) -> LambdaResult:
    """Closed-form lambda* with a numeric cross-check.

    Falls back to grid search on [0, 100] when the cubic is degenerate (a1 = 0
    or Q0 <= 0). Returns lambda* = 0 when G(0) >= 0, since P is then
    nondecreasing on [0, inf).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    c = coeffs_from_constants(k)
    P = lambda lam: P_value(c, k, T, lam)  # noqa: E731

    if c.degenerate or k.Q0 <= 0:
        lam = grid_minimize(P, 0.0, GRID_FALLBACK_MAX, guard_grid)
        return LambdaResult(lam, P(lam), [], ["grid-fallback"], lam, P(lam), c)

    if c.a3 >= c.a4 * c.a5:
        return LambdaResult(0.0, P(0.0), [], ["no-interior-optimum"], 0.0, P(0.0), c)

    xs = cardano_real_roots(c.a6, c.a7)
    lams = [x - c.shift for x in xs]
    positive = [lam for lam in lams if lam >= 0]
    if not positive:
        raise LambdaSolverError("cubic has no nonnegative real root", math.nan, math.nan)
    lam_star = max(positive)

    num = grid_minimize(P, 0.0, 10 * lam_star + 1, guard_grid)
    p_cf, p_num = P(lam_star), P(num)
    if abs(p_cf - p_num) > rel_tol * abs(p_num):
        raise LambdaSolverError("closed-form and grid minima disagree", lam_star, num)
    return LambdaResult(lam_star, p_cf, lams, [], num, p_num, c)


def bound_A(k: BoundConstants, C_t: float) -> float:
    G2 = k.G**2
    return G2 * C_t**3 + 3 * G2 * C_t**2 + 2 * k.L * k.Gamma * C_t + k.noise_term()


def convergence_bound(k: BoundConstants, C_t: float, t: int) -> float:
    """Upper bound on E[F(w_t)] - F*; ``inf`` when 2 C_t <= 1 (bound undefined)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    if 2 * C_t <= 1:
        return math.inf
    return k.L / (2 * t) * (bound_A(k, C_t) / (k.mu**2 * (2 * C_t - 1)) + k.w_dist)


def one_iteration_bound(k: BoundConstants, C_t: float, eta: float, current_gap: float) -> float:
    """(1 - mu eta C_t) * gap + eta^2 A: next-iterate bound on E||v - w*||^2."""
    if eta < 0:
        raise ValueError("eta must be >= 0")
    return (1 - k.mu * eta * C_t) * current_gap + eta**2 * bound_A(k, C_t)


@dataclass
class RunTrace:
    """Quantities observed during training that feed the bound constants."""
    grad_norms: Sequence[float]
    deltas: Sequence[float]
    batch_sizes: Sequence[int]
    d: int
    sigma: float
    C: float
    w_dist: float
    F_star: Optional[float] = None
    F_i_star: Optional[Sequence[float]] = None
    weights: Optional[Sequence[float]] = None


def estimate_constants(trace: RunTrace, L: Optional[float] = None, mu: Optional[float] = None,
                       L_estimate: Optional[float] = None, mu_estimate: Optional[float] = None) -> BoundConstants:
    """Build BoundConstants from a run trace.

    ``L``/``mu`` are analytic values (labelled "analytic"); otherwise the
    ``*_estimate`` arguments are used and labelled "empirical".
    """
    if len(trace.grad_norms) == 0 or len(trace.deltas) == 0:
        raise ValueError("trace has no per-sample gradient norms or loss gaps")
    if trace.F_star is None or trace.F_i_star is None or trace.weights is None:
        raise ValueError("trace lacks the optimal losses needed for Gamma")
    prov = {"G": "empirical", "Q0": "empirical", "Q1": "empirical", "Gamma": "empirical",
            "B_hat": "empirical", "w_dist": "empirical"}
    if L is None:
        if L_estimate is None:
            raise ValueError("L not supplied and no estimate available")
        L, prov["L"] = L_estimate, "empirical"
    else:
        prov["L"] = "analytic"
    if mu is None:
        if mu_estimate is None:
            raise ValueError("mu not supplied and no estimate available")
        mu, prov["mu"] = mu_estimate, "empirical"
    else:
        prov["mu"] = "analytic"
    gamma = trace.F_star - float(np.dot(trace.weights, trace.F_i_star))
    nonempty = [b for b in trace.batch_sizes if b > 0]
    return BoundConstants(
        G=float(np.max(trace.grad_norms)), L=float(L), mu=float(mu),
        Gamma=max(gamma, 0.0), w_dist=float(trace.w_dist),
        Q0=float(np.min(trace.deltas)), Q1=float(np.max(trace.deltas)),
        d=int(trace.d), B_hat=float(min(nonempty)) if nonempty else 1.0,
        sigma=float(trace.sigma), C=float(trace.C), provenance=prov,
    )
