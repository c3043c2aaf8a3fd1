"""Loss aggregation, the weighted-variance fairness metric, and the two
loss-gap driven scalings (dynamic learning rate, fair-clipping coefficient)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class LossReport:
    losses: Sequence[float]
    weights: Sequence[float]
    client_ids: Sequence[int] | None = None

    def __post_init__(self):
        if len(self.losses) != len(self.weights):
            raise ValueError("losses and weights differ in length")
        if not np.all(np.isfinite(self.losses)):
            raise ValueError("losses must be finite")
        if abs(math.fsum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {math.fsum(self.weights)!r}, expected 1")


def global_loss(report: LossReport) -> float:
    """F = sum_i p_i F_i."""
    return math.fsum(p * f for p, f in zip(report.weights, report.losses))


def psi(report: LossReport) -> float:
    """Weighted variance sum_i p_i (F_i - F)^2 of the client losses."""
    F = global_loss(report)
    return math.fsum(p * (f - F) ** 2 for p, f in zip(report.weights, report.losses))


def delta(local_loss: float, global_loss_prev: float) -> float:
    return local_loss - global_loss_prev


def dynamic_lr(eta: float, lam: float, delta_: float) -> float:
    """Client step size eta * (1 + lambda * Delta). Deliberately unclamped."""
    return eta * (1.0 + lam * delta_)


def fair_clip_coefficient(lam: float, delta_ij: float, C: float, grad_norm: float,
                          allow_negative_coef: bool = False) -> float:
    """min(1 + lambda * Delta, C / ||g||), floored at zero by default.

    With ``allow_negative_coef`` the raw minimum is returned; a negative value
    reverses the sample's gradient and is NOT bounded by C, so that mode voids
    the sensitivity guarantee.
    """
    amp = 1.0 + lam * delta_ij
    coef = amp if grad_norm == 0 else min(amp, C / grad_norm)
    if allow_negative_coef:
        return coef
    return max(coef, 0.0)


def fair_clip_coefficients(lam: float, deltas: np.ndarray, C: float, grad_norms: np.ndarray,
                           allow_negative_coef: bool = False) -> np.ndarray:
    """Vectorised :func:`fair_clip_coefficient`."""
    deltas = np.asarray(deltas, dtype=float)
    grad_norms = np.asarray(grad_norms, dtype=float)
    amp = 1.0 + lam * deltas
    with np.errstate(divide="ignore"):
        cap = np.where(grad_norms > 0, C / np.where(grad_norms > 0, grad_norms, 1.0), np.inf)
    coef = np.minimum(amp, cap)
    if allow_negative_coef:
        return coef
    return np.maximum(coef, 0.0)
