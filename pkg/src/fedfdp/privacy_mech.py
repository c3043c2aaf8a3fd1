"""Gradient and loss randomizers used by FedFDP clients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model as M
from .fairness import fair_clip_coefficients

LOSS_BOUND_FLOOR = 1e-6


@dataclass(frozen=True)
class DpNoiseSpec:
    """Noise multipliers and clip bounds.

    ``sigma`` / ``sigma_l`` of zero switch the corresponding noise off; that
    is for tests and baselines only and carries no privacy guarantee.
    """
    sigma: float
    sigma_l: float
    C: float
    C_l0: float

    def __post_init__(self):
        if self.sigma < 0 or self.sigma_l < 0:
            raise ValueError("noise multipliers must be nonnegative")
        if not (self.C > 0 and self.C_l0 > 0):
            raise ValueError("clip bounds must be > 0")


@dataclass
class LossClipState:
    client_id: int
    bound: float
    # raw per-sample losses of the previous round's batch, consumed by the
    # next bound update
    prev_losses: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class StepInfo:
    deltas: np.ndarray
    coefficients: np.ndarray
    grad_norms: np.ndarray
    noise: np.ndarray


def clip_vector(g: np.ndarray, bound: float) -> np.ndarray:
    """g / max(1, ||g|| / bound)."""
    if not bound > 0:
        raise ValueError("clip bound must be > 0")
    g = np.asarray(g, dtype=float)
    return g / max(1.0, float(np.linalg.norm(g)) / bound)


def gaussian_noise(d: int, sigma: float, C: float, rng: np.random.Generator) -> np.ndarray:
    """sigma * C * N(0, I_d)."""
    return sigma * C * rng.standard_normal(d)


def scaled_contributions(grads: np.ndarray, coefs: np.ndarray, C: float) -> np.ndarray:
    """Rows ``coefs[j] * grads[j]`` with every row norm guaranteed <= C.

    ``(C / ||g||) * g`` can round to a norm one ulp above C; such rows are
    shrunk until the computed norm is inside the bound.
    """
    out = np.asarray(coefs, dtype=float)[:, None] * np.asarray(grads, dtype=float)
    for _ in range(16):
        norms = np.linalg.norm(out, axis=1)
        over = norms > C
        if not over.any():
            return out
        out[over] *= np.nextafter(C / norms[over], 0.0)[:, None]
    raise FloatingPointError("could not bring clipped gradients inside the clip bound")


def fair_clipped_sum(w, X, y, spec: M.ModelSpec, lam: float, global_loss_prev: float, C: float,
                     allow_negative_coef: bool = False):
    """Sum of fair-clipped per-sample gradients, plus per-sample diagnostics."""
    losses = M.per_sample_losses(w, spec, X, y)
    grads = M.per_sample_grads(w, spec, X, y)
    norms = np.linalg.norm(grads, axis=1)
    deltas = losses - global_loss_prev
    coefs = fair_clip_coefficients(lam, deltas, C, norms, allow_negative_coef)
    if allow_negative_coef:
        # reversed gradients are unbounded anyway; keep the raw update
        return coefs @ grads, deltas, coefs, norms
    return scaled_contributions(grads, coefs, C).sum(axis=0), deltas, coefs, norms


def fair_dpsgd_step(w, X, y, spec: M.ModelSpec, lam: float, global_loss_prev: float,
                    noise: DpNoiseSpec, eta: float, rng: np.random.Generator,
                    allow_negative_coef: bool = False, return_info: bool = False):
    """One noisy step w - eta/|B| (sum_j C_ij grad_j + sigma C N(0, I)).

    ``X, y`` is the realized batch and must be non-empty.
    """
    if len(y) == 0:
        raise ValueError("fair_dpsgd_step needs a non-empty batch")
    w = np.asarray(w, dtype=float)
    total, deltas, coefs, norms = fair_clipped_sum(
        w, X, y, spec, lam, global_loss_prev, noise.C, allow_negative_coef)
    z = gaussian_noise(w.shape[0], noise.sigma, noise.C, rng)
    w_new = w - (eta / len(y)) * (total + z)
    if return_info:
        return w_new, StepInfo(deltas, coefs, norms, z)
    return w_new


def clamp_losses(losses, bound: float) -> np.ndarray:
    return np.minimum(bound, np.maximum(0.0, np.asarray(losses, dtype=float)))


def noised_loss_mean(batch_losses, bound: float, sigma_l: float, rng: np.random.Generator) -> float:
    """(sum_j clamp(F_j, 0, bound) + sigma_l * bound * N(0, 1)) / |B|."""
    batch_losses = np.asarray(batch_losses, dtype=float)
    if len(batch_losses) == 0:
        raise ValueError("noised_loss_mean needs a non-empty batch")
    if not bound > 0:
        raise ValueError("loss bound must be > 0")
    s = float(np.sum(clamp_losses(batch_losses, bound)))
    return (s + sigma_l * bound * float(rng.standard_normal())) / len(batch_losses)


def adaptive_loss_bound(prev_state: LossClipState, prev_batch_losses, sigma_l: float,
                        rng: np.random.Generator) -> float:
    """Next loss clip bound: the noised clamped mean of last round's losses.

    Uses the previous bound both for clamping and for the noise scale, draws
    fresh noise from ``rng``, and floors the result at 1e-6.
    """
    prev_batch_losses = np.asarray(prev_batch_losses, dtype=float)
    if len(prev_batch_losses) == 0:
        return prev_state.bound
    prev = prev_state.bound
    s = float(np.sum(clamp_losses(prev_batch_losses, prev)))
    new = (s + float(rng.normal(0.0, prev * sigma_l))) / len(prev_batch_losses)
    return max(new, LOSS_BOUND_FLOOR)
