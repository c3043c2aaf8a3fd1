"""Softmax classifiers with exact per-sample losses and gradients.

Two model kinds are supported, both stored as one flat parameter vector:

``multinomial-logistic``
    ``W`` (K x D, row-major) followed by ``b`` (K).
``mlp-1-hidden``
    ``W1`` (H x D), ``W2`` (K x H), then ``b1`` (H), ``b2`` (K), with a tanh
    hidden layer.

An optional L2 penalty ``(l2 / 2) * ||w||^2`` over the whole vector is folded
into every per-sample loss; it makes the logistic objective strongly convex.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError

PROB_FLOOR = 1e-12
MAX_LOSS = -np.log(PROB_FLOOR)

KINDS = ("multinomial-logistic", "mlp-1-hidden")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    classes: int
    hidden: Optional[int] = None
    l2: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}", "model.kind")
        if self.input_dim < 1 or self.classes < 2:
            raise ConfigurationError("input_dim must be >= 1 and classes >= 2", "model")
        if self.kind == "mlp-1-hidden" and (self.hidden is None or self.hidden < 1):
            raise ConfigurationError("mlp-1-hidden needs a positive hidden size", "model.hidden")
        if self.l2 < 0:
            raise ConfigurationError("l2 must be nonnegative", "model.l2")

    @property
    def dim(self) -> int:
        """Parameter count d."""
        D, K = self.input_dim, self.classes
        if self.kind == "multinomial-logistic":
            return K * D + K
        H = self.hidden
        return H * D + K * H + H + K


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int


def init_params(spec: ModelSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Zeros for the logistic model; scaled Gaussian weights for the MLP."""
    if spec.kind == "multinomial-logistic":
        return np.zeros(spec.dim)
    if rng is None:
        rng = np.random.default_rng(0)
    D, K, H = spec.input_dim, spec.classes, spec.hidden
    w1 = rng.standard_normal(H * D) / np.sqrt(D)
    w2 = rng.standard_normal(K * H) / np.sqrt(H)
    return np.concatenate([w1, w2, np.zeros(H + K)])


def _unpack(params: np.ndarray, spec: ModelSpec):
    params = np.asarray(params, dtype=float)
    if params.ndim != 1 or params.shape[0] != spec.dim:
        raise ConfigurationError(
            f"parameter vector has shape {params.shape}, expected ({spec.dim},)", "params"
        )
    D, K = spec.input_dim, spec.classes
    if spec.kind == "multinomial-logistic":
        W = params[: K * D].reshape(K, D)
        b = params[K * D:]
        return W, b
    H = spec.hidden
    o = 0
    W1 = params[o:o + H * D].reshape(H, D); o += H * D
    W2 = params[o:o + K * H].reshape(K, H); o += K * H
    b1 = params[o:o + H]; o += H
    b2 = params[o:o + K]
    return W1, W2, b1, b2


def _check_batch(spec: ModelSpec, X, y=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ConfigurationError(
            f"features have shape {X.shape}, expected (n, {spec.input_dim})", "features"
        )
    if y is None:
        return X, None
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise ConfigurationError("features and labels differ in length", "labels")
    if y.size and (y.min() < 0 or y.max() >= spec.classes):
        raise ConfigurationError(f"labels must lie in [0, {spec.classes})", "labels")
    return X, y


def _forward(params, spec, X):
    """Logits (n, K) plus the hidden activations for the MLP."""
    if spec.kind == "multinomial-logistic":
        W, b = _unpack(params, spec)
        return X @ W.T + b, None
    W1, W2, b1, b2 = _unpack(params, spec)
    h = np.tanh(X @ W1.T + b1)
    return h @ W2.T + b2, h


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_batch(params, spec: ModelSpec, X) -> np.ndarray:
    X, _ = _check_batch(spec, X)
    z, _ = _forward(params, spec, X)
    return _softmax(z)


def predict(params, spec: ModelSpec, x: Example | np.ndarray) -> np.ndarray:
    """Class probabilities for one example."""
    feats = x.features if isinstance(x, Example) else x
    return predict_batch(params, spec, np.asarray(feats, dtype=float)[None, :])[0]


def per_sample_losses(params, spec: ModelSpec, X, y) -> np.ndarray:
    """Clamped cross-entropy for every row of ``X`` (plus the L2 term)."""
    X, y = _check_batch(spec, X, y)
    z, _ = _forward(params, spec, X)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    # -log(max(p, 1e-12)) == min(lse - z_y, -log 1e-12)
    ce = np.minimum(lse - z[np.arange(len(y)), y], MAX_LOSS)
    ce = np.maximum(ce, 0.0)
    if spec.l2:
        ce = ce + 0.5 * spec.l2 * float(np.dot(params, params))
    return ce


def per_sample_loss(params, spec: ModelSpec, x: Example) -> float:
    return float(per_sample_losses(params, spec, x.features[None, :], [x.label])[0])


def batch_mean_loss(params, spec: ModelSpec, X, y) -> float:
    X, y = _check_batch(spec, X, y)
    if len(y) == 0:
        raise ValueError("batch_mean_loss needs a non-empty batch")
    return float(np.mean(per_sample_losses(params, spec, X, y)))


def _logit_residual(params, spec, X, y):
    z, h = _forward(params, spec, X)
    R = _softmax(z)
    R[np.arange(len(y)), y] -= 1.0
    return R, h


def per_sample_grads(params, spec: ModelSpec, X, y) -> np.ndarray:
    """Gradient of each per-sample loss, shape (n, d).

    The clamp only guards ``log``; gradients use the unclamped softmax
    residual so saturated misclassified samples still carry signal.
    """
    X, y = _check_batch(spec, X, y)
    params = np.asarray(params, dtype=float)
    n = len(y)
    R, h = _logit_residual(params, spec, X, y)
    if spec.kind == "multinomial-logistic":
        gW = (R[:, :, None] * X[:, None, :]).reshape(n, -1)
        G = np.concatenate([gW, R], axis=1)
    else:
        W1, W2, _, _ = _unpack(params, spec)
        gW2 = (R[:, :, None] * h[:, None, :]).reshape(n, -1)
        A = (R @ W2) * (1.0 - h * h)
        gW1 = (A[:, :, None] * X[:, None, :]).reshape(n, -1)
        G = np.concatenate([gW1, gW2, A, R], axis=1)
    if spec.l2:
        G = G + spec.l2 * params
    return G


def per_sample_grad(params, spec: ModelSpec, x: Example) -> np.ndarray:
    return per_sample_grads(params, spec, x.features[None, :], [x.label])[0]


def batch_mean_grad(params, spec: ModelSpec, X, y) -> np.ndarray:
    """Gradient of the batch mean loss, accumulated as matrix products."""
    X, y = _check_batch(spec, X, y)
    if len(y) == 0:
        raise ValueError("batch_mean_grad needs a non-empty batch")
    params = np.asarray(params, dtype=float)
    n = len(y)
    R, h = _logit_residual(params, spec, X, y)
    if spec.kind == "multinomial-logistic":
        g = np.concatenate([(R.T @ X).ravel(), R.sum(axis=0)]) / n
    else:
        W1, W2, _, _ = _unpack(params, spec)
        A = (R @ W2) * (1.0 - h * h)
        g = np.concatenate([(A.T @ X).ravel(), (R.T @ h).ravel(), A.sum(axis=0), R.sum(axis=0)]) / n
    if spec.l2:
        g = g + spec.l2 * params
    return g


def accuracy(params, spec: ModelSpec, X, y) -> float:
    X, y = _check_batch(spec, X, y)
    if len(y) == 0:
        return float("nan")
    z, _ = _forward(params, spec, X)
    return float(np.mean(np.argmax(z, axis=1) == y))


def smoothness_bound(spec: ModelSpec, X) -> float:
    """Upper bound on the per-sample Hessian norm of the logistic model.

    The softmax cross-entropy Hessian in logit space has norm <= 1/2, so the
    per-sample Hessian is bounded by ``0.5 * (||x||^2 + 1) + l2``.
    """
    if spec.kind != "multinomial-logistic":
        raise ConfigurationError("analytic smoothness bound only exists for the logistic model", "model.kind")
    X, _ = _check_batch(spec, X)
    return 0.5 * (float(np.max(np.sum(X * X, axis=1))) + 1.0) + spec.l2


def fit_optimum(spec: ModelSpec, X, y, w0=None, tol: float = 1e-12, maxiter: int = 5000):
    """Minimise the mean loss on one dataset (L-BFGS). Returns (w*, F*)."""
    from scipy.optimize import minimize

    X, y = _check_batch(spec, X, y)
    if w0 is None:
        w0 = init_params(spec)

    def fun(w):
        return batch_mean_loss(w, spec, X, y), batch_mean_grad(w, spec, X, y)

    res = minimize(fun, w0, jac=True, method="L-BFGS-B",
                   options={"maxiter": maxiter, "gtol": tol, "ftol": tol * 1e-3})
    return res.x, float(res.fun)
