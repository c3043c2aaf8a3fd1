"""Server/client orchestration for FedAvg, FedFair and FedFDP.

Every client runs every round. Randomness is drawn from substreams keyed on
(seed, client_id, round, purpose), so results do not depend on the order or
parallelism of client execution. Aggregation always sums in ascending
client id order.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import accountant
from . import model as M
from .data import ClientDataset
from .errors import ConfigurationError, InfeasibleBudgetError
from .fairness import LossReport, dynamic_lr, psi
from .privacy_mech import (DpNoiseSpec, LossClipState, adaptive_loss_bound, fair_dpsgd_step,
                           noised_loss_mean)
from .rng import Purpose, substream

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedfair", "fedfdp")


@dataclass
class HyperParams:
    eta: float = 0.1
    lam: float = 0.0
    q: float = 0.05
    C: float = 0.1
    sigma: float = 2.0
    C_l: float = 2.5
    sigma_l: float = 5.0
    T: int = 10
    delta: float = 1e-5
    seed: int = 0
    lr_schedule: str = "fixed"  # or "inverse-t": eta / t for round t = 1, 2, ...
    batch_size: Optional[int] = None  # FedFair/FedAvg only; default round(q |D_i|)
    allow_negative_coef: bool = False
    reuse_loss_release: bool = False

    def noise(self) -> DpNoiseSpec:
        return DpNoiseSpec(self.sigma, self.sigma_l, self.C, self.C_l)

    def eta_at(self, t: int) -> float:
        """Step size for 0-indexed round t."""
        if self.lr_schedule == "fixed":
            return self.eta
        if self.lr_schedule == "inverse-t":
            return self.eta / (t + 1)
        raise ConfigurationError(f"unknown lr_schedule {self.lr_schedule!r}", "hyper.lr_schedule")


@dataclass
class RoundMetrics:
    round: int
    global_train_loss: float
    global_eval_loss: float
    broadcast_loss: float
    train_losses: list
    eval_losses: list
    eval_accuracy: list
    psi_train: float
    psi_eval: float
    eps_spent: float
    batch_sizes: list
    mean_coefficient: float = math.nan

    @property
    def mean_accuracy(self) -> float:
        acc = [a for a in self.eval_accuracy if not math.isnan(a)]
        return float(np.mean(acc)) if acc else math.nan

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "global_train_loss": self.global_train_loss,
            "global_eval_loss": self.global_eval_loss,
            "broadcast_loss": self.broadcast_loss,
            "eps_spent": self.eps_spent,
            "psi_train": self.psi_train,
            "psi_eval": self.psi_eval,
            "mean_accuracy": self.mean_accuracy,
            "mean_coefficient": self.mean_coefficient,
            "train_losses": self.train_losses,
            "eval_losses": self.eval_losses,
            "eval_accuracy": self.eval_accuracy,
            "batch_sizes": self.batch_sizes,
        }


@dataclass
class ExperimentResult:
    metrics: list
    params: np.ndarray
    T: int
    initial_loss: float
    trace: dict = field(default_factory=dict)

    def summary(self) -> dict:
        last = self.metrics[-1] if self.metrics else None
        return {
            "T": self.T,
            "mean_accuracy": last.mean_accuracy if last else math.nan,
            "psi_eval": last.psi_eval if last else math.nan,
            "psi_train": last.psi_train if last else math.nan,
            "global_eval_loss": last.global_eval_loss if last else math.nan,
            "epsilon": last.eps_spent if last else self.trace.get("eps_floor", math.nan),
        }


def server_aggregate(client_params: Sequence[np.ndarray], client_losses: Sequence[float],
                     weights: Sequence[float]) -> tuple[np.ndarray, float]:
    """Weighted means of the client models and client losses, in list order.

    Accumulated as ``x_0 + sum_i p_i (x_i - x_0)`` so that identical inputs
    come back bit-for-bit.
    """
    if not (len(client_params) == len(client_losses) == len(weights)):
        raise ValueError("client_params, client_losses and weights differ in length")
    if not client_params:
        raise ValueError("nothing to aggregate")
    x0 = np.asarray(client_params[0], dtype=float)
    f0 = float(client_losses[0])
    w = np.zeros_like(x0)
    F = 0.0
    for p, x, f in zip(weights, client_params, client_losses):
        w = w + p * (np.asarray(x, dtype=float) - x0)
        F = F + p * (f - f0)
    return x0 + w, f0 + F


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def fedfair_batch_size(client: ClientDataset, hyper: HyperParams) -> int:
    if hyper.batch_size is not None:
        return int(hyper.batch_size)
    return max(1, int(round(hyper.q * len(client))))


def local_update_fedavg(w, client: ClientDataset, spec: M.ModelSpec, eta: float, batch_size: int,
                        rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Plain minibatch SGD over one shuffled pass of the local data."""
    w = np.array(w, dtype=float)
    for b in _batches(len(client), batch_size, rng):
        w = w - eta * M.batch_mean_grad(w, spec, client.X[b], client.y[b])
    return w, M.batch_mean_loss(w, spec, client.X, client.y)


def local_update_fedfair(w, F_global_prev: float, client: ClientDataset, spec: M.ModelSpec,
                         eta: float, lam: float, batch_size: int,
                         rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """One shuffled pass; each batch steps with eta (1 + lambda (F_i(w, b) - F))."""
    w = np.array(w, dtype=float)
    for b in _batches(len(client), batch_size, rng):
        Xb, yb = client.X[b], client.y[b]
        eta_i = dynamic_lr(eta, lam, M.batch_mean_loss(w, spec, Xb, yb) - F_global_prev)
        w = w - eta_i * M.batch_mean_grad(w, spec, Xb, yb)
    return w, M.batch_mean_loss(w, spec, client.X, client.y)


@dataclass
class LocalResult:
    params: np.ndarray
    noised_loss: float
    state: LossClipState
    batch_size: int
    skipped: bool = False
    mean_coefficient: float = math.nan
    grad_norms: Optional[np.ndarray] = None
    deltas: Optional[np.ndarray] = None


def poisson_batch(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    return np.flatnonzero(rng.random(n) < q)


def initial_loss_release(w, client: ClientDataset, spec: M.ModelSpec, hyper: HyperParams,
                         seed: int) -> tuple[float, LossClipState]:
    """Privatized loss of the initial model, clipped at C_l; seeds the loss-bound state."""
    rng_b = substream(seed, client.client_id, -1, Purpose.BATCH)
    idx = poisson_batch(len(client), hyper.q, rng_b)
    state = LossClipState(client.client_id, hyper.C_l)
    rng_n = substream(seed, client.client_id, -1, Purpose.LOSS_NOISE)
    if len(idx) == 0:
        draw = float(rng_n.standard_normal())
        # an empty sample still releases pure noise over a batch of one
        return hyper.sigma_l * hyper.C_l * draw, state
    losses = M.per_sample_losses(w, spec, client.X[idx], client.y[idx])
    state.prev_losses = losses
    return noised_loss_mean(losses, hyper.C_l, hyper.sigma_l, rng_n), state


def local_update_fedfdp(w, F_global_prev_noised: float, client: ClientDataset, spec: M.ModelSpec,
                        hyper: HyperParams, state: LossClipState, t: int, seed: int,
                        prev_noised_loss: Optional[float] = None) -> LocalResult:
    """One FedFDP client round: Poisson batch, fair-clipped noisy step, private loss.

    An empty Poisson sample skips the step: the model is returned unchanged,
    the loss state is kept, and the previous released loss is echoed (a
    post-processed value, costing no budget).
    """
    cid = client.client_id
    w = np.asarray(w, dtype=float)
    idx = poisson_batch(len(client), hyper.q, substream(seed, cid, t, Purpose.BATCH))
    if len(idx) == 0:
        echo = F_global_prev_noised if prev_noised_loss is None else prev_noised_loss
        return LocalResult(w.copy(), echo, state, 0, skipped=True)

    Xb, yb = client.X[idx], client.y[idx]
    w_new, info = fair_dpsgd_step(
        w, Xb, yb, spec, hyper.lam, F_global_prev_noised, hyper.noise(), hyper.eta_at(t),
        substream(seed, cid, t, Purpose.GRAD_NOISE), hyper.allow_negative_coef, return_info=True)

    if state.prev_losses is None:
        bound = state.bound
    elif hyper.reuse_loss_release and prev_noised_loss is not None:
        bound = max(prev_noised_loss, 1e-6)
    else:
        bound = adaptive_loss_bound(state, state.prev_losses, hyper.sigma_l,
                                    substream(seed, cid, t, Purpose.LOSS_BOUND_NOISE))

    losses = M.per_sample_losses(w_new, spec, Xb, yb)
    noised = noised_loss_mean(losses, bound, hyper.sigma_l, substream(seed, cid, t, Purpose.LOSS_NOISE))
    new_state = LossClipState(cid, bound, losses)
    return LocalResult(w_new, noised, new_state, len(idx), False,
                       float(np.mean(info.coefficients)), info.grad_norms, info.deltas)


def _losses(w, spec, clients):
    return [M.batch_mean_loss(w, spec, c.X, c.y) if len(c) else math.nan for c in clients]


def _report_psi(losses, weights) -> float:
    pairs = [(f, p) for f, p in zip(losses, weights) if not math.isnan(f)]
    if not pairs:
        return math.nan
    total = math.fsum(p for _, p in pairs)
    return psi(LossReport([f for f, _ in pairs], [p / total for _, p in pairs]))


def _weighted(losses, weights) -> float:
    pairs = [(f, p) for f, p in zip(losses, weights) if not math.isnan(f)]
    total = math.fsum(p for _, p in pairs)
    return math.fsum(f * p for f, p in pairs) / total if total else math.nan


def resolve_rounds(hyper: HyperParams, algorithm: str, epsilon_budget: Optional[float]) -> int:
    """T from the config, or the largest T the epsilon budget affords (FedFDP)."""
    if epsilon_budget is None:
        return int(hyper.T)
    if algorithm != "fedfdp":
        raise ConfigurationError("an epsilon budget only applies to fedfdp", "hyper.epsilon")
    T = accountant.max_rounds(epsilon_budget, hyper.delta, hyper.q, hyper.sigma, hyper.sigma_l,
                              extra_loss_releases=1)
    log.warning("epsilon budget %.4g affords T=%d rounds", epsilon_budget, T)
    return T


def privacy_spent(hyper: HyperParams, rounds: int) -> float:
    """Epsilon after ``rounds`` FedFDP rounds, counting the initial loss release."""
    return accountant.fedfdp_privacy_loss(hyper.q, hyper.sigma, hyper.sigma_l, rounds, hyper.delta,
                                          extra_loss_releases=1)[0]


def run_experiment(train: Sequence[ClientDataset], evals: Sequence[ClientDataset], spec: M.ModelSpec,
                   algorithm: str, hyper: HyperParams, epsilon_budget: Optional[float] = None,
                   w0: Optional[np.ndarray] = None, workers: int = 1,
                   order: Optional[Sequence[int]] = None,
                   on_round: Optional[Callable[[RoundMetrics, np.ndarray], None]] = None,
                   collect_trace: bool = False) -> ExperimentResult:
    """Run T rounds and return per-round metrics.

    ``order`` permutes client *execution* order (aggregation order is fixed);
    it exists to check order independence.
    """
    if algorithm not in ALGORITHMS:
        raise ConfigurationError(f"unknown algorithm {algorithm!r}", "algorithm")
    if any(len(c) == 0 for c in train):
        raise ConfigurationError("every client needs training data", "dataset")
    ids = [c.client_id for c in train]
    if ids != sorted(ids):
        raise ConfigurationError("clients must be given in ascending id order", "dataset")
    if algorithm == "fedfdp" and (hyper.sigma <= 0 or hyper.sigma_l <= 0):
        eps_enabled = False
    else:
        eps_enabled = algorithm == "fedfdp"

    T = resolve_rounds(hyper, algorithm, epsilon_budget)
    if eps_enabled and epsilon_budget is not None and privacy_spent(hyper, T) > epsilon_budget:
        raise InfeasibleBudgetError(epsilon_budget, privacy_spent(hyper, T))

    weights = [c.weight for c in train]
    w = M.init_params(spec, substream(hyper.seed, -1, 0, Purpose.INIT)) if w0 is None else np.array(w0, float)
    seed = hyper.seed
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    run_order = list(range(len(train))) if order is None else list(order)

    def _map(fn):
        out = [None] * len(train)
        if pool is None:
            for i in run_order:
                out[i] = fn(i)
        else:
            futs = {i: pool.submit(fn, i) for i in run_order}
            for i in run_order:
                out[i] = futs[i].result()
        return out

    states: list = [None] * len(train)
    prev_noised: list = [None] * len(train)
    if algorithm == "fedfdp":
        init = _map(lambda i: initial_loss_release(w, train[i], spec, hyper, seed))
        F_prev = server_aggregate([w] * len(train), [f for f, _ in init], weights)[1]
        states = [s for _, s in init]
        prev_noised = [f for f, _ in init]
    else:
        F_prev = _weighted(_losses(w, spec, train), weights)
    initial = F_prev

    trace = {"grad_norms": [], "deltas": [], "batch_sizes": [], "coefficients": []}
    if eps_enabled:
        trace["eps_floor"] = privacy_spent(hyper, 0)
    metrics = []
    try:
        for t in range(T):
            eta_t = hyper.eta_at(t)
            if algorithm == "fedfdp":
                results = _map(lambda i: local_update_fedfdp(
                    w, F_prev, train[i], spec, hyper, states[i], t, seed, prev_noised[i]))
                params = [r.params for r in results]
                losses = [r.noised_loss for r in results]
                states = [r.state for r in results]
                prev_noised = losses
                bsz = [r.batch_size for r in results]
                coefs = [r.mean_coefficient for r in results if not r.skipped]
                if collect_trace:
                    for r in results:
                        if not r.skipped:
                            trace["grad_norms"].extend(r.grad_norms.tolist())
                            trace["deltas"].extend(r.deltas.tolist())
            else:
                def work(i):
                    c = train[i]
                    rng = substream(seed, c.client_id, t, Purpose.SHUFFLE)
                    bs = fedfair_batch_size(c, hyper)
                    if algorithm == "fedavg":
                        return local_update_fedavg(w, c, spec, eta_t, bs, rng)
                    return local_update_fedfair(w, F_prev, c, spec, eta_t, hyper.lam, bs, rng)
                results = _map(work)
                params = [p for p, _ in results]
                losses = [f for _, f in results]
                bsz = [fedfair_batch_size(c, hyper) for c in train]
                coefs = []
            w, F_prev = server_aggregate(params, losses, weights)
            if not np.all(np.isfinite(w)):
                raise FloatingPointError(f"model diverged at round {t + 1}")

            tr = _losses(w, spec, train)
            ev = _losses(w, spec, evals)
            acc = [M.accuracy(w, spec, c.X, c.y) for c in evals]
            m = RoundMetrics(
                round=t + 1,
                global_train_loss=_weighted(tr, weights),
                global_eval_loss=_weighted(ev, weights),
                broadcast_loss=F_prev,
                train_losses=tr, eval_losses=ev, eval_accuracy=acc,
                psi_train=_report_psi(tr, weights), psi_eval=_report_psi(ev, weights),
                eps_spent=privacy_spent(hyper, t + 1) if eps_enabled else (math.inf if algorithm == "fedfdp" else 0.0),
                batch_sizes=bsz,
                mean_coefficient=float(np.mean(coefs)) if coefs else math.nan,
            )
            trace["batch_sizes"].append(bsz)
            trace["coefficients"].append(m.mean_coefficient)
            metrics.append(m)
            if on_round is not None:
                on_round(m, w)
    finally:
        if pool is not None:
            pool.shutdown()
    return ExperimentResult(metrics, w, T, initial, trace)


# ---------------------------------------------------------------------------
# Output sinks
# ---------------------------------------------------------------------------

def write_csv(metrics: Sequence[RoundMetrics], path) -> None:
    n = len(metrics[0].eval_losses) if metrics else 0
    header = ["round", "global_train_loss", "eps_spent", "psi_train", "psi_eval"]
    for i in range(n):
        header += [f"client{i}_loss", f"client{i}_accuracy"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for m in metrics:
            row = [m.round, repr(m.global_train_loss), repr(m.eps_spent), repr(m.psi_train), repr(m.psi_eval)]
            for loss, acc in zip(m.eval_losses, m.eval_accuracy):
                row += [repr(loss), repr(acc)]
            wr.writerow(row)


def write_jsonl(metrics: Sequence[RoundMetrics], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in metrics:
            fh.write(json.dumps(m.to_dict()) + "\n")
