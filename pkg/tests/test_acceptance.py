"""Acceptance criteria A1-A13, one pass/fail line each (see the terminal summary)."""

import json
import math
import os
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from fedfdp import accountant as A
from fedfdp import cli
from fedfdp import data as D
from fedfdp import federation as F
from fedfdp import lambda_solver as S
from fedfdp import model as M
from fedfdp import privacy_mech as P
from fedfdp.fairness import fair_clip_coefficients
from helpers import feasible_constants

A1_SIGMAS = (1.0, 1.5, 2.0, 2.5, 3.0)
A1_TABLE = (6, 115, 268, 463, 708)


def _cli_json(argv, capsys):
    code = cli.main(argv)
    return code, json.loads(capsys.readouterr().out)


def test_A1_round_budgets(criterion, capsys):
    t0 = time.perf_counter()
    found = {}
    for name, extra in (("gradient-only", []), ("gradient+loss(sigma_l=5)", ["--sigma-l", "5"])):
        Ts = []
        for s in A1_SIGMAS:
            code, doc = _cli_json(["accountant", "max-rounds", "--eps", "2", "--delta", "1e-5",
                                   "--q", "0.05", "--sigma", str(s)] + extra, capsys)
            assert code == 0
            Ts.append(doc["T"])
        ok = all(abs(t - ref) <= max(3, 0.05 * ref) for t, ref in zip(Ts, A1_TABLE))
        found[name] = (Ts, ok)
    elapsed = time.perf_counter() - t0
    matching = [n for n, (_, ok) in found.items() if ok]
    detail = "; ".join(f"{n}: T={Ts}" for n, (Ts, _) in found.items())
    ok = bool(matching) and elapsed < 10
    criterion("A1", ok, f"{detail}; matches: {matching or 'none'}; {elapsed:.2f}s")
    assert ok


def test_A2_gaussian_reduction(criterion):
    worst = 0.0
    for s in (0.5, 1.0, 2.0, 5.0):
        for a in range(2, 65):
            want = a / (2 * s * s)
            worst = max(worst, abs(A.sgm_rdp_order(1.0, s, a) - want) / want)
    ok = worst <= 1e-9
    criterion("A2", ok, f"max rel err {worst:.2e} (tol 1e-9)")
    assert ok


def test_A3_high_precision_oracle(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        q = float(rng.uniform(1e-6, 0.2))
        s = float(rng.uniform(0.5, 5.0))
        a = int(rng.integers(2, 129))
        with mpmath.workdps(80):  # ~266 bits
            mq, ms = mpmath.mpf(q), mpmath.mpf(s)
            tot = mpmath.fsum(mpmath.binomial(a, k) * (1 - mq) ** (a - k) * mq**k
                              * mpmath.exp(mpmath.mpf(k * k - k) / (2 * ms * ms)) for k in range(a + 1))
            ref = mpmath.log(tot) / (a - 1)
        got = A.sgm_rdp_order(q, s, a)
        worst = max(worst, float(abs(mpmath.mpf(got) - ref) / ref))
    ok = worst <= 1e-10
    criterion("A3", ok, f"50 triples, max rel err {worst:.2e} (tol 1e-10)")
    assert ok


def _a4_constants():
    rng = np.random.default_rng(4)
    return [feasible_constants(rng) for _ in range(100)]


def test_A4_lambda_closed_form_vs_grid(criterion):
    t0 = time.perf_counter()
    worst_p, worst_arg = -math.inf, 0.0
    for k in _a4_constants():
        T = 100
        r = S.optimal_lambda(k, T)
        c = r.coeffs
        hi = 10 * r.lambda_star + 1
        grid = np.linspace(0.0, hi, 10_000)
        vals = S.P_value(c, k, T, grid)
        i = int(np.argmin(vals))
        worst_p = max(worst_p, r.P_min - float(vals[i]))
        # refine the grid argmin between its neighbours before comparing locations
        arg = S.golden_section(lambda x: S.P_value(c, k, T, x), grid[max(i - 1, 0)], grid[min(i + 1, 9999)])
        worst_arg = max(worst_arg, abs(arg - r.lambda_star) / r.lambda_star)
    elapsed = time.perf_counter() - t0
    ok = worst_p <= 1e-6 and worst_arg <= 1e-4 and elapsed < 30
    criterion("A4", ok, f"max P(cf)-min grid {worst_p:.2e} (<=1e-6), max argmin rel diff {worst_arg:.2e} "
                        f"(<=1e-4), {elapsed:.2f}s")
    assert ok


def test_A5_sensitivity_contracts(criterion):
    rng = np.random.default_rng(5)
    n, d = 100_000, 8
    grads = rng.normal(size=(n, d)) * rng.exponential(5.0, size=(n, 1))
    grads[rng.random(n) < 0.01] = 0.0
    deltas = rng.normal(size=n) * 3
    lam = rng.exponential(3.0)
    C = float(rng.exponential(1.0) + 1e-3)
    viol_g = 0
    # varying lambda and C across chunks as well as across samples
    for chunk in np.array_split(np.arange(n), 100):
        lam_c = float(rng.exponential(lam))
        C_c = float(rng.exponential(C) + 1e-4)
        coefs = fair_clip_coefficients(lam_c, deltas[chunk], C_c, np.linalg.norm(grads[chunk], axis=1))
        rows = P.scaled_contributions(grads[chunk], coefs, C_c)
        viol_g += int(np.sum(np.linalg.norm(rows, axis=1) > C_c))
    losses = rng.normal(size=n) * 5
    bounds = rng.exponential(2.0, size=n) + 1e-6
    clipped = np.array([P.clamp_losses(losses[i:i + 1], bounds[i])[0] for i in range(n)])
    viol_l = int(np.sum((clipped < 0) | (clipped > bounds)))
    ok = viol_g == 0 and viol_l == 0
    criterion("A5", ok, f"{n} tuples: gradient violations {viol_g}, loss violations {viol_l}")
    assert ok


def test_A6_noise_calibration(criterion):
    sigma, C = 2.0, 0.1
    # a batch whose per-sample gradients are exactly zero, so the update is pure noise
    spec = M.ModelSpec("multinomial-logistic", 49_999, 2)
    w = np.zeros(spec.dim)
    w[0], w[spec.input_dim] = 800.0, -800.0
    X = np.zeros((2, spec.input_dim)); X[:, 0] = 1.0
    y = np.zeros(2, dtype=int)
    noise = P.DpNoiseSpec(sigma, 0.0, C, 1.0)
    w_new, info = P.fair_dpsgd_step(w, X, y, spec, 0.0, 0.0, noise, 1.0, np.random.default_rng(6),
                                    return_info=True)
    z = info.noise
    n = z.size
    assert n >= 100_000
    np.testing.assert_allclose(w - w_new, z / 2, rtol=0, atol=1e-12)
    std_err = abs(z.std() / (sigma * C) - 1)
    mean_err = abs(z.mean())
    ok = std_err <= 0.02 and mean_err <= 3 * sigma * C / math.sqrt(n)
    criterion("A6", ok, f"n={n}, std/(sigma C)-1 = {std_err:.2e} (<=2%), |mean| = {mean_err:.2e} "
                        f"(<= {3 * sigma * C / math.sqrt(n):.2e})")
    assert ok


def test_A7_gradient_correctness(criterion):
    rng = np.random.default_rng(7)
    specs = [M.ModelSpec("multinomial-logistic", 6, 4), M.ModelSpec("mlp-1-hidden", 5, 3, hidden=7)]
    worst, fails = 0.0, 0
    h = 1e-5
    for spec in specs:
        for _ in range(100):
            w = rng.normal(size=spec.dim)
            x = rng.random(spec.input_dim)
            k = int(rng.integers(spec.classes))
            ex = M.Example(x, k)
            g = M.per_sample_grad(w, spec, ex)
            fd = np.empty_like(w)
            for i in range(spec.dim):
                e = np.zeros_like(w); e[i] = h
                fd[i] = (M.per_sample_loss(w + e, spec, ex) - M.per_sample_loss(w - e, spec, ex)) / (2 * h)
            small = np.abs(fd) < 1e-8
            fails += int(np.sum(np.abs(g[small] - fd[small]) > 1e-8))
            rel = np.abs(g[~small] - fd[~small]) / np.maximum(np.abs(fd[~small]), 1e-3)
            worst = max(worst, float(rel.max(initial=0.0)))
    ok = worst <= 1e-5 and fails == 0
    criterion("A7", ok, f"200 cases (100 per model kind), max rel err {worst:.2e} (tol 1e-5)")
    assert ok


def test_A8_fedavg_reduction(criterion):
    X, y, _ = D.synthetic_classification(1500, 8, 5, seed=8)
    parts = D.dirichlet_partition(y, D.PartitionSpec(10, 0.1, 8))
    tr, ev = D.holdout_split(D.make_clients(X, y, parts), 0.2, 8)
    spec = M.ModelSpec("multinomial-logistic", 8, 5)
    hp = F.HyperParams(eta=0.1, lam=0.0, T=15, seed=8, batch_size=10)
    traj = {}
    for alg in ("fedavg", "fedfair"):
        ws = []
        res = F.run_experiment(tr, ev, spec, alg, hp, on_round=lambda m, w: ws.append(w.tobytes()))
        traj[alg] = (ws, [json.dumps(m.to_dict(), sort_keys=True) for m in res.metrics])
    ok = traj["fedavg"] == traj["fedfair"]
    criterion("A8", ok, "15-round parameter and metric trajectories bit-identical" if ok else "trajectories differ")
    assert ok


A9_LAMBDAS = (0.3, 1.0, 3.0)


def test_A9_fairness_improvement(criterion):
    t0 = time.perf_counter()
    spec = M.ModelSpec("multinomial-logistic", 10, 10)
    psi = {l: [] for l in (0.0,) + A9_LAMBDAS}
    loss = {l: [] for l in psi}
    for seed in range(10):
        X, y, _ = D.synthetic_classification(2000, 10, 10, seed)
        parts = D.dirichlet_partition(y, D.PartitionSpec(10, 0.1, seed))
        tr, ev = D.holdout_split(D.make_clients(X, y, parts), 0.2, seed)
        for lam in psi:
            hp = F.HyperParams(eta=0.1, lam=lam, T=20, seed=seed, batch_size=10)
            m = F.run_experiment(tr, ev, spec, "fedfair", hp).metrics[-1]
            psi[lam].append(m.psi_eval)
            loss[lam].append(m.global_eval_loss)
    base_psi, base_loss = np.median(psi[0.0]), np.median(loss[0.0])
    rows, winners = [], []
    for lam in A9_LAMBDAS:
        mp, ml = np.median(psi[lam]), np.median(loss[lam])
        rows.append(f"lambda={lam}: psi {mp:.4f}, loss {ml:.4f}")
        if mp < base_psi and ml <= 1.05 * base_loss:
            winners.append(lam)
    elapsed = time.perf_counter() - t0
    ok = bool(winners) and elapsed < 300
    criterion("A9", ok, f"baseline psi {base_psi:.4f}, loss {base_loss:.4f}; " + "; ".join(rows)
              + f"; passing lambdas {winners}; {elapsed:.1f}s")
    assert ok


def test_A10_convergence_envelope(criterion):
    N, per, dim, reg, T, sigma = 5, 200, 2, 0.1, 100, 1.0
    ratios = []
    for seed in range(10):
        clients, _ = D.synthetic_convex(N, per, dim, 0.5, seed)
        spec = M.ModelSpec("multinomial-logistic", dim, 2, l2=reg)
        X = np.concatenate([c.X for c in clients])
        x_max = float(np.sqrt((np.sum(X**2, axis=1) + 1).max()))
        # with w0 = 0 and eta_t = 2/(mu t) the iterates stay in a ball of radius
        # 2 sqrt(2) x_max / mu, which bounds every per-sample gradient by 3 sqrt(2) x_max
        G = 3 * math.sqrt(2) * x_max
        gap = D.heterogeneity_gap(spec, clients)
        w0 = np.zeros(spec.dim)
        k = S.BoundConstants(G=G, L=M.smoothness_bound(spec, X), mu=reg, Gamma=max(gap["Gamma"], 0.0),
                             w_dist=float(np.sum((w0 - gap["w_star"]) ** 2)), Q0=0.0, Q1=0.0, d=spec.dim,
                             B_hat=float(per), sigma=sigma, C=G,
                             provenance={"G": "analytic", "L": "analytic", "mu": "analytic"})
        # lambda = 0 and C = G make every coefficient exactly 1, so C_t = 1
        hp = F.HyperParams(eta=2 / reg, lam=0.0, q=1.0, C=G, sigma=sigma, sigma_l=5.0, T=T, seed=seed,
                           lr_schedule="inverse-t")
        gaps = []
        res = F.run_experiment(clients, clients, spec, "fedfdp", hp, w0=w0,
                               on_round=lambda m, w: gaps.append(m.global_train_loss - gap["F_star"]))
        assert all(c == 1.0 for c in res.trace["coefficients"])
        # after t updates the model is w_{t+1}
        ratios.append([g / S.convergence_bound(k, 1.0, t + 1) for t, g in enumerate(gaps, start=1)])
    med = np.median(np.array(ratios), axis=0)
    worst = float(med[4:].max())
    ok = worst < 1.0
    criterion("A10", ok, f"median over 10 seeds of gap/bound, max over t>=5: {worst:.2e} (< 1)")
    assert ok


def test_A11_unimodality_unique_root(criterion):
    bad_roots = bad_mono = 0
    for k in _a4_constants():
        T = 100
        r = S.optimal_lambda(k, T)
        c = r.coeffs
        if sum(1 for lam in r.roots if lam > 0) != 1:
            bad_roots += 1
        before = S.P_value(c, k, T, np.linspace(0.0, r.lambda_star, 100))
        after = S.P_value(c, k, T, np.linspace(r.lambda_star, 10 * r.lambda_star + 1, 100))
        # allow rounding-level flatness right at the minimum
        tol = 1e-12 * abs(r.P_min)
        if np.any(np.diff(before) > tol) or np.any(np.diff(after) < -tol):
            bad_mono += 1
    ok = bad_roots == 0 and bad_mono == 0
    criterion("A11", ok, f"100 constant sets: {bad_roots} without exactly one positive root, "
                         f"{bad_mono} non-unimodal")
    assert ok


def test_A12_adaptive_bound_post_processing(criterion, monkeypatch):
    X, y, _ = D.synthetic_classification(200, 4, 3, seed=12)
    client = D.ClientDataset(0, X, y, 1.0)
    spec = M.ModelSpec("multinomial-logistic", 4, 3)
    hp = F.HyperParams(eta=0.5, lam=1.0, q=0.3, seed=12)
    w = np.random.default_rng(12).normal(size=spec.dim) * 0.1
    prev = F.local_update_fedfdp(w, 1.1, client, spec, hp, P.LossClipState(0, 2.5), 0, hp.seed)

    seen = []
    real = F.noised_loss_mean

    def mutating(losses, bound, sigma_l, rng):
        seen.append(bound)
        return real(mutate(losses), bound, sigma_l, rng)

    monkeypatch.setattr(F, "noised_loss_mean", mutating)
    outs = []
    for mutate in (lambda v: v, lambda v: v * 0.1, lambda v: v + 1.7, lambda v: v[::-1] ** 2,
                   lambda v: np.zeros_like(v)):
        r = F.local_update_fedfdp(prev.params, 1.0, client, spec, hp, prev.state, 1, hp.seed)
        outs.append((r.state.bound, r.noised_loss))
    bounds = {b for b, _ in outs}
    noised = {n for _, n in outs}
    ok = len(bounds) == 1 and len(set(seen)) == 1 and len(noised) == len(outs)
    criterion("A12", ok, f"5 mutations of round-t raw losses: distinct bounds {len(bounds)}, "
                         f"distinct noised losses {len(noised)}")
    assert ok


MNIST_TRAIN_SIZE = 60_000


def _mnist_files():
    root = os.environ.get("FEDFDP_MNIST_DIR")
    if not root:
        return None
    for suffix in ("", ".gz"):
        i = Path(root) / f"train-images-idx3-ubyte{suffix}"
        l = Path(root) / f"train-labels-idx1-ubyte{suffix}"
        if i.exists() and l.exists():
            return i, l
    return None


def test_A13_mnist_smoke(criterion):
    files = _mnist_files()
    if files is None:
        criterion("A13", None, "official MNIST not found (set FEDFDP_MNIST_DIR); not run")
        pytest.skip("MNIST training files not available")
    X, y = D.load_idx(*files)
    if len(y) != MNIST_TRAIN_SIZE:
        criterion("A13", None, f"FEDFDP_MNIST_DIR holds {len(y)} images, not the {MNIST_TRAIN_SIZE}-image train set")
        pytest.skip("not the official MNIST training set")
    t0 = time.perf_counter()
    parts = D.dirichlet_partition(y, D.PartitionSpec(10, 0.1, 0))
    tr, ev = D.holdout_split(D.make_clients(X, y, parts), 0.2, 0)
    spec = M.ModelSpec("multinomial-logistic", X.shape[1], 10)
    hp = F.HyperParams(eta=1.0, lam=0.0, q=0.05, C=0.1, sigma=2.0, C_l=2.5, sigma_l=5.0, delta=1e-5, seed=0)
    res = F.run_experiment(tr, ev, spec, "fedfdp", hp, epsilon_budget=3.52, workers=os.cpu_count() or 1)
    m = res.metrics[-1]
    elapsed = time.perf_counter() - t0
    ok = m.mean_accuracy >= 0.80 and m.eps_spent <= 3.52 and elapsed < 15 * 60
    criterion("A13", ok, f"T={res.T}, eps={m.eps_spent:.3f}, mean accuracy {m.mean_accuracy:.4f} (>=0.80), "
                         f"{elapsed:.0f}s")
    assert ok
