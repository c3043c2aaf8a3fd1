"""Command line entry point: ``fedfdp run|accountant|lambda-opt|partition``.

Exit codes: 0 success, 2 config/schema error, 3 infeasible privacy budget,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import accountant
from . import data as D
from .config import SCHEMA, RunConfig
from .errors import ConfigurationError, FormatError, InfeasibleBudgetError, LambdaSolverError
from .federation import run_experiment, write_csv, write_jsonl
from .lambda_solver import BoundConstants, optimal_lambda

EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4

log = logging.getLogger("fedfdp")


def _json_out(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_run(args) -> int:
    try:
        cfg = RunConfig.load(args.config)
    except ConfigurationError as exc:
        print(f"config error [{exc.field}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.print_config:
        print(cfg.to_json())
        return 0
    try:
        train, evals, spec = cfg.build()
        hyper = cfg.hyper()
        res = run_experiment(train, evals, spec, cfg.algorithm, hyper, cfg.epsilon_budget(),
                             workers=args.workers)
    except InfeasibleBudgetError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INFEASIBLE
    except ConfigurationError as exc:
        print(f"config error [{exc.field}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_IO

    out = cfg.raw.get("output", {})
    summary = res.summary()
    try:
        if "csv" in out:
            write_csv(res.metrics, out["csv"])
        if "jsonl" in out:
            write_jsonl(res.metrics, out["jsonl"])
        if "summary" in out:
            Path(out["summary"]).write_text(json.dumps(summary, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        print(f"cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO
    print("final T={T} mean_accuracy={mean_accuracy:.6f} psi_eval={psi_eval:.6g} "
          "epsilon={epsilon:.6g}".format(**summary))
    return 0


def cmd_accountant(args) -> int:
    sigma_l = args.sigma_l
    extra = args.extra_loss_releases
    if args.mode == "eps":
        eps, delta, alpha = accountant.fedfdp_privacy_loss(args.q, args.sigma, sigma_l, args.T,
                                                           args.delta, extra)
        _json_out({"epsilon": eps, "best_alpha": alpha, "delta": delta, "T": args.T})
        return 0
    try:
        T = accountant.max_rounds(args.eps, args.delta, args.q, args.sigma, sigma_l, extra)
    except InfeasibleBudgetError as exc:
        _json_out({"error": "infeasible", "floor": exc.floor})
        return EXIT_INFEASIBLE
    _json_out({"T": T})
    return 0


def cmd_lambda_opt(args) -> int:
    try:
        if args.constants == "-":
            raw = json.load(sys.stdin)
        else:
            with open(args.constants, encoding="utf-8") as fh:
                raw = json.load(fh)
    except OSError as exc:
        print(f"cannot read constants: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"invalid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    T = raw.pop("T", args.T)
    try:
        k = BoundConstants(**raw)
        res = optimal_lambda(k, int(T), guard_grid=args.grid)
    except (TypeError, ValueError) as exc:
        print(f"bad constants: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LambdaSolverError as exc:
        _json_out({"error": "solver-disagreement", "closed_form": exc.closed_form, "numeric": exc.numeric})
        return 1
    _json_out(res.to_json())
    return 0


def cmd_partition(args) -> int:
    try:
        if args.dataset == "synthetic":
            _, y, _ = D.synthetic_classification(args.n, args.dim, args.classes, args.seed)
        else:
            if not args.labels:
                print("--labels is required for IDX datasets", file=sys.stderr)
                return EXIT_CONFIG
            y = D.parse_idx_labels(D._read_bytes(args.labels))
    except (OSError, FormatError) as exc:
        print(f"cannot load dataset: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        parts = D.dirichlet_partition(y, D.PartitionSpec(args.N, args.beta, args.seed))
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    hist = D.class_histograms(y, parts)
    doc = {
        "N": args.N, "beta": args.beta, "seed": args.seed,
        "clients": [p.tolist() for p in parts],
        "histogram": hist.tolist(),
        "skew": D.skew_statistic(y, parts),
    }
    try:
        Path(args.out).write_text(json.dumps(doc) + "\n", encoding="utf-8")
    except OSError as exc:
        print(f"cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    K = hist.shape[1]
    print("client " + " ".join(f"{k:>6d}" for k in range(K)) + "  total")
    for i, row in enumerate(hist):
        print(f"{i:>6d} " + " ".join(f"{v:>6d}" for v in row) + f" {row.sum():>6d}")
    print(f"skew={doc['skew']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedfdp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a JSON config")
    r.add_argument("config")
    r.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    r.add_argument("--print-config", action="store_true", help="echo the validated config and exit")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("schema", help="print the run config JSON schema")
    s.set_defaults(func=lambda a: (_json_out(SCHEMA), 0)[1])

    a = sub.add_parser("accountant", help="privacy accounting queries")
    a.add_argument("mode", choices=["eps", "max-rounds"])
    a.add_argument("--q", type=float, required=True)
    a.add_argument("--sigma", type=float, required=True)
    a.add_argument("--sigma-l", type=float, default=None,
                   help="loss-channel noise multiplier; omit for gradient-only accounting")
    a.add_argument("--delta", type=float, default=1e-5)
    a.add_argument("--T", type=int, default=0)
    a.add_argument("--eps", type=float)
    a.add_argument("--extra-loss-releases", type=int, default=0)
    a.set_defaults(func=cmd_accountant)

    lo = sub.add_parser("lambda-opt", help="optimal fairness weight from bound constants")
    lo.add_argument("constants", help="JSON file with BoundConstants fields (and T), or '-'")
    lo.add_argument("--T", type=int, default=1)
    lo.add_argument("--grid", type=int, default=10_000)
    lo.set_defaults(func=cmd_lambda_opt)

    pa = sub.add_parser("partition", help="Dirichlet label partition of a dataset")
    pa.add_argument("--dataset", choices=["synthetic", "mnist", "fashion-idx"], default="synthetic")
    pa.add_argument("--labels", help="IDX label file (mnist / fashion-idx)")
    pa.add_argument("--n", type=int, default=6000)
    pa.add_argument("--dim", type=int, default=20)
    pa.add_argument("--classes", type=int, default=10)
    pa.add_argument("--N", type=int, default=10)
    pa.add_argument("--beta", type=float, default=0.1)
    pa.add_argument("--seed", type=int, default=0)
    pa.add_argument("--out", required=True)
    pa.set_defaults(func=cmd_partition)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "mode", None) == "max-rounds" and args.eps is None:
        parser.error("max-rounds needs --eps")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
