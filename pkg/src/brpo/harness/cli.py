"""Command-line entry point: ``brpo {train,eval,oracle,psrl,gradcheck}``."""
from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np


def _cmd_train(args) -> int:
    from .config import load_config
    from .training import train

    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    cfg = load_config(args.config, **overrides)

    def progress(row):
        if not args.quiet:
            print(f"iter {row['iter']:4d}  steps {row['env_steps']:8d}  eval {row['mean_return']:9.2f} "
                  f"+- {row['std_err']:.2f}  kl {row['kl']:.4f}", flush=True)

    result = train(cfg, args.out, progress)
    print(json.dumps({"best_iter": result.best_eval.get("iter"),
                      "best_mean_return": result.best_eval.get("mean_return"),
                      "checkpoint": str(result.checkpoint) if result.checkpoint else None}))
    return 0


def _cmd_eval(args) -> int:
    from .training import evaluate

    res = evaluate(args.checkpoint, args.episodes, args.seed)
    print(json.dumps(res.summary()))
    return 0


def _cmd_oracle(args) -> int:
    from ..oracle import tree_bayes_optimal, tree_psrl_expected

    if args.env != "tree":
        raise ValueError("only the tree oracle is available")
    first, cumulative = tree_bayes_optimal(args.leaves, args.episodes)
    psrl = tree_psrl_expected(args.leaves, args.episodes)
    print(f"leaves {args.leaves} episodes {args.episodes}")
    print(f"bayes_optimal_first_episode {first:.1f}")
    print(f"bayes_optimal_cumulative {cumulative:.1f}")
    print(f"psrl_expected_cumulative {psrl:.1f}")
    print(f"gap {cumulative - psrl:.1f}")
    return 0


def _cmd_psrl(args) -> int:
    from ..baselines import psrl_tree_returns
    from ..oracle import tree_psrl_expected

    if args.env != "tree":
        raise ValueError("only tree PSRL is available")
    t0 = time.perf_counter()
    totals = psrl_tree_returns(args.leaves, args.episodes, args.trials, np.random.default_rng(args.seed))
    se = totals.std(ddof=1) / np.sqrt(len(totals)) if len(totals) > 1 else 0.0
    print(f"leaves {args.leaves} episodes {args.episodes} trials {args.trials}")
    print(f"psrl_mean_cumulative {totals.mean():.3f}")
    print(f"psrl_std_err {se:.3f}")
    print(f"psrl_expected_cumulative {tree_psrl_expected(args.leaves, args.episodes):.1f}")
    print(f"seconds {time.perf_counter() - t0:.2f}")
    return 0


def _cmd_gradcheck(args) -> int:
    from ..policyopt import gradcheck

    err = gradcheck(args.seed)
    ok = err < args.tol
    print(f"seed {args.seed} max_relative_error {err:.3e} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="brpo", description="Bayesian residual policy optimisation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--set", nargs="*", metavar="KEY=VALUE", help="override config entries")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_cmd_eval)

    o = sub.add_parser("oracle", help="closed-form tree values")
    o.add_argument("env", choices=["tree"])
    o.add_argument("--leaves", type=int, required=True)
    o.add_argument("--episodes", type=int, required=True)
    o.set_defaults(func=_cmd_oracle)

    s = sub.add_parser("psrl", help="Monte Carlo PSRL on the tree")
    s.add_argument("env", choices=["tree"])
    s.add_argument("--leaves", type=int, required=True)
    s.add_argument("--episodes", type=int, required=True)
    s.add_argument("--trials", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_psrl)

    g = sub.add_parser("gradcheck", help="finite-difference check of the PPO gradient")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # report any failure as a diagnostic plus a nonzero exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
