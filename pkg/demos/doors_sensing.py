"""Train BRPO on Doors and look at where it chooses to sense.

Run:  python3 demos/doors_sensing.py [--iters N] [--seed 0] [--out runs/doors]

By default it trains to the config's 1.2M-step budget, about five minutes on one core.

The random-sensing ensemble senses on half of all steps wherever it is. Sensing accuracy decays with
distance to the doors, so a trained agent should sense less and mostly close to the wall.
"""
import argparse
from pathlib import Path

import numpy as np

from brpo.envs.doors import WALL_Y
from brpo.harness.config import load_config
from brpo.harness.training import build_setup, evaluate_params, initial_params, train

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def report(name, ev):
    d = np.abs(ev.sense_positions[:, 1] - WALL_Y) if len(ev.sense_positions) else np.zeros(0)
    hist = np.histogram(d, bins=[0, 1, 2, 4, 6, 8, 12])[0]
    print(f"{name:9s} return {ev.mean_return:6.2f} +- {ev.std_err:.2f}  crashes/ep {ev.crashes_per_episode:.2f}  "
          f"sense rate {ev.sense_rate:.3f}  near wall {ev.near_wall_fraction(WALL_Y):.2f}")
    print(f"          senses by distance to wall [0,1,2,4,6,8,12): {hist.tolist()}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iters", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    overrides = {"n_itr": args.iters} if args.iters else {}
    cfg = load_config(CONFIGS / "doors.cfg", seed=args.seed, **overrides)
    setup = build_setup(cfg)
    res = train(cfg, args.out, progress=lambda r: r["iter"] % 50 == 0 and print(
        f"  iter {r['iter']:4d}  steps {r['env_steps']:7d}  eval {r['mean_return']:6.2f}"))
    # the untrained policy has a zero residual mean, so its deterministic evaluation is the bare ensemble
    zero = initial_params(cfg, setup, np.random.default_rng(cfg.seed))
    report("ensemble", evaluate_params(setup, zero, 200, 1)[0])
    report("BRPO", evaluate_params(setup, res.best_params, 200, 1)[0])


if __name__ == "__main__":
    main()
