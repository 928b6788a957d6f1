"""Rounds until excluding a departed device beats keeping it, over tau0 and non-IID level."""

import argparse

import numpy as np

from fedflex.experiments import departure_experiment
from fedflex.membership import apply_departure
from fedflex.objectives import random_quadratic_federation

from _common import median, trace_models


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--tau0", type=int, nargs="+", default=[10, 30, 50])
    ap.add_argument("--spreads", type=float, nargs="+", default=[0.003, 0.03, 0.3])
    ap.add_argument("--eta0", type=float, default=0.1)
    args = ap.parse_args()

    N, d, E = 10, 5, 5
    models = trace_models(N, E)
    lr = {"kind": "staircase", "eta0": args.eta0}
    print("Gamma_l      " + "  ".join(f"tau0={t:<3d}" for t in args.tau0) + "  decision")
    for spread in args.spreads:
        fed = random_quadratic_federation(d, N, np.random.default_rng(5), spread=spread, n_samples=[100] * N)
        w0 = fed.w_star + 3 * np.ones(d) / np.sqrt(d)
        gamma_l = apply_departure(fed, N - 1)[1].gamma_l_tilde
        cells, decision = [], None
        for tau0 in args.tau0:
            res = [
                departure_experiment(fed, models, N - 1, tau0, "C", s, tau0 + 150, lr, w0, decide=(s == 0))
                for s in range(args.seeds)
            ]
            cells.append(median([r.crossing_or_horizon for r in res]))
            decision = res[0].decision
        print(f"{gamma_l:11.3e}  " + "  ".join(f"{c:<8g}" for c in cells) + f"  {decision}")


if __name__ == "__main__":
    main()
