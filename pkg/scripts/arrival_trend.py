"""Rebound rounds after a device arrival, with and without the fast-reboot boost."""

import argparse

import numpy as np

from fedflex.experiments import arrival_experiment
from fedflex.membership import MembershipEvent
from fedflex.objectives import Federation, random_quadratic_federation

from _common import median, trace_models


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--tau0", type=int, nargs="+", default=[10, 30, 50])
    ap.add_argument("--eta0", type=float, default=0.2)
    ap.add_argument("--delta0", type=float, default=2.0)
    args = ap.parse_args()

    N, d, E = 10, 5, 5
    full = random_quadratic_federation(d, N, np.random.default_rng(11), spread=1.0, n_samples=[100] * N)
    old = Federation(full.clients[:-1], [100] * (N - 1))
    models = trace_models(N - 1, E)
    lr = {"kind": "staircase", "eta0": args.eta0}
    print("tau0  vanilla  fast  advantage")
    for tau0 in args.tau0:
        ev = MembershipEvent(tau0, "arrival", full.clients[-1], 100, participation=models[0])
        res = [arrival_experiment(old, models, ev, "C", s, tau0 + 100, lr, delta0=args.delta0) for s in range(args.seeds)]
        v = median([r.horizon if r.vanilla is None else r.vanilla for r in res])
        f = median([r.horizon if r.fast is None else r.fast for r in res])
        print(f"{tau0:4d}  {v:7g}  {f:4g}  {median([r.advantage for r in res]):9g}")


if __name__ == "__main__":
    main()
