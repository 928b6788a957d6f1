"""Empirical distance to the optimum against the convergence bound on random federations."""

import argparse

import numpy as np

from fedflex.analysis import verify_bound
from fedflex.objectives import random_quadratic_federation
from fedflex.participation import ParticipationModel as PM


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--configs", type=int, default=20)
    ap.add_argument("--rounds", type=int, default=300)
    ap.add_argument("--replicas", type=int, default=200)
    ap.add_argument("--gamma-scale", type=float, default=1.0)
    args = ap.parse_args()

    for i in range(args.configs):
        rng = np.random.default_rng([2024, i])
        N, d, E = int(rng.integers(2, 11)), int(rng.integers(1, 21)), int(rng.integers(1, 6))
        fed = random_quadratic_federation(d, N, rng, spread=float(rng.uniform(0, 2)), sigma=float(rng.uniform(0, 1)))
        models = [PM.bernoulli(float(rng.uniform(0.3, 0.9)), E)] * N
        w0 = fed.w_star + rng.normal(size=d)
        for scheme in "BC":
            rep = verify_bound(fed, models, scheme, args.rounds, args.replicas, w0, seed=i, gamma_scale=args.gamma_scale)
            ratio = np.max((rep.mean + 3 * rep.stderr) / rep.bound)
            status = "ok" if rep.passed else "FAILED " + ",".join(rep.failing)
            print(f"config {i:2d} N={N:2d} d={d:2d} E={E} {scheme}: z={int(rep.constants.z)} max ratio {ratio:.2e} {status}")


if __name__ == "__main__":
    main()
