"""``fedflex`` command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io as fio
from .analysis import lemma_checks, verify_bound
from .experiments import arrival_experiment, compare_schemes, departure_experiment, run_cell
from .participation import TRACE_STATS, generate_trace

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"invalid --seeds value {text!r}") from exc
    if not seeds:
        raise UsageError("--seeds must list at least one seed")
    return seeds


def load_spec(args) -> fio.ExperimentSpec:
    if args.config is None:
        raise UsageError("--config is required")
    path = Path(args.config)
    raw = fio.read_config(path)
    if args.seeds is not None:
        raw["seeds"] = _parse_seeds(args.seeds)
    if args.scheme is not None:
        raw["schemes"] = [args.scheme]
    if not raw.get("seeds", [0]):
        raise UsageError("config lists no seeds")
    return fio.spec_from_dict(raw, base=path.parent)


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _w0(spec):
    return np.zeros(spec.federation.dim) if spec.w0 is None else spec.w0


# --------------------------------------------------------------------------
# commands


class _SimCell:
    def __init__(self, spec):
        self.spec = spec

    def __call__(self, cell):
        scheme, seed = cell
        s = self.spec
        return run_cell(s.federation, s.participation, scheme, seed, s.T, s.lr, _w0(s), s.membership)


def cmd_simulate(spec: fio.ExperimentSpec, out: Path, jobs: int = 1) -> int:
    cells = [(sc, seed) for sc in spec.schemes for seed in spec.seeds]
    results = _map(_SimCell(spec), cells, jobs)
    summary = {"command": "simulate", "cells": [], "per_scheme": {}}
    for (scheme, seed), records in zip(cells, results):
        fio.write_metrics(out / f"metrics_{scheme}_seed{seed}.csv", [r.row() for r in records])
        summary["cells"].append(
            {
                "scheme": scheme,
                "seed": seed,
                "final_dist_sq": records[-1].dist_sq if records else None,
                "final_loss": records[-1].global_loss if records else None,
            }
        )
    for scheme in spec.schemes:
        cells_s = [c for c in summary["cells"] if c["scheme"] == scheme and c["final_loss"] is not None]
        if cells_s:
            summary["per_scheme"][scheme] = {
                "mean_final_dist_sq": float(np.mean([c["final_dist_sq"] for c in cells_s])),
                "mean_final_loss": float(np.mean([c["final_loss"] for c in cells_s])),
            }
    fio.write_report(out / "summary.json", summary)
    return EXIT_OK


def cmd_compare_schemes(spec: fio.ExperimentSpec, out: Path, jobs: int = 1) -> int:
    if len(spec.schemes) < 2:
        raise UsageError("compare-schemes needs at least two schemes")
    levels = spec.levels or {"base": spec.participation}
    window = int(spec.options.get("final_window", 1))
    table = compare_schemes(spec.federation, levels, spec.schemes, spec.seeds, spec.T, spec.lr, _w0(spec), window)
    fio.write_report(out / "comparison.json", {"command": "compare-schemes", "schemes": spec.schemes, "levels": table})
    for name, row in table.items():
        cells = "  ".join(f"{sc}={v:.4g}" for sc, v in row["mean_final_loss"].items())
        imps = "  ".join(f"{k}={v:+.1f}%" for k, v in row["improvement_pct"].items())
        print(f"{name}: {cells}  {imps}")
    return EXIT_OK


def _single_event(spec, kind):
    events = [e for e in spec.membership if e.kind == kind]
    if len(events) != 1:
        raise UsageError(f"config must contain exactly one {kind} event")
    return events[0]


def cmd_arrival(spec: fio.ExperimentSpec, out: Path, jobs: int = 1) -> int:
    ev = _single_event(spec, "arrival")
    delta0 = ev.fast_reboot_delta0 or float(spec.options.get("fast_reboot_delta0", 2.0))
    scheme = spec.schemes[0]
    results = [
        arrival_experiment(spec.federation, spec.participation, ev, scheme, seed, spec.T, spec.lr, _w0(spec), delta0)
        for seed in spec.seeds
    ]
    rows = [{"seed": r.seed, "fast": r.fast, "vanilla": r.vanilla, "advantage": r.advantage} for r in results]
    report = {
        "command": "arrival",
        "scheme": scheme,
        "tau0": ev.round,
        "delta0": delta0,
        "seeds": rows,
        "median_advantage": float(np.median([r.advantage for r in results])),
    }
    fio.write_report(out / "arrival.json", report)
    print(f"arrival at round {ev.round}: median advantage {report['median_advantage']:g} rounds")
    return EXIT_OK


def cmd_departure(spec: fio.ExperimentSpec, out: Path, jobs: int = 1) -> int:
    ev = _single_event(spec, "departure")
    scheme = spec.schemes[0]
    results = [
        departure_experiment(
            spec.federation, spec.participation, ev.client, ev.round, scheme, seed, spec.T, spec.lr, _w0(spec),
            decide=(i == 0),
        )
        for i, seed in enumerate(spec.seeds)
    ]
    report = {
        "command": "departure",
        "scheme": scheme,
        "tau0": ev.round,
        "client": ev.client,
        "decision": results[0].decision,
        "simplified_decision": results[0].simplified,
        "seeds": [{"seed": r.seed, "crossing": r.crossing} for r in results],
        "median_crossing": float(np.median([r.crossing_or_horizon for r in results])),
    }
    fio.write_report(out / "departure.json", report)
    print(f"departure at round {ev.round}: median crossing {report['median_crossing']:g}, decision {report['decision']}")
    return EXIT_OK


def cmd_gen_traces(out: Path, length: int = 10_000, E: int = 10, seed: int = 0) -> int:
    failed = []
    for name, (mean, sd) in TRACE_STATS.items():
        x = generate_trace(name, length, E, fio.trace_rng(seed, name))
        fio.write_trace(out / f"{name}.trace", x, E)
        if abs(100 * x.mean() - mean) > 1.0 or abs(100 * x.std() - sd) > 1.0:
            failed.append(name)
        print(f"{name}: mean {100 * x.mean():.2f}% stdev {100 * x.std():.2f}%")
    if failed:
        print(f"traces off target: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_verify_theory(spec: fio.ExperimentSpec, out: Path, jobs: int = 1) -> int:
    opts = spec.options
    replicas = int(opts.get("replicas", 200))
    gamma_scale = float(opts.get("gamma_scale", 1.0))
    v_mode = opts.get("v_mode", "supplementary")
    lemma_rounds = int(opts.get("lemma_rounds", 10_000))
    report = {"command": "verify-theory", "schemes": {}, "failing": []}
    for scheme in spec.schemes:
        br = verify_bound(
            spec.federation, spec.participation, scheme, spec.T, replicas, _w0(spec), spec.seeds[0],
            gamma_scale=gamma_scale, v_mode=v_mode,
        )
        entry = br.to_dict()
        entry["z"] = int(br.constants.z)
        failing = [f"{scheme}:{k}" for k in br.failing]
        if lemma_rounds > 0:
            lemmas = lemma_checks(spec.federation, spec.participation, scheme, lemma_rounds, spec.seeds[0])
            entry["lemmas"] = {
                lc.name: {"lhs": lc.lhs, "rhs": lc.rhs, "slack": lc.slack, "passed": lc.passed} for lc in lemmas
            }
            failing += [f"{scheme}:{lc.name}" for lc in lemmas if not lc.passed]
        report["schemes"][scheme] = entry
        report["failing"] += failing
    report["passed"] = not report["failing"]
    fio.write_report(out / "verify_theory.json", report)
    if report["failing"]:
        for name in report["failing"]:
            print(f"FAILED {name}", file=sys.stderr)
        return EXIT_CHECK
    print("all checks passed")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedflex", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "compare-schemes", "arrival", "departure", "verify-theory", "gen-traces"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seeds", help="comma-separated seeds, overrides the config")
        p.add_argument("--scheme", choices=("A", "B", "C"), help="restrict to one scheme")
        p.add_argument("--jobs", type=int, default=1, help="parallel experiment cells")
        if name == "gen-traces":
            p.add_argument("--length", type=int, default=10_000)
            p.add_argument("--epochs", type=int, default=10, help="E used for the zero-epoch filter")
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "compare-schemes": cmd_compare_schemes,
    "arrival": cmd_arrival,
    "departure": cmd_departure,
    "verify-theory": cmd_verify_theory,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-traces":
            seed = _parse_seeds(args.seeds)[0] if args.seeds is not None else 0
            return cmd_gen_traces(out, args.length, args.epochs, seed)
        spec = load_spec(args)
        return COMMANDS[args.command](spec, out, args.jobs)
    except UsageError as exc:
        print(f"fedflex: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (fio.FormatError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"fedflex: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
