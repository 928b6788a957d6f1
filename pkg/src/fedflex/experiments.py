"""Experiment drivers shared by the CLI, the scripts and the acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import membership as mem
from .analysis import theorem_constants
from .objectives import Federation
from .participation import ParticipationModel
from .trainer import RoundRecord, Staircase, TrainingConfig, run_training


def make_schedule(lr: dict, fed: Federation, scheme: str, models, w0, region_radius=None):
    kind = lr.get("kind", "staircase")
    if kind == "staircase":
        return Staircase(float(lr.get("eta0", 0.1)))
    if kind == "theorem":
        return theorem_constants(fed, scheme, models, w0=w0, region_radius=region_radius).schedule()
    raise ValueError(f"unknown learning-rate kind {kind!r}")


def run_cell(
    fed: Federation,
    models: Sequence[ParticipationModel],
    scheme: str,
    seed: int,
    T: int,
    lr: dict,
    w0=None,
    membership: Sequence[mem.MembershipEvent] = (),
) -> list[RoundRecord]:
    """One sequential simulation (a scheme x seed cell)."""
    E = models[0].E
    w0 = np.zeros(fed.dim) if w0 is None else np.asarray(w0, dtype=float)
    schedule = make_schedule(lr, fed, scheme, models, w0)
    config = TrainingConfig(E=E, T=T, scheme=scheme, lr_schedule=schedule, seed=seed)
    return run_training(fed, config, models, membership, w0)


def final_value(records: Sequence[RoundRecord], key: str = "global_loss", window: int = 1) -> float:
    vals = [getattr(r, key) for r in records[-window:]]
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# scheme comparison


def compare_schemes(
    fed: Federation,
    levels: dict[str, Sequence[ParticipationModel]],
    schemes: Sequence[str],
    seeds: Sequence[int],
    T: int,
    lr: dict,
    w0=None,
    window: int = 1,
) -> dict:
    """Final global loss for every (level, scheme, seed) cell plus pairwise improvements.

    Improvements are relative reductions of the mean final loss, in percent:
    ``100 (loss_A - loss_B) / loss_A`` for "B vs A" and likewise "C vs B".
    """
    if len(schemes) < 2:
        raise ValueError("comparison needs at least two schemes")
    table = {}
    for name, models in levels.items():
        finals = {
            sc: [final_value(run_cell(fed, models, sc, seed, T, lr, w0), window=window) for seed in seeds]
            for sc in schemes
        }
        means = {sc: float(np.mean(v)) for sc, v in finals.items()}
        row = {"final_loss": finals, "mean_final_loss": means, "improvement_pct": {}}
        for a, b in zip(schemes[:-1], schemes[1:]):
            row["improvement_pct"][f"{b}_vs_{a}"] = 100.0 * (means[a] - means[b]) / means[a] if means[a] > 0 else 0.0
        # fraction of seeds where the loss strictly drops along A -> B -> C
        order = sorted(schemes)
        ordered = np.all([np.array(finals[b]) < np.array(finals[a]) for a, b in zip(order[:-1], order[1:])], axis=0)
        row["ordered_fraction"] = float(np.mean(ordered))
        table[name] = row
    return table


# --------------------------------------------------------------------------
# arrivals


def rebound_round(records: Sequence[RoundRecord], tau0: int) -> int | None:
    """Rounds after the arrival until the loss (new objective) is back at its pre-arrival level.

    The reference is the loss recorded after round ``tau0 - 1`` (old objective).
    Returns ``1`` if the first post-arrival round already recovers, None if never.
    """
    if tau0 < 1:
        raise ValueError("arrival must follow at least one round")
    ref = records[tau0 - 1].global_loss
    for idx in range(tau0, len(records)):
        if records[idx].global_loss <= ref:
            return idx - tau0 + 1
    return None


@dataclass
class ArrivalResult:
    tau0: int
    seed: int
    vanilla: int | None
    fast: int | None
    horizon: int

    @property
    def advantage(self) -> int:
        """``vanilla - fast``; runs that never recover count as the full horizon."""
        v = self.horizon if self.vanilla is None else self.vanilla
        f = self.horizon if self.fast is None else self.fast
        return v - f


def arrival_experiment(
    fed: Federation,
    models: Sequence[ParticipationModel],
    event: mem.MembershipEvent,
    scheme: str,
    seed: int,
    T: int,
    lr: dict,
    w0=None,
    delta0: float = 2.0,
) -> ArrivalResult:
    """Run the same arrival with and without the fast-reboot boost."""
    vanilla = run_cell(fed, models, scheme, seed, T, lr, w0, [replace(event, fast_reboot_delta0=0.0)])
    fast = run_cell(fed, models, scheme, seed, T, lr, w0, [replace(event, fast_reboot_delta0=delta0)])
    tau0 = event.round
    return ArrivalResult(tau0, seed, rebound_round(vanilla, tau0), rebound_round(fast, tau0), T - tau0 + 1)


# --------------------------------------------------------------------------
# departures


def crossing_round(include: Sequence[RoundRecord], exclude: Sequence[RoundRecord], tau0: int) -> int | None:
    """Rounds after the departure until the excluded-objective loss drops to the kept one.

    ``include`` losses are measured on the original objective, ``exclude`` losses
    on the reduced one. ``1`` means the excluding run is already no worse after
    the first post-departure round.
    """
    for idx in range(tau0, min(len(include), len(exclude))):
        if exclude[idx].global_loss <= include[idx].global_loss:
            return idx - tau0 + 1
    return None


@dataclass
class DepartureResult:
    tau0: int
    seed: int
    crossing: int | None
    horizon: int
    decision: str | None = None
    simplified: str | None = None

    @property
    def crossing_or_horizon(self) -> int:
        return self.horizon if self.crossing is None else self.crossing


def departure_experiment(
    fed: Federation,
    models: Sequence[ParticipationModel],
    client: int,
    tau0: int,
    scheme: str,
    seed: int,
    T: int,
    lr: dict,
    w0=None,
    decide: bool = False,
) -> DepartureResult:
    runs = {}
    for policy in ("include", "exclude"):
        ev = mem.MembershipEvent(round=tau0, kind="departure", client=client, policy=policy)
        runs[policy] = run_cell(fed, models, scheme, seed, T, lr, w0, [ev])
    res = DepartureResult(tau0, seed, crossing_round(runs["include"], runs["exclude"], tau0), T - tau0 + 1)
    if decide:
        w = np.zeros(fed.dim) if w0 is None else np.asarray(w0, dtype=float)
        dec = mem.decide_departure(fed, models, scheme, client, tau0, T, w)
        res.decision, res.simplified = dec.decision, dec.simplified
    return res
