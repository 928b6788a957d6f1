"""Shared synthetic setups for the experiment scripts."""

import numpy as np

from fedflex import io as fio
from fedflex.participation import ParticipationModel as PM, generate_trace

TRACE_NAMES = ("T0", "T30", "T50", "T70", "T90")


def trace_models(n: int, E: int, seed: int = 0) -> list[PM]:
    """Clients cycle through the five fraction-trace profiles."""
    out = []
    for k in range(n):
        name = TRACE_NAMES[k % len(TRACE_NAMES)]
        out.append(PM.trace(generate_trace(name, 1000, E, fio.trace_rng(seed, name, k)), E))
    return out


def median(xs) -> float:
    return float(np.median(xs))
