"""Per-round completed-epoch counts ``s`` for each client.

Every model is reduced to an exact pmf over ``{0, ..., E}``; sampling draws from
that pmf. Draws are independent across clients and rounds and are a pure
function of ``(seed, round, client index)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class ParticipationModel:
    kind: str
    E: int
    q: float | None = None
    fractions: tuple[float, ...] | None = None
    probs: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.E < 1:
            raise ValueError("E must be a positive integer")
        if self.kind == "bernoulli_epochs":
            if self.q is None or not 0 <= self.q <= 1:
                raise ValueError("bernoulli_epochs needs q in [0, 1]")
        elif self.kind == "fraction_trace":
            if not self.fractions:
                raise ValueError("fraction_trace needs a non-empty trace")
            object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
            for f in self.fractions:
                _check_fraction(f)
        elif self.kind == "categorical":
            probs = np.asarray(self.probs, dtype=float)
            if probs.shape != (self.E + 1,) or np.any(probs < 0):
                raise ValueError("categorical needs E+1 non-negative probabilities")
            if abs(probs.sum() - 1.0) > 1e-12:
                raise ValueError("categorical probabilities must sum to 1")
            object.__setattr__(self, "probs", tuple(float(x) for x in probs))
        elif self.kind != "always_full":
            raise ValueError(f"unknown participation kind {self.kind!r}")

    @classmethod
    def always_full(cls, E: int) -> "ParticipationModel":
        return cls("always_full", E)

    @classmethod
    def bernoulli(cls, q: float, E: int) -> "ParticipationModel":
        return cls("bernoulli_epochs", E, q=q)

    @classmethod
    def trace(cls, fractions: Sequence[float], E: int) -> "ParticipationModel":
        return cls("fraction_trace", E, fractions=tuple(fractions))

    @classmethod
    def categorical(cls, probs: Sequence[float], E: int) -> "ParticipationModel":
        return cls("categorical", E, probs=tuple(probs))

    @classmethod
    def inactive(cls, E: int) -> "ParticipationModel":
        probs = [0.0] * (E + 1)
        probs[0] = 1.0
        return cls("categorical", E, probs=tuple(probs))

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "E": self.E}
        if self.q is not None:
            out["q"] = self.q
        if self.fractions is not None:
            out["fractions"] = list(self.fractions)
        if self.probs is not None:
            out["probs"] = list(self.probs)
        return out

    @classmethod
    def from_dict(cls, d: dict, E: int | None = None) -> "ParticipationModel":
        E = int(d.get("E", E))
        kind = d["kind"]
        if kind == "always_full":
            return cls.always_full(E)
        if kind == "bernoulli_epochs":
            return cls.bernoulli(float(d["q"]), E)
        if kind == "fraction_trace":
            return cls.trace(d["fractions"], E)
        if kind == "categorical":
            return cls.categorical(d["probs"], E)
        raise ValueError(f"unknown participation kind {kind!r}")


def _check_fraction(fraction: float) -> None:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")


def epochs_from_fraction(fraction: float, E: int) -> int:
    _check_fraction(fraction)
    # round half up so that e.g. 2.5 epochs counts as 3
    return int(min(max(np.floor(fraction * E + 0.5), 0), E))


def pmf(model: ParticipationModel) -> np.ndarray:
    """Exact distribution of ``s`` over ``{0, ..., E}`` (cached on the model; read-only)."""
    cached = model.__dict__.get("_pmf")
    if cached is None:
        cached = _pmf(model)
        cached.flags.writeable = False
        object.__setattr__(model, "_pmf", cached)
    return cached


def _pmf(model: ParticipationModel) -> np.ndarray:
    E = model.E
    if model.kind == "always_full":
        out = np.zeros(E + 1)
        out[E] = 1.0
        return out
    if model.kind == "bernoulli_epochs":
        return stats.binom.pmf(np.arange(E + 1), E, model.q)
    if model.kind == "fraction_trace":
        counts = np.bincount([epochs_from_fraction(f, E) for f in model.fractions], minlength=E + 1)
        return counts / counts.sum()
    return np.asarray(model.probs, dtype=float)


def is_homogeneous(models: Sequence[ParticipationModel]) -> bool:
    if len({m.E for m in models}) > 1:
        return False
    pmfs = [pmf(m) for m in models]
    return all(np.max(np.abs(x - pmfs[0])) <= 1e-12 for x in pmfs[1:])


@dataclass
class RoundParticipation:
    s: np.ndarray
    E: int
    q: np.ndarray = field(init=False)
    K: int = field(init=False)
    inactive_any: bool = field(init=False)

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=int)
        if np.any(self.s < 0) or np.any(self.s > self.E):
            raise ValueError("epoch counts must lie in [0, E]")
        self.q = (self.s == self.E).astype(int)
        self.K = int(self.q.sum())
        self.inactive_any = bool(np.any(self.s == 0))


def common_E(models: Sequence[ParticipationModel]) -> int:
    Es = {m.E for m in models}
    if len(Es) != 1:
        raise ValueError(f"participation models disagree on E: {sorted(Es)}")
    return Es.pop()


def client_rng(seed: int, round_: int, client: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, round_, client])


def sample_round(models: Sequence[ParticipationModel], round_: int, seed: int) -> RoundParticipation:
    E = common_E(models)
    s = [client_rng(seed, round_, k).choice(E + 1, p=pmf(m)) for k, m in enumerate(models)]
    return RoundParticipation(np.array(s), E)


def sample_epochs(models: Sequence[ParticipationModel], size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a ``(size, N)`` block of epoch counts from one generator (bulk Monte Carlo)."""
    E = common_E(models)
    out = np.empty((size, len(models)), dtype=int)
    for k, m in enumerate(models):
        cdf = np.cumsum(pmf(m))
        cdf[-1] = 1.0
        out[:, k] = np.searchsorted(cdf, rng.random(size), side="right")
    return np.minimum(out, E)


# Reference completion statistics (percent of required epochs): name -> (mean, stdev)
TRACE_STATS = {
    "T0": (100.0, 0.0),
    "T30": (75.3, 14.8),
    "T50": (67.2, 11.3),
    "T70": (57.2, 11.7),
    "T90": (56.3, 14.8),
    "Thi": (82.5, 23.3),
    "Tmi": (74.1, 22.3),
    "Tlo": (51.2, 18.3),
}
NO_INACTIVE_TRACES = ("T0", "T30", "T50", "T70", "T90")


def _clipped_moments(m: float, s: float) -> tuple[float, float]:
    """Mean and stdev of ``clip(N(m, s^2), 0, 1)``."""
    a, b = (0.0 - m) / s, (1.0 - m) / s
    p_lo, p_hi = stats.norm.cdf(a), stats.norm.sf(b)
    p_mid = 1.0 - p_lo - p_hi
    tn = stats.truncnorm(a, b, loc=m, scale=s)
    mean_mid, var_mid = tn.mean(), tn.var()
    mean = p_mid * mean_mid + p_hi
    second = p_mid * (var_mid + mean_mid**2) + p_hi
    return float(mean), float(np.sqrt(max(second - mean**2, 0.0)))


def latent_gaussian(mean: float, stdev: float) -> tuple[float, float]:
    """Pre-clipping Gaussian parameters whose clipped moments hit ``(mean, stdev)``."""
    from scipy.optimize import fsolve

    if stdev == 0:
        return mean, 0.0

    def resid(x):
        mc, sc = _clipped_moments(x[0], np.exp(x[1]))
        return [mc - mean, sc - stdev]

    sol = fsolve(resid, [mean, np.log(stdev)], xtol=1e-12)
    return float(sol[0]), float(np.exp(sol[1]))


def generate_trace(name: str, n: int, E: int, rng: np.random.Generator) -> np.ndarray:
    """Synthetic completion fractions matching one of the reference trace statistics.

    Samples a Gaussian clipped to [0, 1] whose latent parameters are calibrated so
    the clipped distribution has the reference mean and stdev. For the traces that
    have no inactive rounds, draws mapping to zero epochs are redrawn.
    """
    mean, sd = (x / 100.0 for x in TRACE_STATS[name])
    if sd == 0:
        return np.full(n, mean)
    m, s = latent_gaussian(mean, sd)
    out = np.clip(rng.normal(m, s, size=n), 0.0, 1.0)
    if name in NO_INACTIVE_TRACES:
        bad = np.array([epochs_from_fraction(f, E) == 0 for f in out])
        while bad.any():
            out[bad] = np.clip(rng.normal(m, s, size=bad.sum()), 0.0, 1.0)
            bad = np.array([epochs_from_fraction(f, E) == 0 for f in out])
    return out
