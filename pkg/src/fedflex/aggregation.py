"""Aggregation coefficients for the three schemes and the global update.

Scheme A keeps only complete clients, ``p_k N / K``; scheme B keeps the data
weights ``p_k``; scheme C rescales by ``E / s_k``. Besides the per-round
operations this module holds the expectation engine used by the analysis code:
exact enumeration over the joint participation distribution when it is small
enough, seeded Monte Carlo otherwise.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .participation import ParticipationModel, RoundParticipation, common_E, pmf, sample_epochs

SCHEMES = ("A", "B", "C")

ENUM_MAX_STATES = 200_000
SCHEME_A_ENUM_MAX_N = 20
MC_DRAWS = 10**6
MC_CHUNK = 50_000


class DiscardedRoundError(RuntimeError):
    pass


def _check_scheme(scheme: str) -> str:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    return scheme


def theta_for(scheme: str, N: int, E: int) -> float:
    return {"A": float(N), "B": 1.0, "C": float(E)}[_check_scheme(scheme)]


@dataclass
class RoundCoefficients:
    p_tau: np.ndarray
    discarded: bool
    theta: float


def coefficients_batch(scheme: str, p: np.ndarray, s: np.ndarray, E: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised coefficients for a ``(..., N)`` block of epoch counts.

    Returns ``(p_tau, discarded)``; discarded rows carry all-zero coefficients.
    """
    _check_scheme(scheme)
    p = np.asarray(p, dtype=float)
    s = np.asarray(s)
    N = p.shape[0]
    if scheme == "A":
        q = (s == E)
        K = q.sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(q, N * p / np.maximum(K, 1), 0.0)
        return out, (K[..., 0] == 0)
    if scheme == "B":
        return np.broadcast_to(p, s.shape).astype(float), np.zeros(s.shape[:-1], dtype=bool)
    with np.errstate(divide="ignore"):
        out = np.where(s > 0, E * p / np.maximum(s, 1), 0.0)
    return out, np.zeros(s.shape[:-1], dtype=bool)


def coefficients(scheme: str, p: Sequence[float], part: RoundParticipation, E: int | None = None) -> RoundCoefficients:
    E = part.E if E is None else E
    p = np.asarray(p, dtype=float)
    if abs(p.sum() - 1.0) > 1e-12:
        raise ValueError("data weights must sum to 1")
    p_tau, discarded = coefficients_batch(scheme, p, part.s, E)
    return RoundCoefficients(p_tau=np.array(p_tau), discarded=bool(discarded), theta=theta_for(scheme, len(p), E))


def aggregate(w_global: np.ndarray, deltas: np.ndarray, coeffs: RoundCoefficients) -> np.ndarray:
    """``w + sum_k p_tau^k delta_k``, reduced in fixed client order."""
    if coeffs.discarded:
        raise DiscardedRoundError("round was discarded (no complete clients); skip aggregation")
    out = np.array(w_global, dtype=float)
    for pk, dk in zip(coeffs.p_tau, deltas):
        if pk != 0.0:
            out = out + pk * np.asarray(dk, dtype=float)
    return out


@dataclass
class Expectation:
    value: np.ndarray
    stderr: np.ndarray
    exact: bool
    p_discard: float = 0.0


def _joint_states(models: Sequence[ParticipationModel]):
    pmfs = [pmf(m) for m in models]
    supports = [np.flatnonzero(x > 0) for x in pmfs]
    return pmfs, supports, int(np.prod([len(s) for s in supports], dtype=float))


def expectation(
    scheme: str,
    p: np.ndarray,
    models: Sequence[ParticipationModel],
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    *,
    max_states: int = ENUM_MAX_STATES,
    draws: int = MC_DRAWS,
    seed: int = 0,
) -> Expectation:
    """``E[fn(s, p_tau)]`` over the joint participation law, conditioned on non-discard.

    ``fn`` maps ``(s, p_tau)`` blocks of shape ``(M, N)`` to ``(M,)`` or ``(M, k)``.
    Scheme A reduces to the ``2^N`` completeness patterns (incomplete clients get
    zero coefficient, so their exact ``s`` only ever enters multiplied by 0 and is
    set to 0 in the enumeration). Other schemes enumerate the product of supports.
    Falls back to Monte Carlo with ``draws`` samples when the state space is too big.
    """
    p = np.asarray(p, dtype=float)
    E = common_E(models)
    N = len(models)
    pmfs, supports, n_states = _joint_states(models)
    if scheme == "A" and N <= SCHEME_A_ENUM_MAX_N:
        qc = np.array([x[E] for x in pmfs])
        pats = ((np.arange(2**N)[:, None] >> np.arange(N)) & 1).astype(bool)
        weights = np.prod(np.where(pats, qc, 1.0 - qc), axis=1)
        s = np.where(pats, E, 0)
        return _weighted("A", p, s, weights, E, fn)
    if n_states <= max_states:
        combos = np.array(list(itertools.product(*supports)), dtype=int).reshape(-1, N)
        weights = np.prod([pmfs[k][combos[:, k]] for k in range(N)], axis=0)
        return _weighted(scheme, p, combos, weights, E, fn)
    return _monte_carlo(scheme, p, models, fn, E, draws, seed)


def _weighted(scheme, p, s, weights, E, fn) -> Expectation:
    p_tau, discarded = coefficients_batch(scheme, p, s, E)
    keep = ~discarded & (weights > 0)
    total = weights[keep].sum()
    p_discard = float(weights[discarded].sum())
    if total <= 0:
        raise ZeroDivisionError("every round is discarded under this participation law")
    vals = np.asarray(fn(s[keep], p_tau[keep]), dtype=float)
    w = weights[keep] / total
    value = np.tensordot(w, vals, axes=(0, 0))
    return Expectation(value=value, stderr=np.zeros_like(value), exact=True, p_discard=p_discard)


def _monte_carlo(scheme, p, models, fn, E, draws, seed) -> Expectation:
    rng = np.random.default_rng([seed, 0xE7])
    total = None
    total_sq = None
    kept = 0
    discards = 0
    done = 0
    while done < draws:
        m = min(MC_CHUNK, draws - done)
        s = sample_epochs(models, m, rng)
        p_tau, discarded = coefficients_batch(scheme, p, s, E)
        keep = ~discarded
        vals = np.asarray(fn(s[keep], p_tau[keep]), dtype=float)
        part = vals.sum(axis=0)
        part_sq = (vals**2).sum(axis=0)
        total = part if total is None else total + part
        total_sq = part_sq if total_sq is None else total_sq + part_sq
        kept += int(keep.sum())
        discards += int(discarded.sum())
        done += m
    if kept == 0:
        raise ZeroDivisionError("every sampled round was discarded")
    mean = total / kept
    var = np.maximum(total_sq / kept - mean**2, 0.0)
    return Expectation(value=mean, stderr=np.sqrt(var / kept), exact=False, p_discard=discards / draws)


def expected_weighted_epochs(
    scheme: str, p: Sequence[float], models: Sequence[ParticipationModel], **kw
) -> np.ndarray:
    """Per-client ``E[p_tau^k s^k]`` (conditioned on non-discard for scheme A)."""
    p = np.asarray(p, dtype=float)
    if all(pmf(m)[0] == 1.0 for m in models):
        raise ValueError("every client is always inactive: E[sum p_tau s] = 0")
    if scheme in ("B", "C"):
        E = common_E(models)
        out = np.empty(len(models))
        for k, m in enumerate(models):
            ss = np.arange(E + 1)
            pt, _ = coefficients_batch(scheme, p[k : k + 1], ss[:, None], E)
            out[k] = pmf(m) @ (pt[:, 0] * ss)
        if out.sum() == 0:
            raise ValueError("E[sum p_tau s] = 0 violates the convergence precondition")
        return out
    res = expectation(scheme, p, models, lambda s, pt: pt * s, **kw)
    return np.asarray(res.value)
