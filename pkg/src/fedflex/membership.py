"""Device arrivals and departures.

An arrival always shifts the global objective; a departure either shifts it
(``exclude``) or keeps it and silences the device (``include``). The shift of the
optimum is bounded by ``2 sqrt(2L)/mu * (n_l / n') * sqrt(gap_l)`` where ``n'`` is
the larger of the two sample totals and ``gap_l`` is the departing/arriving
device's suboptimality at the optimum of the *other* objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .objectives import Federation, grad_sup_on_ball
from .participation import ParticipationModel


@dataclass
class MembershipEvent:
    round: int
    kind: str  # "arrival" | "departure"
    client: object = None  # LocalObjective for arrivals, index for departures
    n_samples: float = 1.0
    fast_reboot_delta0: float = 0.0
    policy: str = "exclude"  # "include" | "exclude" | "auto"
    participation: ParticipationModel | None = None

    def __post_init__(self):
        if self.kind not in ("arrival", "departure"):
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.round < 0:
            raise ValueError("event round must be non-negative")
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if self.fast_reboot_delta0 < 0:
            raise ValueError("fast_reboot_delta0 must be non-negative")
        if self.policy not in ("include", "exclude", "auto"):
            raise ValueError(f"unknown departure policy {self.policy!r}")


@dataclass
class ShiftReport:
    w_star_old: np.ndarray
    w_star_new: np.ndarray
    offset: float
    bound: float
    gamma_l: float
    gamma_l_tilde: float

    @property
    def holds(self) -> bool:
        return self.offset <= self.bound + 1e-9


def _shift_factor(clients) -> float:
    L = max(c.smoothness for c in clients)
    mu = min(c.strong_convexity for c in clients)
    return 2.0 * np.sqrt(2.0 * L) / mu


def _gap(obj, w) -> float:
    return max(float(obj.value(w) - obj.min_value), 0.0)


def apply_arrival(fed: Federation, event: MembershipEvent) -> tuple[Federation, ShiftReport]:
    obj = event.client
    new = fed.with_client(obj, event.n_samples)
    w_old, w_new = fed.w_star, new.w_star
    gamma_l = _gap(obj, w_old)
    frac = event.n_samples / (fed.n_samples.sum() + event.n_samples)
    bound = _shift_factor(new.clients) * frac * np.sqrt(gamma_l)
    report = ShiftReport(w_old, w_new, float(np.linalg.norm(w_old - w_new)), float(bound), gamma_l, _gap(obj, w_new))
    assert report.holds, f"arrival shift {report.offset} exceeds bound {report.bound}"
    return new, report


def apply_departure(fed: Federation, client: int, policy: str = "exclude") -> tuple[Federation, ShiftReport]:
    """Remove (``exclude``) or keep (``include``) a departing client.

    ``include`` returns the federation unchanged; the caller is responsible for
    silencing the client's participation.
    """
    if not 0 <= client < fed.size:
        raise IndexError(f"no client {client}")
    if fed.size < 2:
        raise ValueError("cannot remove the last client")
    obj = fed.clients[client]
    w_old = fed.w_star
    if policy == "include":
        gap = _gap(obj, w_old)
        return fed, ShiftReport(w_old, w_old, 0.0, 0.0, gap, gap)
    if policy != "exclude":
        raise ValueError(f"policy must be include or exclude, got {policy!r}")
    new = fed.without_client(client)
    w_new = new.w_star
    gamma_tilde = _gap(obj, w_new)
    frac = fed.n_samples[client] / fed.n_samples.sum()
    bound = _shift_factor(fed.clients) * frac * np.sqrt(gamma_tilde)
    report = ShiftReport(w_old, w_new, float(np.linalg.norm(w_old - w_new)), float(bound), _gap(obj, w_old), gamma_tilde)
    assert report.holds, f"departure shift {report.offset} exceeds bound {report.bound}"
    return new, report


def decomposition_residual(fed_old: Federation, fed_new: Federation, w) -> float:
    """Relative error of ``F_l(w) = (F_new(w) - n/n_new F_old(w)) / p_new^l`` for the last client."""
    l = fed_new.size - 1
    p_l = fed_new.p[l]
    ratio = fed_old.n_samples.sum() / fed_new.n_samples.sum()
    rhs = (fed_new.value(w) - ratio * fed_old.value(w)) / p_l
    lhs = fed_new.clients[l].value(w)
    return float(abs(lhs - rhs) / max(1.0, abs(lhs)))


def estimate_W(fed_new: Federation, l: int, radius: float, center=None) -> float:
    """Bound on gradient norms and Hessian spectral norms over a ball around the old optimum.

    Covers the arriving objective and both global objectives. Gradient norms use
    the Lipschitz-gradient bound, Hessians the smoothness constant, so the value
    is a true upper bound on the ball rather than a sampled estimate.
    """
    fed_old = fed_new.without_client(l)
    center = fed_old.w_star if center is None else np.asarray(center, dtype=float)
    objs = [fed_new.clients[l]]
    g = [grad_sup_on_ball(o, center, radius) for o in objs]
    L_new = max(c.smoothness for c in fed_new.clients)
    g.append(float(np.linalg.norm(fed_new.gradient(center)) + L_new * radius))
    g.append(float(np.linalg.norm(fed_old.gradient(center)) + L_new * radius))
    h = [o.smoothness for o in objs] + [L_new]
    return float(max(g + h))


def fast_reboot_radius(fed_new: Federation, l: int, W: float) -> float:
    """Radius around the old optimum inside which an extra step along ``-grad F_l`` helps."""
    if W <= 0:
        raise ValueError("W must be positive")
    fed_old = fed_new.without_client(l)
    w_old, w_new = fed_old.w_star, fed_new.w_star
    obj = fed_new.clients[l]
    gamma_l = _gap(obj, w_old)
    num = max(float(fed_new.value(w_old) - fed_new.value(w_new)), 0.0)
    if num == 0.0 and gamma_l == 0.0:
        return 0.0
    p_l = fed_new.p[l]
    factor = _shift_factor(fed_new.clients) * p_l * np.sqrt(gamma_l) + 1.0
    return float(num / (factor * p_l * W))


def boosted_coefficient(p_l: float, delta0: float, tau: int, tau0: int) -> float:
    """Arrival boost ``p_l (1 + delta0 / (tau - tau0 + 1)^2)``; ``delta0 = 2`` triples it at arrival."""
    if tau < tau0:
        raise ValueError("boost queried before the arrival round")
    return p_l + delta0 * p_l / (tau - tau0 + 1) ** 2


def departure_curves(D, V, gamma, V_tilde, gamma_tilde, E, tau0, T):
    """Bound with the device kept (over rounds ``tau0..T``) and bound at ``T`` with it excluded."""
    taus = np.arange(tau0, T + 1, dtype=float)
    f0 = ((taus - tau0) * D + V) / (taus * E + gamma)
    f1_T = V_tilde / ((T - tau0) * E + gamma_tilde)
    return f0, float(f1_T)


def _f0(D, V, gamma, E, tau0, tau):
    return ((tau - tau0) * D + V) / (tau * E + gamma)


def departure_decision(D, V, gamma, V_tilde, gamma_tilde, E, tau0, T) -> str:
    """``exclude`` iff the best achievable kept-bound is no better than the excluded bound at ``T``."""
    if not tau0 < T:
        raise ValueError("departure must happen before the deadline")
    # f0 is linear-fractional in tau, hence monotone: its minimum sits at an endpoint
    f0_min = min(_f0(D, V, gamma, E, tau0, tau0), _f0(D, V, gamma, E, tau0, T))
    f1_T = V_tilde / ((T - tau0) * E + gamma_tilde)
    return "exclude" if f0_min >= f1_T else "include"


def simplified_decision(D, V, gamma, Gamma_l, E, tau0, T) -> str:
    """Same rule with ``gamma_tilde = gamma`` and ``V_tilde = V / (tau0 E + gamma) + Gamma_l``."""
    V_tilde = V / (tau0 * E + gamma) + Gamma_l
    return departure_decision(D, V, gamma, V_tilde, gamma, E, tau0, T)


def crossing_deadline(D, V, gamma, V_tilde, gamma_tilde, E, tau0, horizon=10**6) -> int | None:
    """Smallest deadline ``T > tau0`` from which excluding wins, or None within ``horizon`` rounds."""
    Ts = np.arange(tau0 + 1, tau0 + horizon + 1, dtype=float)
    taus = np.arange(tau0, tau0 + horizon + 1, dtype=float)
    f0 = ((taus - tau0) * D + V) / (taus * E + gamma)
    running_min = np.minimum.accumulate(f0)[1:]
    f1 = V_tilde / ((Ts - tau0) * E + gamma_tilde)
    hit = np.flatnonzero(running_min >= f1)
    return int(Ts[hit[0]]) if hit.size else None


@dataclass
class DepartureDecision:
    decision: str
    simplified: str
    D: float
    V: float
    gamma: float
    V_tilde: float
    gamma_tilde: float
    Gamma_l: float

    @property
    def agree(self) -> bool:
        return self.decision == self.simplified


def decide_departure(
    fed: Federation,
    models: Sequence[ParticipationModel],
    scheme: str,
    client: int,
    tau0: int,
    T: int,
    w0,
    *,
    region_radius: float | None = None,
) -> DepartureDecision:
    """Evaluate the include/exclude rule from theorem constants of both federations.

    The kept bound uses the original constants. The excluded bound restarts at
    ``tau0`` with ``V_tilde`` whose first term is ``gamma_tilde^2 (sqrt(Delta) + offset)^2``,
    ``Delta = V / (tau0 E + gamma)`` being the kept bound at the departure.
    """
    from .analysis import theorem_constants

    before = theorem_constants(fed, scheme, models, w0=w0, region_radius=region_radius)
    new_fed, report = apply_departure(fed, client, "exclude")
    rest = [m for i, m in enumerate(models) if i != client]
    after = theorem_constants(new_fed, scheme, rest, w0=w0, region_radius=region_radius)
    delta = before.V / (tau0 * before.E + before.gamma)
    v_tilde = max(after.gamma**2 * (np.sqrt(delta) + report.offset) ** 2, after.V_noise)
    exact = departure_decision(before.D, before.V, before.gamma, v_tilde, after.gamma, before.E, tau0, T)
    simple = simplified_decision(before.D, before.V, before.gamma, report.gamma_l, before.E, tau0, T)
    return DepartureDecision(exact, simple, before.D, before.V, before.gamma, v_tilde, after.gamma, report.gamma_l)
