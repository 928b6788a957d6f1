"""Round loop: synchronise, run local SGD for ``s_k`` steps, aggregate.

``run_training`` is the reference single-run simulator that produces
``RoundRecord`` streams, optional per-step traces for the averaged sequence
``wbar`` and applies membership events. ``simulate_batch`` runs many independent
replicas at once with vectorised numpy and is what the Monte Carlo campaigns use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import membership as mem
from .aggregation import RoundCoefficients, aggregate, coefficients, coefficients_batch
from .objectives import Federation, check_finite
from .participation import ParticipationModel, RoundParticipation, client_rng, common_E, sample_epochs, sample_round

GRAD_STREAM = 1


@dataclass(frozen=True)
class Staircase:
    eta0: float

    def __post_init__(self):
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")


@dataclass(frozen=True)
class TheoremSchedule:
    """``16E / (mu * ews) / (tau E + gamma)`` where ``ews = E[sum_k p_tau^k s^k]``."""

    mu: float
    E: int
    gamma: float
    ews: float

    @property
    def eta0(self) -> float:
        return learning_rate(self, 0)


def learning_rate(schedule, tau: int, shift_round: int = 0) -> float:
    """Step size for round ``tau``; after an objective shift at ``shift_round`` the clock restarts."""
    t = tau - shift_round
    if t < 0:
        raise ValueError("round precedes the last objective shift")
    if isinstance(schedule, Staircase):
        return schedule.eta0 / max(t, 1)
    return 16.0 * schedule.E / (schedule.mu * schedule.ews) / (t * schedule.E + schedule.gamma)


@dataclass
class TrainingConfig:
    E: int
    T: int
    scheme: str = "C"
    lr_schedule: Staircase | TheoremSchedule = field(default_factory=lambda: Staircase(0.1))
    seed: int = 0
    record_wbar: bool = False

    def __post_init__(self):
        if self.E < 1 or self.T < 0:
            raise ValueError("need E >= 1 and T >= 0")


@dataclass
class RoundTrace:
    """Everything needed to replay one round step by step."""

    w_start: np.ndarray
    eta: float
    p_tau: np.ndarray
    masks: np.ndarray  # (N, E), contiguous: first s_k slots are 1
    grads: np.ndarray  # (N, E, d), zero where masked out
    w_end: np.ndarray


@dataclass
class RoundRecord:
    round: int
    scheme: str
    participation: RoundParticipation
    coefficients: RoundCoefficients
    dist_sq: float
    global_loss: float
    eta: float
    discarded: bool
    n_clients: int
    trace: RoundTrace | None = None

    @property
    def sum_ps(self) -> float:
        return float(self.coefficients.p_tau @ self.participation.s)

    def row(self) -> dict:
        return {
            "round": self.round,
            "scheme": self.scheme,
            "eta": self.eta,
            "dist_sq": self.dist_sq,
            "global_loss": self.global_loss,
            "sum_ps": self.sum_ps,
            "K": self.participation.K,
            "discarded": int(self.discarded),
            "inactive_any": int(self.participation.inactive_any),
        }


def local_sgd(obj, w_start, steps: int, eta: float, rng: np.random.Generator, grads_out=None) -> np.ndarray:
    if eta <= 0:
        raise ValueError("eta must be positive")
    w = np.array(w_start, dtype=float)
    for i in range(steps):
        g = obj.stochastic_gradient(w, rng)
        if grads_out is not None:
            grads_out[i] = g
        w = w - eta * g
    return check_finite(w)


def run_round(
    w_global: np.ndarray,
    fed: Federation,
    models: Sequence[ParticipationModel],
    config: TrainingConfig,
    tau: int,
    eta: float,
    *,
    boost: tuple[int, float] | None = None,
    reference: Federation | None = None,
) -> tuple[np.ndarray, RoundRecord]:
    """One synchronous round starting from ``w_global`` (0-based round index ``tau``).

    ``boost=(client, factor)`` scales that client's coefficient (fast-reboot).
    Metrics are measured against ``reference`` (defaults to ``fed``).
    """
    E = common_E(models)
    if len(models) != fed.size:
        raise ValueError("need one participation model per client")
    part = sample_round(models, tau, config.seed)
    coeffs = coefficients(config.scheme, fed.p, part, E)
    if boost is not None:
        k, factor = boost
        coeffs.p_tau[k] *= factor
        coeffs.theta *= max(factor, 1.0)
    d = fed.dim
    deltas = np.zeros((fed.size, d))
    trace = None
    if config.record_wbar:
        grads = np.zeros((fed.size, E, d))
        masks = (np.arange(E)[None, :] < part.s[:, None]).astype(float)
    for k, obj in enumerate(fed.clients):
        rng = client_rng(config.seed, tau, k, GRAD_STREAM)
        out = grads[k] if config.record_wbar else None
        deltas[k] = local_sgd(obj, w_global, int(part.s[k]), eta, rng, out) - w_global
    if coeffs.discarded:
        w_new = np.array(w_global, dtype=float)
    else:
        w_new = aggregate(w_global, deltas, coeffs)
    if config.record_wbar:
        trace = RoundTrace(np.array(w_global), eta, coeffs.p_tau.copy(), masks, grads, w_new.copy())
    ref = fed if reference is None else reference
    diff = w_new - ref.w_star
    rec = RoundRecord(
        round=tau + 1,
        scheme=config.scheme,
        participation=part,
        coefficients=coeffs,
        dist_sq=float(diff @ diff),
        global_loss=float(ref.value(w_new) - ref.f_star),
        eta=eta,
        discarded=coeffs.discarded,
        n_clients=fed.size,
        trace=trace,
    )
    return w_new, rec


def wbar_sequence(trace: RoundTrace | None) -> np.ndarray:
    """Averaged virtual sequence over one round, shape ``(E + 1, d)``.

    ``wbar[i+1] = wbar[i] - eta * sum_k p_tau^k g_k[i] alpha_k[i]``; its endpoint equals
    the aggregated global weight.
    """
    if trace is None:
        raise ValueError("round has no per-step trace; enable record_wbar")
    steps = np.einsum("k,ke,ked->ed", trace.p_tau, trace.masks, trace.grads)
    out = np.empty((steps.shape[0] + 1, trace.w_start.shape[0]))
    out[0] = trace.w_start
    out[1:] = trace.w_start - trace.eta * np.cumsum(steps, axis=0)
    return out


def local_paths(trace: RoundTrace) -> np.ndarray:
    """Per-client local iterates over one round, shape ``(N, E + 1, d)``."""
    steps = trace.masks[..., None] * trace.grads
    N, E, d = steps.shape
    out = np.empty((N, E + 1, d))
    out[:, 0] = trace.w_start
    out[:, 1:] = trace.w_start - trace.eta * np.cumsum(steps, axis=1)
    return out


@dataclass
class _ShiftState:
    shift_round: int = 0
    boost: tuple[int, float, int] | None = None  # (client, delta0, tau0)


def run_training(
    fed: Federation,
    config: TrainingConfig,
    models: Sequence[ParticipationModel],
    membership: Sequence["mem.MembershipEvent"] = (),
    w0: np.ndarray | None = None,
    *,
    region_radius: float | None = None,
) -> list[RoundRecord]:
    """Run ``config.T`` rounds; membership events fire before the round they name.

    Objective shifts (arrivals, excluding departures) restart the step-size clock.
    An included departure keeps the objective and silences the client for good.
    """
    models = list(models)
    w = np.zeros(fed.dim) if w0 is None else np.array(w0, dtype=float)
    events = sorted(membership, key=lambda e: e.round)
    state = _ShiftState()
    records: list[RoundRecord] = []
    schedule = config.lr_schedule
    for tau in range(config.T):
        for ev in [e for e in events if e.round == tau]:
            fed, models, schedule, shifted = _apply_event(ev, fed, models, config, schedule, w, tau, region_radius)
            if shifted:
                state.shift_round = tau
            if ev.kind == "arrival":
                state.boost = (fed.size - 1, ev.fast_reboot_delta0, tau) if ev.fast_reboot_delta0 else None
            elif state.boost is not None and ev.kind == "departure" and shifted:
                l, d0, t0 = state.boost
                if ev.client == l:
                    state.boost = None
                elif ev.client < l:
                    state.boost = (l - 1, d0, t0)
        eta = learning_rate(schedule, tau, state.shift_round)
        boost = None
        if state.boost is not None:
            l, d0, t0 = state.boost
            boost = (l, mem.boosted_coefficient(1.0, d0, tau, t0))
        w, rec = run_round(w, fed, models, config, tau, eta, boost=boost)
        records.append(rec)
    return records


def _apply_event(ev, fed, models, config, schedule, w, tau, region_radius):
    E = common_E(models)
    if ev.kind == "arrival":
        new_fed, _ = mem.apply_arrival(fed, ev)
        model = ev.participation or ParticipationModel.always_full(E)
        models = models + [model]
        return new_fed, models, _rescale(schedule, new_fed, models, config, w, region_radius), True
    policy = ev.policy
    if policy == "auto":
        policy = mem.decide_departure(
            fed, models, config.scheme, ev.client, tau, config.T, w, region_radius=region_radius
        ).decision
    if policy == "include":
        new_fed, _ = mem.apply_departure(fed, ev.client, "include")
        models = list(models)
        models[ev.client] = ParticipationModel.inactive(E)
        return new_fed, models, schedule, False
    new_fed, _ = mem.apply_departure(fed, ev.client, "exclude")
    models = [m for i, m in enumerate(models) if i != ev.client]
    return new_fed, models, _rescale(schedule, new_fed, models, config, w, region_radius), True


def _rescale(schedule, fed, models, config, w, region_radius):
    if isinstance(schedule, Staircase):
        return schedule
    from .analysis import theorem_constants

    consts = theorem_constants(fed, config.scheme, models, w0=w, region_radius=region_radius)
    return consts.schedule()


def _stack_quadratics(fed: Federation):
    A = np.stack([c.A for c in fed.clients])
    b = np.stack([c.b for c in fed.clients])
    sig = np.array([c.sigma for c in fed.clients]) / np.sqrt(fed.dim)
    return A, b, sig


def batch_local_steps(fed, W, s, eta, E, rng, on_step=None):
    """Local SGD for all replicas and clients at once.

    ``W`` is ``(R, d)`` synchronised weights, ``s`` is ``(R, N)`` epoch counts.
    Returns local end points ``(R, N, d)``. ``on_step(i, local, grads, noise, active)``
    is called before each step for diagnostics.
    """
    R, d = W.shape
    N = fed.size
    local = np.repeat(W[:, None, :], N, axis=1)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), (R,))[:, None, None]
    quad = fed.is_quadratic
    if quad:
        A, b, sig = _stack_quadratics(fed)
    for i in range(E):
        active = (s > i)
        if not active.any():
            break
        if quad:
            full = np.einsum("rnd,nde->rne", local, A) - b
            noise = rng.normal(size=(R, N, d)) * sig[None, :, None]
        else:
            full = np.stack([c.gradient(local[:, k]) for k, c in enumerate(fed.clients)], axis=1)
            sto = np.stack([c.stochastic_gradient(local[:, k], rng) for k, c in enumerate(fed.clients)], axis=1)
            noise = sto - full
        if on_step is not None:
            on_step(i, local, full, noise, active)
        local = local - eta * (full + noise) * active[..., None]
    return local


def simulate_batch(
    fed: Federation,
    models: Sequence[ParticipationModel],
    scheme: str,
    T: int,
    schedule,
    w0: np.ndarray,
    replicas: int,
    seed: int,
    *,
    coefficient_scale: np.ndarray | None = None,
) -> np.ndarray:
    """Squared distance to ``w*`` for ``replicas`` independent runs, shape ``(T + 1, R)``.

    Row 0 is the initial point. Discarded scheme-A rounds leave a replica in place
    but still advance its step-size clock.
    """
    E = common_E(models)
    p = fed.p
    W = np.repeat(np.asarray(w0, dtype=float)[None, :], replicas, axis=0)
    out = np.empty((T + 1, replicas))
    w_star = fed.w_star
    out[0] = np.sum((W - w_star) ** 2, axis=1)
    for tau in range(T):
        rng = np.random.default_rng([seed, 2, tau])
        s = sample_epochs(models, replicas, rng)
        p_tau, _ = coefficients_batch(scheme, p, s, E)
        if coefficient_scale is not None:
            p_tau = p_tau * coefficient_scale
        eta = learning_rate(schedule, tau)
        local = batch_local_steps(fed, W, s, eta, E, rng)
        W = W + np.einsum("rn,rnd->rd", p_tau, local - W[:, None, :])
        out[tau + 1] = np.sum((W - w_star) ** 2, axis=1)
    return out
