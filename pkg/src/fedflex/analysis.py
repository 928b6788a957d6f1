"""Convergence-bound constants and the numerical checks built on them."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from math import comb
from typing import Sequence

import numpy as np

from .aggregation import coefficients_batch, expectation, theta_for
from .objectives import Federation, compute_constants
from .participation import ParticipationModel, common_E, pmf, sample_epochs
from .trainer import TheoremSchedule, batch_local_steps, learning_rate, simulate_batch


# --------------------------------------------------------------------------
# expectations of coefficient functionals


def _marginal(scheme, p, models, fn):
    """``sum_k E[fn(p_tau^k, s^k, k)]`` computed client by client (schemes B, C only)."""
    E = common_E(models)
    out = []
    ss = np.arange(E + 1)
    for k, m in enumerate(models):
        pt, _ = coefficients_batch(scheme, p[k : k + 1], ss[:, None], E)
        out.append(pmf(m) @ fn(pt[:, 0], ss, k))
    return np.array(out)


@dataclass
class CoefficientMoments:
    """Per-client ``E[p s]`` and ``E[p^2 s]``, plus ``E[(sum p - 2)_+ sum p s]``."""

    ps: np.ndarray
    p2s: np.ndarray
    excess: float
    stderr: float = 0.0
    exact: bool = True

    @property
    def ews(self) -> float:
        return float(self.ps.sum())


def coefficient_moments(scheme, p, models, *, seed=0, draws=None) -> CoefficientMoments:
    p = np.asarray(p, dtype=float)
    kw = {} if draws is None else {"draws": draws}
    if scheme == "A":
        N = len(p)

        def fn(s, pt):
            excess = np.maximum(pt.sum(axis=1) - 2.0, 0.0) * (pt * s).sum(axis=1)
            return np.column_stack([pt * s, pt**2 * s, excess])

        res = expectation("A", p, models, fn, seed=seed, **kw)
        v = np.asarray(res.value)
        se = float(np.asarray(res.stderr)[-1]) if not res.exact else 0.0
        return CoefficientMoments(v[:N], v[N : 2 * N], float(v[-1]), se, res.exact)
    ps = _marginal(scheme, p, models, lambda pt, s, k: pt * s)
    p2s = _marginal(scheme, p, models, lambda pt, s, k: pt**2 * s)
    if scheme == "B":
        # sum_k p_tau^k = 1 < 2 always
        return CoefficientMoments(ps, p2s, 0.0)

    def fn(s, pt):
        return np.maximum(pt.sum(axis=1) - 2.0, 0.0) * (pt * s).sum(axis=1)

    res = expectation(scheme, p, models, fn, seed=seed, **kw)
    return CoefficientMoments(ps, p2s, float(res.value), float(res.stderr), res.exact)


def detect_z(scheme, p, models, tol: float = 1e-9, *, moments: CoefficientMoments | None = None) -> bool:
    """Whether ``E[p_tau^k s^k] / p^k`` differs across clients (structural bias present)."""
    p = np.asarray(p, dtype=float)
    m = coefficient_moments(scheme, p, models) if moments is None else moments
    ratio = m.ps / p
    spread = ratio.max() - ratio.min()
    if not m.exact and m.stderr > 0:
        return bool(spread > 3 * m.stderr / p.min())
    return bool(spread > tol * ratio.mean())


# --------------------------------------------------------------------------
# theorem constants and bound curve


@dataclass
class TheoremConstants:
    scheme: str
    E: int
    N: int
    theta: float
    L: float
    mu: float
    G: float
    sigma: np.ndarray
    gammas: np.ndarray
    ews: float
    EB: float
    gamma: float
    D: float
    V: float
    V_init: float
    V_noise: float
    z: bool
    init_dist_sq: float
    v_mode: str = "supplementary"
    moments: CoefficientMoments | None = field(default=None, repr=False)

    @property
    def B(self) -> float:
        return self.EB

    @property
    def expected_weighted_epoch_sum(self) -> float:
        return self.ews

    @property
    def z_per_round(self) -> int:
        return int(self.z)

    def schedule(self) -> TheoremSchedule:
        return TheoremSchedule(mu=self.mu, E=self.E, gamma=self.gamma, ews=self.ews)

    @property
    def eta0(self) -> float:
        return learning_rate(self.schedule(), 0)

    def step_size_checks(self) -> dict[str, bool]:
        """Step-size preconditions used in the convergence argument at ``tau = 0``."""
        eta0 = self.eta0
        return {
            "eta0<=1/(2(1+theta)L)": bool(eta0 <= 1.0 / (2 * (1 + self.theta) * self.L) * (1 + 1e-12)),
            "eta0<=4/(mu*E*theta)": bool(eta0 <= 4.0 / (self.mu * self.E * self.theta) * (1 + 1e-12)),
        }

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "moments"}
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in out.items()}


def default_region_radius(fed: Federation, w0) -> float:
    r = 10.0 * float(np.linalg.norm(np.asarray(w0) - fed.w_star))
    return r if r > 0 else 1.0


def theorem_constants(
    fed: Federation,
    scheme: str,
    models: Sequence[ParticipationModel],
    E: int | None = None,
    *,
    w0=None,
    region_radius: float | None = None,
    v_mode: str = "supplementary",
    gamma_scale: float = 1.0,
    seed: int = 0,
) -> TheoremConstants:
    """Constants of the convergence bound ``(M_tau D + V) / (tau E + gamma)``.

    ``v_mode="main"`` uses ``E[B]`` in the noise term of ``V``; ``"supplementary"``
    adds ``2 E G^2 sum_k E[(p_tau^k)^2 s^k] / p^k`` (the extra averaged-sequence
    drift term), which is never smaller. ``gamma_scale`` exists only for negative
    controls: it rescales ``gamma`` and everything derived from it.
    """
    E = common_E(models) if E is None else E
    if len(models) != fed.size:
        raise ValueError("need one participation model per client")
    w0 = np.zeros(fed.dim) if w0 is None else np.asarray(w0, dtype=float)
    if region_radius is None:
        region_radius = default_region_radius(fed, w0)
    consts = compute_constants(fed, region_radius)
    L, mu, G = consts[0].L, consts[0].mu, consts[0].G
    sigma = np.array([c.sigma for c in consts])
    gammas = np.array([c.gamma for c in consts])
    p = fed.p
    N = fed.size
    theta = theta_for(scheme, N, E)
    mom = coefficient_moments(scheme, p, models, seed=seed)
    ews = mom.ews
    if ews <= 0:
        raise ValueError("E[sum p_tau s] = 0: no update is ever aggregated")
    drift = 2 * E * G**2 * float(np.sum(mom.p2s / p))
    EB = (
        2 * (2 + theta) * L * float(mom.ps @ gammas)
        + (2 + mu / (2 * (1 + theta) * L)) * E * (E - 1) * G**2 * (ews + theta * mom.excess)
        + drift
        + float(mom.p2s @ sigma**2)
    )
    if v_mode not in ("main", "supplementary"):
        raise ValueError("v_mode must be 'main' or 'supplementary'")
    noise_EB = EB + drift if v_mode == "supplementary" else EB
    gamma = max(32 * E * (1 + theta) * L / (mu * ews), 4 * E**2 * theta / ews) * gamma_scale
    D = 64 * E * float(mom.ps @ gammas) / (mu * ews)
    init = float(np.sum((w0 - fed.w_star) ** 2))
    V_init = gamma**2 * init
    V_noise = (16 * E / (mu * ews)) ** 2 * noise_EB / E
    return TheoremConstants(
        scheme=scheme, E=E, N=N, theta=theta, L=L, mu=mu, G=G, sigma=sigma, gammas=gammas,
        ews=ews, EB=EB, gamma=gamma, D=D, V=max(V_init, V_noise), V_init=V_init, V_noise=V_noise,
        z=detect_z(scheme, p, models, moments=mom), init_dist_sq=init, v_mode=v_mode, moments=mom,
    )


@dataclass
class BoundCurve:
    values: np.ndarray
    M: np.ndarray


def bound_curve(constants: TheoremConstants, z_schedule, tau_max: int) -> BoundCurve:
    """Bound values for ``tau = 0..tau_max``; ``M_tau`` sums ``z_t`` over ``t < tau``."""
    z = np.broadcast_to(np.asarray(z_schedule, dtype=float), (tau_max,))
    M = np.concatenate([[0.0], np.cumsum(z)])
    taus = np.arange(tau_max + 1)
    values = (M * constants.D + constants.V) / (taus * constants.E + constants.gamma)
    return BoundCurve(values=values, M=M)


def time_varying_bound(
    fed: Federation,
    scheme: str,
    models_by_round: Sequence[Sequence[ParticipationModel]],
    *,
    w0=None,
    region_radius: float | None = None,
    v_mode: str = "supplementary",
) -> BoundCurve:
    """Alternate bound for participation laws that change from round to round.

    ``gamma`` uses the smallest ``E[sum p s]`` over rounds, ``D`` the largest
    per-round value, and the noise part of ``V_tau`` accumulates
    ``E[B_t] / E[sum p_t s_t]^2``. The bound is
    ``M_tau D / (tau E + gamma) + V_tau / (tau E + gamma)^2``.
    """
    per = [
        theorem_constants(fed, scheme, ms, w0=w0, region_radius=region_radius, v_mode=v_mode)
        for ms in models_by_round
    ]
    E = per[0].E
    if any(c.E != E for c in per):
        raise ValueError("all rounds must share E")
    ews_min = min(c.ews for c in per)
    theta = per[0].theta
    L, mu = per[0].L, per[0].mu
    gamma = max(32 * E * (1 + theta) * L / (mu * ews_min), 4 * E**2 * theta / ews_min)
    D = max(c.D for c in per)
    extra = [2 * E * c.G**2 * float(np.sum(c.moments.p2s / fed.p)) if v_mode == "supplementary" else 0.0 for c in per]
    noise = np.concatenate([[0.0], np.cumsum([(c.EB + x) / c.ews**2 for c, x in zip(per, extra)])])
    V = np.maximum(gamma**2 * per[0].init_dist_sq, (16 * E / mu) ** 2 * noise)
    z = np.array([float(c.z) for c in per])
    M = np.concatenate([[0.0], np.cumsum(z)])
    taus = np.arange(len(per) + 1)
    denom = taus * E + gamma
    return BoundCurve(values=M * D / denom + V / denom**2, M=M)


# --------------------------------------------------------------------------
# Monte Carlo verification of the bound


@dataclass
class BoundReport:
    constants: TheoremConstants
    mean: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray
    checks: dict[str, bool]
    first_violation: int | None
    outside_region: float = 0.0  # fraction of replica-rounds beyond the region used for G

    @property
    def margin(self) -> np.ndarray:
        return self.bound + 3 * self.stderr - self.mean

    @property
    def bound_holds(self) -> bool:
        return self.first_violation is None

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    @property
    def failing(self) -> list[str]:
        return [k for k, v in self.checks.items() if not v]

    def to_dict(self) -> dict:
        rows = [
            {"round": t, "mean_dist_sq": float(m), "stderr": float(s), "bound": float(b), "margin": float(g)}
            for t, (m, s, b, g) in enumerate(zip(self.mean, self.stderr, self.bound, self.margin))
        ]
        return {
            "passed": self.passed,
            "checks": self.checks,
            "first_violation": self.first_violation,
            "outside_region": self.outside_region,
            "constants": self.constants.to_dict(),
            "rounds": rows,
        }


def _window_mean(x, lo, hi):
    n = len(x)
    return float(np.mean(x[int(lo * n) : max(int(hi * n), int(lo * n) + 1)]))


def verify_bound(
    fed: Federation,
    models: Sequence[ParticipationModel],
    scheme: str,
    T: int,
    replicas: int,
    w0,
    seed: int = 0,
    *,
    gamma_scale: float = 1.0,
    v_mode: str = "supplementary",
    region_radius: float | None = None,
) -> BoundReport:
    """Simulate ``replicas`` runs with the theorem step size and compare to the bound.

    The mean squared distance may exceed the bound by at most three standard
    errors at any round. Besides the inequality, the report checks the step-size
    preconditions and the qualitative trend: decay when no structural bias is
    present, a plateau otherwise (only asserted when the bias term ``D`` is
    non-zero). Iterates leaving the region on which ``G`` was computed are
    counted in ``outside_region``; the bound makes no claim about them.
    """
    if region_radius is None:
        region_radius = default_region_radius(fed, w0)
    c = theorem_constants(
        fed, scheme, models, w0=w0, region_radius=region_radius, v_mode=v_mode, gamma_scale=gamma_scale, seed=seed
    )
    dist = simulate_batch(fed, models, scheme, T, c.schedule(), w0, replicas, seed)
    mean = _compensated_mean(dist)
    stderr = dist.std(axis=1, ddof=1) / np.sqrt(replicas) if replicas > 1 else np.zeros(T + 1)
    bound = bound_curve(c, float(c.z), T).values
    bad = np.flatnonzero(mean > bound + 3 * stderr)
    checks = {"bound": bad.size == 0}
    checks.update(c.step_size_checks())
    if T >= 10:
        mid, late = _window_mean(mean, 0.4, 0.5), _window_mean(mean, 0.9, 1.0)
        if not c.z:
            checks["decay"] = late < mid or late <= 1e-20
        elif c.D > 0:
            checks["plateau"] = late >= 0.7 * mid
    outside = float(np.mean(dist > region_radius**2))
    return BoundReport(c, mean, stderr, bound, checks, int(bad[0]) if bad.size else None, outside)


def _compensated_mean(x: np.ndarray) -> np.ndarray:
    """Row means via math.fsum so the reduction does not depend on summation order."""
    import math

    return np.array([math.fsum(row) / row.size for row in x])


# --------------------------------------------------------------------------
# lemma checks on sampled rounds


@dataclass
class LemmaCheck:
    name: str
    lhs: np.ndarray
    rhs: np.ndarray
    slack: float

    @property
    def passed(self) -> bool:
        return bool(np.all(self.lhs <= self.rhs * (1 + self.slack)))


def lemma_checks(
    fed: Federation,
    models: Sequence[ParticipationModel],
    scheme: str,
    rounds: int = 10_000,
    seed: int = 0,
    *,
    radius: float = 1.0,
    slack: float = 0.05,
    chunk: int = 2_000,
) -> tuple[LemmaCheck, LemmaCheck]:
    """Empirical gradient-variance and local/averaged divergence inequalities.

    Rounds start from points drawn uniformly in a ball of ``radius`` around ``w*``
    and use the theorem's initial step size. ``G`` is computed on a ball of twice
    that radius so that local iterates stay inside it. Both sides are averaged over
    sampled rounds; the divergence check is made separately at every local step.
    """
    E = common_E(models)
    consts = theorem_constants(fed, scheme, models, w0=fed.w_star + radius, region_radius=2 * radius)
    eta = consts.eta0
    G, sigma = consts.G, consts.sigma
    p = fed.p
    d = fed.dim
    rng = np.random.default_rng([seed, 9])
    var_l = np.zeros(E)
    var_r = np.zeros(E)
    div_l = np.zeros(E)
    div_r = 0.0
    done = 0
    while done < rounds:
        m = min(chunk, rounds - done)
        u = rng.normal(size=(m, d))
        u *= (radius * rng.random(m) ** (1.0 / d) / np.linalg.norm(u, axis=1))[:, None]
        W = fed.w_star + u
        s = sample_epochs(models, m, rng)
        pt, disc = coefficients_batch(scheme, p, s, E)
        keep = ~disc
        wbar = W.copy()

        def on_step(i, local, full, noise, active):
            nonlocal wbar
            agg = np.einsum("rn,rnd->rd", pt, noise)
            var_l[i] += np.sum(np.sum(agg**2, axis=1)[keep])
            var_r[i] += np.sum(((pt**2) @ sigma**2)[keep])
            gap = np.sum((wbar[:, None, :] - local) ** 2, axis=2)
            div_l[i] += np.sum(np.sum(pt * gap, axis=1)[keep])
            wbar = wbar - eta * np.einsum("rn,rnd->rd", pt * active, full + noise)

        batch_local_steps(fed, W, s, eta, E, rng, on_step)
        rhs = (E - 1) * G**2 * eta**2 * (
            np.sum(pt * s, axis=1) + np.maximum(pt.sum(axis=1) - 2, 0.0) * np.sum(pt**2 / p * s, axis=1)
        )
        div_r += np.sum(rhs[keep])
        done += m
    n_kept = rounds  # normalisation cancels in the comparison
    return (
        LemmaCheck("gradient_variance", var_l / n_kept, var_r / n_kept, slack),
        LemmaCheck("local_global_divergence", div_l / n_kept, np.full(E, div_r / n_kept), slack),
    )


# --------------------------------------------------------------------------
# scheme expectation oracles


def _binom_weights(N, q):
    i = np.arange(N + 1)
    return np.array([comb(N, int(k)) for k in i], dtype=float) * q**i * (1 - q) ** (N - i)


def inverse_K_moment(N: int, q: float) -> float:
    """``E[1/K | K != 0]`` for ``K ~ Bin(N, q)``."""
    w = _binom_weights(N, q)
    i = np.arange(1, N + 1)
    return float(np.sum(w[1:] / i) / (1 - (1 - q) ** N))


def _enumerate_completeness(p, q):
    """Exact conditional moments of scheme-A coefficients over all ``2^N`` patterns."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    N = len(p)
    pats = ((np.arange(2**N)[:, None] >> np.arange(N)) & 1).astype(float)
    w = np.prod(np.where(pats > 0, q, 1 - q), axis=1)
    K = pats.sum(axis=1)
    nz = K > 0
    p0 = float(w[~nz].sum())
    wc = w[nz] / w[nz].sum()
    coef = N * p * pats[nz] / K[nz, None]
    return {
        "E_p": wc @ coef,
        "E_p2": wc @ coef**2,
        "E_pp": np.einsum("r,rk,rl->kl", wc, coef, coef),
        "E_invK": float(wc @ (1.0 / K[nz])),
        "P_K0": p0,
    }


def scheme_a_expectations(p, q, N: int | None = None) -> dict:
    """Scheme-A coefficient moments, closed form and by enumeration.

    ``q`` is a scalar (homogeneous) or per-client completion probabilities. Closed
    forms are provided for the homogeneous case and for the case where one client
    always completes and the rest share a common ``q``; ``closed`` is None otherwise.
    """
    p = np.asarray(p, dtype=float)
    N = len(p) if N is None else N
    qv = np.broadcast_to(np.asarray(q, dtype=float), (N,)).copy()
    enum = _enumerate_completeness(p, qv)
    closed = None
    if np.all(qv == qv[0]):
        qq = float(qv[0])
        inv = inverse_K_moment(N, qq)
        pp = N / (N - 1) * np.outer(p, p) * (1 - inv) if N > 1 else np.zeros((1, 1))
        np.fill_diagonal(pp, N * p**2 * inv)
        closed = {"E_p": p.copy(), "E_p2": N * p**2 * inv, "E_pp": pp, "E_invK": inv, "P_K0": (1 - qq) ** N}
    else:
        ones = np.flatnonzero(qv == 1.0)
        rest = np.delete(qv, ones[:1])
        if ones.size >= 1 and np.all(rest == rest[0]) and 0 < rest[0] < 1:
            k0, qq = ones[0], float(rest[0])
            E_p = p * (N * qq + (1 - qq) ** N - 1) / ((N - 1) * qq)
            E_p[k0] = p[k0] * (1 - (1 - qq) ** N) / qq
            closed = {"E_p": E_p, "P_K0": 0.0}
    return {"closed": closed, "enumerated": enum}


def scheme_bc_expectation_table(scheme: str, p, models: Sequence[ParticipationModel]) -> dict:
    """Exact ``E[sum p]``, ``E[sum p^2]``, ``E[sum p^2 s]`` and ``E[(sum p)(sum p s)]``.

    Clients are independent, so the product moment splits into diagonal terms and
    products of marginals.
    """
    if scheme not in ("B", "C"):
        raise ValueError("table is defined for schemes B and C")
    p = np.asarray(p, dtype=float)
    Ep = _marginal(scheme, p, models, lambda pt, s, k: pt)
    Ep2 = _marginal(scheme, p, models, lambda pt, s, k: pt**2)
    Ep2s = _marginal(scheme, p, models, lambda pt, s, k: pt**2 * s)
    Eps = _marginal(scheme, p, models, lambda pt, s, k: pt * s)
    cross = float(Ep2s.sum() + Ep.sum() * Eps.sum() - Ep @ Eps)
    return {"sum_p": float(Ep.sum()), "sum_p2": float(Ep2.sum()), "sum_p2s": float(Ep2s.sum()), "sum_p_sum_ps": cross}


def scheme_bc_monte_carlo(scheme: str, p, models, draws: int = 10**6, seed: int = 0) -> tuple[dict, dict]:
    """Monte Carlo estimates (and standard errors) of the same four quantities."""
    p = np.asarray(p, dtype=float)

    def fn(s, pt):
        return np.column_stack(
            [pt.sum(1), (pt**2).sum(1), (pt**2 * s).sum(1), pt.sum(1) * (pt * s).sum(1)]
        )

    from .aggregation import _monte_carlo

    res = _monte_carlo(scheme, p, models, fn, common_E(models), draws, seed)
    keys = ("sum_p", "sum_p2", "sum_p2s", "sum_p_sum_ps")
    return dict(zip(keys, map(float, res.value))), dict(zip(keys, map(float, res.stderr)))
