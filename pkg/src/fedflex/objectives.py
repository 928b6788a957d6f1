"""Local objectives with exactly computable constants.

Two families are supported: quadratics ``F(w) = 1/2 w'Aw - b'w + c`` with
synthetic additive Gaussian gradient noise, and L2-regularised logistic
regression with minibatch gradients. Parameter vectors are plain 1-d numpy
arrays throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Protocol, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


def _check_dim(w: np.ndarray, dim: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != dim:
        raise DimensionError(f"expected vectors of length {dim}, got shape {w.shape}")
    return w


def check_finite(w: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("parameter vector contains NaN or Inf")
    return w


class LocalObjective(Protocol):
    kind: str

    @property
    def dim(self) -> int: ...

    def value(self, w: np.ndarray) -> float: ...

    def gradient(self, w: np.ndarray) -> np.ndarray: ...

    def stochastic_gradient(self, w: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...

    def hessian(self, w: np.ndarray) -> np.ndarray: ...

    @property
    def minimizer(self) -> np.ndarray: ...

    @property
    def min_value(self) -> float: ...


@dataclass(eq=False)
class QuadraticObjective:
    """``1/2 w'Aw - b'w + c`` with gradient noise of total variance ``sigma**2``.

    The noise is isotropic Gaussian with per-coordinate std ``sigma/sqrt(d)``
    so that ``E||g - grad||^2 == sigma**2`` exactly.
    """

    A: np.ndarray
    b: np.ndarray
    c: float = 0.0
    sigma: float = 0.0
    kind: str = field(default="quadratic", init=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        d = self.b.shape[0]
        if self.A.shape != (d, d):
            raise DimensionError(f"A has shape {self.A.shape}, b has length {d}")
        if np.max(np.abs(self.A - self.A.T), initial=0.0) > 1e-12:
            raise ValueError("A must be symmetric")
        self.A = 0.5 * (self.A + self.A.T)
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.eigenvalues[0] <= 0:
            raise ValueError("A must be positive definite (strong convexity)")

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.A)

    @property
    def smoothness(self) -> float:
        return float(self.eigenvalues[-1])

    @property
    def strong_convexity(self) -> float:
        return float(self.eigenvalues[0])

    def value(self, w):
        w = _check_dim(w, self.dim)
        return 0.5 * np.einsum("...i,ij,...j->...", w, self.A, w) - w @ self.b + self.c

    def gradient(self, w):
        w = _check_dim(w, self.dim)
        return w @ self.A - self.b

    def stochastic_gradient(self, w, rng):
        g = self.gradient(w)
        if self.sigma == 0:
            return g
        return g + rng.normal(0.0, self.sigma / np.sqrt(self.dim), size=g.shape)

    def hessian(self, w=None):
        return self.A.copy()

    @cached_property
    def minimizer(self) -> np.ndarray:
        return np.linalg.solve(self.A, self.b)

    @property
    def min_value(self) -> float:
        return float(self.value(self.minimizer))

    def noise_bound(self) -> float:
        return float(self.sigma)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _log1pexp(z):
    return np.logaddexp(0.0, z)


@dataclass(eq=False)
class LogisticObjective:
    """Mean logistic loss plus ``lam/2 ||w||^2`` over a fixed sample set."""

    X: np.ndarray
    y: np.ndarray
    lam: float
    batch: int
    kind: str = field(default="logistic", init=False)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.shape[0] != self.y.shape[0]:
            raise DimensionError("samples and labels differ in length")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise ValueError("labels must be 0 or 1")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        self.batch = int(self.batch)
        if not 1 <= self.batch <= self.n:
            raise ValueError("batch must lie in [1, number of samples]")

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def value(self, w):
        w = _check_dim(w, self.dim)
        z = w @ self.X.T
        loss = np.mean(_log1pexp(z) - self.y * z, axis=-1)
        return loss + 0.5 * self.lam * np.sum(w * w, axis=-1)

    def _grad_on(self, w, idx):
        Xb = self.X[idx]
        r = _sigmoid(Xb @ w) - self.y[idx]
        return Xb.T @ r / len(idx) + self.lam * w

    def gradient(self, w):
        w = _check_dim(w, self.dim)
        if w.ndim == 1:
            return self._grad_on(w, np.arange(self.n))
        r = _sigmoid(w @ self.X.T) - self.y
        return r @ self.X / self.n + self.lam * w

    def stochastic_gradient(self, w, rng):
        w = _check_dim(w, self.dim)
        if self.batch == self.n:
            return self.gradient(w)
        if w.ndim == 1:
            return self._grad_on(w, rng.choice(self.n, size=self.batch, replace=False))
        return np.stack([self._grad_on(row, rng.choice(self.n, size=self.batch, replace=False)) for row in w])

    def hessian(self, w):
        w = _check_dim(w, self.dim)
        s = _sigmoid(self.X @ w)
        return (self.X.T * (s * (1 - s))) @ self.X / self.n + self.lam * np.eye(self.dim)

    @property
    def smoothness(self) -> float:
        return float(np.linalg.eigvalsh(self.X.T @ self.X / (4 * self.n))[-1] + self.lam)

    @property
    def strong_convexity(self) -> float:
        return float(self.lam)

    def noise_bound(self) -> float:
        # per-sample residual times feature lies in a ball of radius max||x||
        if self.batch == self.n:
            return 0.0
        r = np.max(np.linalg.norm(self.X, axis=1))
        frac = (self.n - self.batch) / (self.batch * (self.n - 1))
        return float(2.0 * r * np.sqrt(frac))

    @cached_property
    def minimizer(self) -> np.ndarray:
        return minimize_gd(self.value, self.gradient, np.zeros(self.dim), self.smoothness)

    @property
    def min_value(self) -> float:
        return float(self.value(self.minimizer))


def minimize_gd(value, gradient, w0, L, tol=1e-10, max_iter=10**6):
    """Full-batch gradient descent with Armijo backtracking until ``||grad|| <= tol``."""
    w = np.array(w0, dtype=float)
    step = 1.0 / L
    for _ in range(max_iter):
        g = gradient(w)
        gn2 = float(g @ g)
        if np.sqrt(gn2) <= tol:
            return w
        f = value(w)
        t = 2.0 * step
        while True:
            cand = w - t * g
            if value(cand) <= f - 0.5 * t * gn2 or t < 1e-16:
                break
            t *= 0.5
        w = cand
    raise RuntimeError("gradient descent did not reach tolerance")


def full_gradient(obj: LocalObjective, w) -> np.ndarray:
    return obj.gradient(w)


def stochastic_gradient(obj: LocalObjective, w, rng: np.random.Generator) -> np.ndarray:
    return obj.stochastic_gradient(w, rng)


@dataclass
class ObjectiveConstants:
    L: float
    mu: float
    sigma: float
    G: float
    gamma: float


@dataclass(eq=False)
class Federation:
    clients: list
    n_samples: np.ndarray

    def __post_init__(self):
        self.clients = list(self.clients)
        self.n_samples = np.asarray(self.n_samples, dtype=float)
        if len(self.clients) == 0:
            raise ValueError("a federation needs at least one client")
        if self.n_samples.shape != (len(self.clients),) or np.any(self.n_samples <= 0):
            raise ValueError("need one positive sample count per client")
        dims = {c.dim for c in self.clients}
        if len(dims) != 1:
            raise DimensionError(f"clients disagree on dimension: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.clients[0].dim

    @property
    def size(self) -> int:
        return len(self.clients)

    @property
    def p(self) -> np.ndarray:
        return self.n_samples / self.n_samples.sum()

    def value(self, w):
        return sum(pk * c.value(w) for pk, c in zip(self.p, self.clients))

    def gradient(self, w):
        return sum(pk * c.gradient(w) for pk, c in zip(self.p, self.clients))

    def hessian(self, w):
        return sum(pk * c.hessian(w) for pk, c in zip(self.p, self.clients))

    @property
    def is_quadratic(self) -> bool:
        return all(c.kind == "quadratic" for c in self.clients)

    @cached_property
    def w_star(self) -> np.ndarray:
        return global_optimum(self)

    @cached_property
    def f_star(self) -> float:
        return float(self.value(self.w_star))

    def gammas(self, w=None) -> np.ndarray:
        """Non-IID gaps ``F_k(w) - F_k*`` (at ``w*`` by default), clamped at 0."""
        w = self.w_star if w is None else w
        gaps = np.array([c.value(w) - c.min_value for c in self.clients])
        return np.where(gaps < 0, 0.0, gaps)

    @property
    def Gamma(self) -> float:
        return float(self.p @ self.gammas())

    def with_client(self, obj, n: float) -> "Federation":
        return Federation(self.clients + [obj], np.append(self.n_samples, n))

    def without_client(self, index: int) -> "Federation":
        if self.size < 2:
            raise ValueError("cannot remove the last client")
        keep = [i for i in range(self.size) if i != index]
        return Federation([self.clients[i] for i in keep], self.n_samples[keep])


def global_optimum(fed: Federation) -> np.ndarray:
    p = fed.p
    if fed.is_quadratic:
        A = sum(pk * c.A for pk, c in zip(p, fed.clients))
        b = sum(pk * c.b for pk, c in zip(p, fed.clients))
        assert np.linalg.eigvalsh(A)[0] > 0, "aggregate matrix is singular"
        return np.linalg.solve(A, b)
    L = max(c.smoothness for c in fed.clients)
    return minimize_gd(fed.value, fed.gradient, np.zeros(fed.dim), L)


def grad_sup_on_ball(obj, center, radius) -> float:
    """Upper bound on ``||grad F(w)||`` over the ball, via the Lipschitz gradient."""
    return float(np.linalg.norm(obj.gradient(center)) + obj.smoothness * radius)


def compute_constants(fed: Federation, region_radius: float) -> list[ObjectiveConstants]:
    """Per-client constants; ``L`` and ``mu`` are shared across the federation.

    ``G`` bounds ``sqrt(E||g||^2)`` on the ball of ``region_radius`` around ``w*``.
    """
    if region_radius <= 0:
        raise ValueError("region_radius must be positive")
    L = max(c.smoothness for c in fed.clients)
    mu = min(c.strong_convexity for c in fed.clients)
    w_star = fed.w_star
    sigmas = [c.noise_bound() for c in fed.clients]
    sups = [grad_sup_on_ball(c, w_star, region_radius) for c in fed.clients]
    G = max(s + 3 * sg for s, sg in zip(sups, sigmas))
    gammas = fed.gammas()
    return [ObjectiveConstants(L=L, mu=mu, sigma=sg, G=G, gamma=float(gm)) for sg, gm in zip(sigmas, gammas)]


def random_quadratic_federation(
    dim: int,
    n_clients: int,
    rng: np.random.Generator,
    eig_range: tuple[float, float] = (1.0, 4.0),
    spread: float = 1.0,
    sigma: float | Sequence[float] = 0.0,
    n_samples: Sequence[float] | None = None,
) -> Federation:
    """Random PSD quadratics ``1/2 (w - m_k)' A_k (w - m_k)``, so each ``F_k* = 0``.

    Local minimizers ``m_k`` are drawn as ``spread * N(0, I)``.
    """
    lo, hi = eig_range
    sigmas = np.broadcast_to(np.asarray(sigma, dtype=float), (n_clients,))
    clients = []
    for k in range(n_clients):
        Q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        eigs = rng.uniform(lo, hi, size=dim)
        A = (Q * eigs) @ Q.T
        A = 0.5 * (A + A.T)
        m = spread * rng.normal(size=dim)
        clients.append(QuadraticObjective(A, A @ m, 0.5 * m @ A @ m, float(sigmas[k])))
    if n_samples is None:
        n_samples = rng.integers(50, 500, size=n_clients)
    return Federation(clients, n_samples)
