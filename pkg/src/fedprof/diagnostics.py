"""Empirical checks: normality of layer representations and O(1/t) convergence."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateError
from .nn_core import CaptureSelector, Model, forward_capture
from .selection import optimal_alpha, sample_with_replacement, score_client


def chi2_2_quantile(alpha: float) -> float:
    """Upper-alpha quantile of chi-square with 2 dof (closed form: -2 ln alpha)."""
    return -2.0 * math.log(alpha)


@dataclass(frozen=True)
class JBResult:
    stat: float
    skew: float
    excess_kurtosis: float
    n: int

    def reject_at(self, alpha: float = 0.05) -> bool:
        return self.stat > chi2_2_quantile(alpha)


def _moments(x: np.ndarray, axis=0):
    d = x - x.mean(axis=axis, keepdims=True)
    m2 = np.mean(d * d, axis=axis)
    m3 = np.mean(d ** 3, axis=axis)
    m4 = np.mean(d ** 4, axis=axis)
    return m2, m3, m4


def jarque_bera(samples) -> JBResult:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 20:
        raise ContractError(f"Jarque-Bera needs at least 20 samples, got {x.size}")
    m2, m3, m4 = _moments(x)
    if not m2 > 1e-300 or np.ptp(x) == 0:
        raise DegenerateError("zero sample variance")
    skew = m3 / m2 ** 1.5
    kurt = m4 / m2 ** 2 - 3.0
    return JBResult(float(x.size / 6.0 * (skew ** 2 + kurt ** 2 / 4.0)), float(skew), float(kurt), x.size)


def jarque_bera_columns(x: np.ndarray):
    """Vectorized JB statistic per column; degenerate columns get NaN."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 20:
        raise ContractError(f"Jarque-Bera needs at least 20 samples, got {n}")
    m2, m3, m4 = _moments(x)
    degenerate = (np.ptp(x, axis=0) == 0) | ~(m2 > 1e-300)
    safe = np.where(degenerate, 1.0, m2)
    skew = m3 / safe ** 1.5
    kurt = m4 / safe ** 2 - 3.0
    stat = n / 6.0 * (skew ** 2 + kurt ** 2 / 4.0)
    return np.where(degenerate, np.nan, stat)


@dataclass
class NormalityReport:
    stats: np.ndarray
    rejected: np.ndarray
    alpha: float
    excluded: list = field(default_factory=list)

    @property
    def rate(self) -> float:
        return float(np.mean(self.rejected)) if self.rejected.size else float("nan")

    def as_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "units_tested": int(self.rejected.size),
            "rejection_rate": self.rate,
            "excluded_units": list(self.excluded),
        }


def normality_report(captured: np.ndarray, alpha: float = 0.05) -> NormalityReport:
    stats = jarque_bera_columns(captured)
    ok = ~np.isnan(stats)
    return NormalityReport(stats[ok], stats[ok] > chi2_2_quantile(alpha), alpha,
                           [int(i) for i in np.flatnonzero(~ok)])


def normality_rejection_rate(model: Model, dataset, sel: CaptureSelector, alpha: float = 0.05,
                             min_samples: int = 200) -> NormalityReport:
    batch = dataset.as_batch() if hasattr(dataset, "as_batch") else dataset
    if len(batch) < min_samples:
        raise ContractError(f"normality check needs >= {min_samples} samples, got {len(batch)}")
    _, captured = forward_capture(model, batch, sel)
    return normality_report(captured, alpha)


@dataclass(frozen=True)
class QuadraticWorld:
    """Clients with objectives ``a_k/2 * ||theta - c_k||^2`` weighted by ``rho``."""

    a: np.ndarray
    c: np.ndarray
    rho: np.ndarray
    noise: float = 0.0  # per-coordinate bound of the uniform gradient noise

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).ravel()
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        rho = np.asarray(self.rho, dtype=float).ravel()
        if np.any(a <= 0):
            raise ContractError("every curvature a_k must be positive (strongly convex world)")
        if not (a.size == c.shape[0] == rho.size):
            raise ContractError("a, c and rho must describe the same clients")
        if abs(rho.sum() - 1.0) > 1e-12 or np.any(rho <= 0):
            raise ContractError("rho must be positive and sum to 1")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "rho", rho)

    @property
    def mu(self) -> float:
        return float(self.a.min())

    @property
    def L(self) -> float:
        return float(self.a.max())

    @property
    def theta_star(self) -> np.ndarray:
        w = self.rho * self.a
        return w @ self.c / w.sum()

    def objective(self, theta: np.ndarray) -> np.ndarray:
        """Global objective for one parameter vector or a stack of them (rows)."""
        theta = np.asarray(theta, dtype=float)
        d = theta[..., None, :] - self.c
        return 0.5 * np.sum(self.rho * self.a * np.sum(d * d, axis=-1), axis=-1)

    @property
    def f_star(self) -> float:
        return float(self.objective(self.theta_star))

    def gamma(self, tau: int) -> float:
        return max(8.0 * self.L / self.mu, tau) - 1.0

    @property
    def noise_variance_bound(self) -> float:
        """Per-client bound on E||g - grad||^2 for uniform(-noise, noise) coordinates."""
        return self.c.shape[1] * self.noise ** 2 / 3.0


@dataclass
class ConvergenceRun:
    steps: np.ndarray
    errors: np.ndarray
    gamma: float
    max_grad_norm: float
    max_divergence: np.ndarray  # max_k ||theta_k - mean||^2 at each local step
    step_sizes: np.ndarray
    noise_variance_bound: float


def selection_probs(world: QuadraticWorld, divs: Optional[Sequence[float]] = None) -> np.ndarray:
    """Normalized scores under the optimal penalty factors (unit score-sum gauge)."""
    divs = np.ones(world.rho.size) if divs is None else np.asarray(divs, dtype=float)
    lam = np.array([score_client(d, optimal_alpha(r, d)) for r, d in zip(world.rho, divs)])
    return lam / lam.sum()


def run_quadratic_convergence(world: QuadraticWorld, tau: int, k: int, t_max: int, seed: int,
                              divs: Optional[Sequence[float]] = None,
                              track_divergence: bool = False) -> ConvergenceRun:
    """Local SGD with partial aggregation on a quadratic world.

    Each round draws ``k`` clients i.i.d. with probability equal to their
    normalized score, runs ``tau`` local steps with ``eta_t = 2/(mu (t + gamma))``
    and averages the results. Returns ``F(theta(t)) - F*`` at every aggregation
    step ``t = tau, 2 tau, ...``.
    """
    if tau < 1 or k < 1:
        raise ContractError("tau and k must be >= 1")
    rng = np.random.default_rng(seed)
    q = selection_probs(world, divs)
    gamma = world.gamma(tau)
    mu = world.mu
    f_star = world.f_star
    theta = np.zeros(world.c.shape[1])
    steps, errors, etas, divergences = [], [], [], []
    max_g = 0.0
    t = 0
    while t + tau <= t_max:
        sel = sample_with_replacement(q, k, rng)
        local = np.repeat(theta[None, :], k, axis=0)
        a = world.a[sel][:, None]
        c = world.c[sel]
        for _ in range(tau):
            eta = 2.0 / (mu * (t + gamma))
            grad = a * (local - c)
            if world.noise > 0:
                grad = grad + rng.uniform(-world.noise, world.noise, size=grad.shape)
            max_g = max(max_g, float(np.sqrt(np.max(np.sum(grad * grad, axis=1)))))
            local = local - eta * grad
            t += 1
            if track_divergence:
                centre = local.mean(axis=0)
                divergences.append(float(np.max(np.sum((local - centre) ** 2, axis=1))))
                etas.append(eta)
        theta = local.mean(axis=0)
        steps.append(t)
        errors.append(float(world.objective(theta)) - f_star)
    return ConvergenceRun(
        np.array(steps), np.array(errors), gamma, max_g,
        np.array(divergences), np.array(etas), world.noise_variance_bound,
    )


def loglog_slope(steps: np.ndarray, errors: np.ndarray, lo: float, hi: float) -> float:
    """Least-squares slope of log(error) against log(step) for steps in [lo, hi]."""
    steps = np.asarray(steps, dtype=float)
    errors = np.asarray(errors, dtype=float)
    m = (steps >= lo) & (steps <= hi) & (errors > 0)
    if m.sum() < 2:
        raise ContractError("not enough positive points to fit a slope")
    return float(np.polyfit(np.log(steps[m]), np.log(errors[m]), 1)[0])


def heterogeneous_world(n: int = 10, dim: int = 5, seed: int = 0, noise: float = 0.5) -> QuadraticWorld:
    """Default harness world: curvatures in [1, 4], spread optima, size-like weights."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(1.0, 4.0, n)
    c = rng.normal(0.0, 3.0, size=(n, dim))
    sizes = rng.integers(50, 500, n).astype(float)
    return QuadraticWorld(a, c, sizes / sizes.sum(), noise)
