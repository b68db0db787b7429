"""Client scoring and the per-strategy selection rules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DegenerateError, DomainError, SamplingError


class Policy(str, Enum):
    FEDAVG_RANDOM = "fedavg_random"
    CFCFM_ORDER = "cfcfm_order"
    FEDAVGRP_RANDOM = "fedavgrp_random"
    FEDPROX_DATARATIO = "fedprox_dataratio"
    FEDADAM_RANDOM = "fedadam_random"
    AFL_LOSS = "afl_loss"
    FEDPROF_SCORE = "fedprof_score"


# strategy name -> (selection policy, default aggregation)
STRATEGIES = {
    "fedavg": (Policy.FEDAVG_RANDOM, "full"),
    "cfcfm": (Policy.CFCFM_ORDER, "full"),
    "fedavg_rp": (Policy.FEDAVGRP_RANDOM, "partial"),
    "fedprox": (Policy.FEDPROX_DATARATIO, "partial"),
    "fedadam": (Policy.FEDADAM_RANDOM, "momentum"),
    "afl": (Policy.AFL_LOSS, "momentum"),
    "fedprof": (Policy.FEDPROF_SCORE, "partial"),
}


@dataclass
class ClientScore:
    lam: float = 1.0
    alpha: float = 0.0
    div: float = 0.0
    last_update_round: int = 0
    negative_div: bool = False


@dataclass
class RoundContext:
    """Everything a selection policy may consult in one round."""

    k: int
    rng: np.random.Generator
    scores: Optional[Sequence[float]] = None
    data_sizes: Optional[Sequence[int]] = None
    losses: Optional[Sequence[float]] = None
    completion_times: Optional[Sequence[float]] = None
    n_clients: Optional[int] = None
    temperature: float = 1.0
    extra: dict = field(default_factory=dict)

    def population(self) -> int:
        for seq in (self.scores, self.data_sizes, self.losses, self.completion_times):
            if seq is not None:
                return len(seq)
        if self.n_clients is None:
            raise ConfigError("round context does not determine the population size")
        return self.n_clients


def score_client(div: float, alpha: float) -> float:
    if not math.isfinite(div):
        raise DomainError(f"divergence must be finite, got {div}")
    if alpha < 0:
        raise DomainError(f"penalty factor must be non-negative, got {alpha}")
    return math.exp(-alpha * div)


def optimal_alpha(rho: float, div: float, lambda_norm: float = 1.0) -> float:
    """Penalty factor that makes the client's score equal ``lambda_norm * rho``."""
    if not 0.0 < rho <= 1.0:
        raise DomainError(f"rho must lie in (0, 1], got {rho}")
    if div == 0:
        raise DegenerateError("zero divergence: the score is 1 whatever the penalty factor")
    if div < 0:
        raise DomainError(f"divergence must be positive, got {div}")
    target = lambda_norm * rho
    if not 0.0 < target <= 1.0:
        raise DomainError(f"lambda_norm * rho = {target} must lie in (0, 1]")
    return -math.log(target) / div


def sample_clients(weights: Sequence[float], k: int, rng: np.random.Generator) -> list[int]:
    """Draw ``k`` distinct indices: pick proportional to weight, remove, renormalize."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or np.any(~np.isfinite(w)) or np.any(w < 0):
        raise SamplingError("weights must be finite and non-negative")
    if k > w.size:
        raise ContractError(f"cannot pick {k} clients out of {w.size}")
    positive = int(np.count_nonzero(w))
    if positive == 0:
        raise SamplingError("all weights are zero")
    if k > positive:
        raise ContractError(f"only {positive} clients have positive weight, {k} requested")
    w = w.copy()
    chosen = []
    for _ in range(k):
        cum = np.cumsum(w)
        u = rng.random() * cum[-1]
        idx = int(np.searchsorted(cum, u, side="right"))
        idx = min(idx, w.size - 1)
        # guard against landing on a zero-weight slot through rounding at the boundary
        while w[idx] == 0:
            idx -= 1
        chosen.append(idx)
        w[idx] = 0.0
    return chosen


def sample_with_replacement(probs: Sequence[float], k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` i.i.d. draws from ``probs``; duplicates allowed."""
    p = np.asarray(probs, dtype=float)
    if np.any(p < 0) or p.sum() <= 0:
        raise SamplingError("probabilities must be non-negative with positive mass")
    cum = np.cumsum(p / p.sum())
    idx = np.searchsorted(cum, rng.random(k), side="right")
    return np.minimum(idx, p.size - 1)


def _require(ctx: RoundContext, name: str):
    value = getattr(ctx, name)
    if value is None:
        raise ConfigError(f"selection policy needs '{name}' in the round context", name)
    return np.asarray(value, dtype=float)


def next_selection(policy, ctx: RoundContext) -> list[int]:
    policy = Policy(policy)
    n = ctx.population()
    if not 1 <= ctx.k <= n:
        raise ContractError(f"K={ctx.k} outside [1, {n}]")
    if policy in (Policy.FEDAVG_RANDOM, Policy.FEDAVGRP_RANDOM, Policy.FEDADAM_RANDOM):
        return sample_clients(np.ones(n), ctx.k, ctx.rng)
    if policy is Policy.FEDPROX_DATARATIO:
        return sample_clients(_require(ctx, "data_sizes"), ctx.k, ctx.rng)
    if policy is Policy.AFL_LOSS:
        losses = _require(ctx, "losses")
        z = losses / ctx.temperature
        w = np.exp(z - z.max())
        positive = int(np.count_nonzero(w))
        if positive >= ctx.k:
            return sample_clients(w, ctx.k, ctx.rng)
        # the other weights underflowed; in that limit sequential sampling takes
        # them in order of decreasing loss
        chosen = sample_clients(w, positive, ctx.rng)
        rest = [int(i) for i in np.argsort(-z, kind="stable") if w[i] == 0]
        return chosen + rest[: ctx.k - positive]
    if policy is Policy.CFCFM_ORDER:
        times = _require(ctx, "completion_times")
        return [int(i) for i in np.argsort(times, kind="stable")[: ctx.k]]
    return sample_clients(_require(ctx, "scores"), ctx.k, ctx.rng)
