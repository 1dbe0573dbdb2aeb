"""Client selection and staleness bookkeeping.

Staleness is either *emergent* (it follows from which clients were picked in
previous rounds) or *synthetic* (drawn i.i.d. geometric each round, the
abstraction used for the momentum identity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, FedStaleError

MODES = ("emergent", "synthetic")

# stream tags keep the selection/sampling stream apart from the synthetic staleness stream
STREAM_ROUND = 0
STREAM_SYNTHETIC = 1


def round_rng(seed: int, t: int, stream: int = STREAM_ROUND) -> np.random.Generator:
    """Generator keyed by ``(seed, stream, round)``; independent of any other round."""
    return np.random.default_rng([seed, stream, t])


@dataclass(frozen=True)
class SelectionPlan:
    K: int
    N: int
    mode: str = "emergent"

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if not 1 <= self.N <= self.K:
            raise ConfigError(f"N must satisfy 1 <= N <= K (K={self.K}), got {self.N}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown staleness mode {self.mode!r}")

    @property
    def beta(self) -> float:
        return 1.0 - self.N / self.K


@dataclass(frozen=True)
class StalenessTracker:
    tau: np.ndarray

    @classmethod
    def fresh(cls, K: int) -> StalenessTracker:
        return cls(np.zeros(K, dtype=np.int64))


def sample_clients(plan: SelectionPlan, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random size-N subset of ``range(K)``, sorted.

    Full participation short-circuits without touching ``rng``.
    """
    if plan.N > plan.K:
        raise ConfigError(f"cannot select N={plan.N} of K={plan.K} clients")
    if plan.N == plan.K:
        return np.arange(plan.K)
    return np.sort(rng.choice(plan.K, size=plan.N, replace=False))


def geometric_pmf(beta: float, l: int) -> float:
    if not 0.0 <= beta < 1.0:
        raise DomainError(f"beta must lie in [0, 1), got {beta}")
    if l < 0:
        return 0.0
    return beta**l * (1.0 - beta)


def advance_staleness(tracker: StalenessTracker, selected) -> StalenessTracker:
    selected = np.asarray(selected, dtype=np.int64)
    K = tracker.tau.shape[0]
    if selected.size and (selected.min() < 0 or selected.max() >= K):
        raise FedStaleError(f"selected client index out of range for K={K}: {selected}")
    tau = tracker.tau + 1
    tau[selected] = 0
    return StalenessTracker(tau)


def sample_synthetic_staleness(plan: SelectionPlan, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. ``Geometric(1 - beta)`` staleness for every client via the inverse CDF.

    ``P(tau >= l) = beta**l``, so ``tau = floor(log(U) / log(beta))`` for ``U`` in (0, 1].
    """
    beta = plan.beta
    u = 1.0 - rng.random(plan.K)
    if beta == 0.0:
        return np.zeros(plan.K, dtype=np.int64)
    return np.floor(np.log(u) / math.log(beta)).astype(np.int64)


def simulate_emergent_staleness(plan: SelectionPlan, T: int, seed: int) -> np.ndarray:
    """Staleness snapshots ``(T, K)`` produced by the selection process alone.

    Uses the same per-round streams as training, so it reproduces the
    staleness a training run with the same seed would see.
    """
    tracker = StalenessTracker.fresh(plan.K)
    out = np.empty((T, plan.K), dtype=np.int64)
    for t in range(T):
        tracker = advance_staleness(tracker, sample_clients(plan, round_rng(seed, t)))
        out[t] = tracker.tau
    return out


def staleness_histogram(samples: np.ndarray, beta: float, max_lag: int = 100) -> dict[str, np.ndarray | float]:
    """Empirical vs geometric pmf for lags ``0..max_lag`` plus the tail beyond.

    The total-variation distance includes the tail bucket, so mass the
    empirical distribution puts beyond ``max_lag`` is not silently dropped.
    """
    samples = np.asarray(samples).ravel()
    counts = np.bincount(np.minimum(samples, max_lag + 1), minlength=max_lag + 2).astype(np.float64)
    emp = counts / samples.size
    lags = np.arange(max_lag + 1)
    theo = np.array([geometric_pmf(beta, int(l)) for l in lags])
    theo_tail = beta ** (max_lag + 1)
    tv = 0.5 * (np.abs(emp[:-1] - theo).sum() + abs(emp[-1] - theo_tail))
    return {"lag": lags, "empirical_pmf": emp[:-1], "theoretical_pmf": theo, "tail_empirical": float(emp[-1]),
            "tail_theoretical": float(theo_tail), "tv_distance": float(tv)}
