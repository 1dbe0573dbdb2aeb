"""Checks of the analytical claims against simulated runs.

* the momentum identity ``E[dw_t] = beta E[dw_{t-1}] - (1 - beta) eta E[g_t]``
* gradient coherence along a trajectory
* the convergence bound at step size ``1/sqrt(L T)`` and how it scales with N
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import Problem, RoundRecord, RunConfig, run_training, setup_problem, theorem_step_size
from .errors import BoundInapplicableError, ConfigError, ModeError, UndefinedCoherenceError
from .losses import estimate_sigma2, global_loss, quadratic_minimizer

MIN_REPLICATES = 100
Z_LIMIT = 4.0
# absolute slack used where a standard error is exactly zero
ZERO_SE_ATOL = 1e-10
EPSILON_GUARD = 1e-16
MU_FLOOR = 1e-12


def map_ordered(fn, items, threads: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool; order is always preserved."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- momentum identity -------------------------------------------------------


@dataclass
class MomentumReport:
    beta: float
    eta: float
    M: int
    mode: str
    rounds: np.ndarray
    residual: np.ndarray
    stderr: np.ndarray
    z: np.ndarray

    @property
    def sufficient(self) -> bool:
        return self.M >= MIN_REPLICATES

    @property
    def max_abs_residual(self) -> float:
        return float(np.max(np.abs(self.residual))) if self.residual.size else 0.0

    @property
    def max_z(self) -> float:
        return float(np.max(self.z)) if self.z.size else 0.0

    @property
    def passed(self) -> bool:
        return self.sufficient and bool(np.all(self.z <= Z_LIMIT))


def momentum_residual(
    config: RunConfig,
    M: int,
    t_max: int,
    problem: Problem | None = None,
    threads: int = 1,
) -> MomentumReport:
    """Replicate-mean residual of the momentum identity for rounds ``1..t_max``.

    Replicates share data and ``w0`` and use seeds ``config.seed + m``. For
    each replicate the per-round residual is
    ``dw_t - beta dw_{t-1} + (1 - beta) eta grad f(w_t)``, which averages the
    three expectations with the same replicates so the standard error is
    that of the paired difference.
    """
    if M < 1 or t_max < 1:
        raise ConfigError(f"need M >= 1 and t_max >= 1, got M={M}, t_max={t_max}")
    cfg = config.with_(T=t_max + 1)
    if problem is None:
        problem = setup_problem(cfg)
    beta, eta = cfg.beta, problem.eta

    def one(m: int) -> np.ndarray:
        recs = run_training(cfg.with_(seed=config.seed + m), problem)
        dw = np.stack([r.delta_w for r in recs])
        grad = np.stack([r.true_grad for r in recs])
        return dw[1:] - beta * dw[:-1] + (1.0 - beta) * eta * grad[1:]

    samples = np.stack(map_ordered(one, range(M), threads))
    mean = samples.mean(axis=0)
    if M > 1:
        se = samples.std(axis=0, ddof=1) / math.sqrt(M)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, np.abs(mean) / se, np.where(np.abs(mean) <= ZERO_SE_ATOL, 0.0, np.inf))
    else:
        se = np.full_like(mean, np.nan)
        z = np.full_like(mean, np.inf)
    return MomentumReport(beta, eta, M, cfg.staleness_mode, np.arange(1, t_max + 1), mean, se, z)


def verify_lemma1(config: RunConfig, M: int, t_max: int, problem: Problem | None = None,
                  threads: int = 1) -> MomentumReport:
    """Momentum-identity check; only meaningful under i.i.d. (synthetic) staleness."""
    if config.staleness_mode != "synthetic":
        raise ModeError("the momentum identity is verified under synthetic staleness only")
    return momentum_residual(config, M, t_max, problem, threads)


# -- gradient coherence ------------------------------------------------------


@dataclass
class CoherenceSeries:
    mu: np.ndarray
    running_min: np.ndarray
    skipped: np.ndarray
    epsilon_guard: float

    @property
    def mu_min(self) -> float:
        finite = self.mu[np.isfinite(self.mu)]
        if finite.size == 0:
            raise UndefinedCoherenceError("no round has a gradient above the guard")
        return float(finite.min())


def gradient_coherence(grad_history, t: int, epsilon_guard: float = EPSILON_GUARD) -> float:
    """Coherence at round ``t``: min over ``s <= t`` of ``<g_s, g_t> / ||g_s||^2``.

    Rounds whose squared gradient norm is below ``epsilon_guard`` are skipped.
    """
    G = np.asarray(grad_history, dtype=np.float64)[: t + 1]
    norms = np.einsum("sd,sd->s", G, G)
    keep = norms >= epsilon_guard
    if not keep.any():
        raise UndefinedCoherenceError(f"all {t + 1} gradients up to round {t} are below the guard")
    return float(np.min(G[keep] @ G[t] / norms[keep]))


def coherence_series(grad_history, epsilon_guard: float = EPSILON_GUARD, block: int = 1024) -> CoherenceSeries:
    G = np.asarray(grad_history, dtype=np.float64)
    T = G.shape[0]
    norms = np.einsum("sd,sd->s", G, G)
    keep = norms >= epsilon_guard
    mu = np.full(T, np.nan)
    for start in range(0, T, block):
        stop = min(start + block, T)
        ratio = (G @ G[start:stop].T) / np.where(keep, norms, 1.0)[:, None]
        s_idx = np.arange(T)[:, None]
        t_idx = np.arange(start, stop)[None, :]
        ratio = np.where((s_idx <= t_idx) & keep[:, None], ratio, np.inf)
        col = ratio.min(axis=0)
        mu[start:stop] = np.where(np.isinf(col), np.nan, col)
    skipped = np.cumsum(~keep)
    running = np.fmin.accumulate(mu) if T else mu
    return CoherenceSeries(mu, running, skipped, epsilon_guard)


# -- convergence bound -------------------------------------------------------


def _contraction(mu: float, beta: float) -> float:
    return 1.0 - (1.0 - mu) * beta


def large_t_condition(L: float, mu: float, beta: float, T: int) -> bool:
    """Whether T is large enough for the last relaxation of the bound to hold."""
    return _contraction(mu, beta) * math.sqrt(T / L) >= 2.0


def theorem_bound(L: float, f0: float, fstar: float, sigma2: float, mu: float, beta: float, T: int) -> float:
    if not L > 0 or T < 1:
        raise ConfigError(f"need L > 0 and T >= 1, got L={L}, T={T}")
    c = _contraction(mu, beta)
    if c <= 0:
        raise BoundInapplicableError(f"1 - (1 - mu) beta = {c} <= 0; coherence too poor for beta={beta}")
    return 2.0 * math.sqrt(L) * (f0 - fstar + sigma2) / (c * math.sqrt(T))


def mean_grad_norm_curve(runs) -> np.ndarray:
    """Per-round seed average of ``||grad f(w_t)||^2``; accepts one run or a list of runs."""
    if runs and hasattr(runs[0], "grad_norm_sq"):
        runs = [runs]
    curves = np.array([[r.grad_norm_sq for r in recs] for recs in runs])
    return curves.mean(axis=0)


def min_grad_norm(runs) -> float:
    """Min over rounds of the seed-averaged squared gradient norm (average first, then min)."""
    curve = mean_grad_norm_curve(runs)
    if curve.size == 0:
        raise ConfigError("no records")
    return float(curve.min())


def rounds_to_threshold(records: list[RoundRecord], threshold: float) -> int | None:
    for r in records:
        if r.grad_norm_sq <= threshold:
            return r.t
    return None


@dataclass
class BoundReport:
    K: int
    N: int
    T: int
    beta: float
    eta: float
    L: float
    f0: float
    fstar: float
    sigma2: float
    sigma2_w0: float
    sigma2_w0_se: float
    mu_measured: float
    mu: float
    bound: float
    measured: float
    satisfied: bool
    validity: bool
    excluded_rounds: int
    seeds: int
    notes: list[str] = field(default_factory=list)
    coherence: CoherenceSeries | None = field(default=None, repr=False)

    @property
    def hypothesis_ok(self) -> bool:
        return self.mu_measured > 0

    @property
    def asserted(self) -> bool:
        return self.validity and self.hypothesis_ok

    @property
    def passed(self) -> bool:
        return self.satisfied or not self.asserted


def check_theorem(
    base: RunConfig,
    Ns,
    Ts,
    seeds: int,
    sigma_draws: int = 200,
    checkpoints: int = 10,
    epsilon_guard: float = EPSILON_GUARD,
    threads: int = 1,
) -> list[BoundReport]:
    """Compare the seed-averaged min squared gradient norm with the bound, per (N, T) cell."""
    if base.staleness_mode != "emergent":
        raise ModeError("the bound check runs the algorithm itself, i.e. emergent staleness")
    if base.model.kind != "quadratic" or not base.model.reg > 0:
        raise ConfigError("the bound check needs the quadratic model with reg > 0 (closed-form optimum)")
    if seeds < 1:
        raise ConfigError("need at least one seed")
    problem = setup_problem(base.with_(eta_rule="theorem"))
    fed, model = problem.fed, base.model
    w0 = base.initial_w()
    f0 = global_loss(model, fed, w0)
    fstar = global_loss(model, fed, quadratic_minimizer(model, fed))
    sigma2_w0, sigma2_w0_se = estimate_sigma2(model, fed, w0, base.H, sigma_draws, seed=base.seed,
                                              exhaustive=base.exhaustive)

    reports = []
    for T in Ts:
        for N in Ns:
            cfg = base.with_(N=N, T=T, eta_rule="theorem", record_w=True)
            cell = Problem(fed, problem.w_star, problem.L, theorem_step_size(problem.L, T))
            runs = map_ordered(lambda s: run_training(cfg.with_(seed=base.seed + s), cell), range(seeds), threads)
            measured = min_grad_norm(runs)
            avg_grad = np.mean([[r.true_grad for r in recs] for recs in runs], axis=0)
            series = coherence_series(avg_grad, epsilon_guard)
            notes = []
            try:
                mu_measured = series.mu_min
            except UndefinedCoherenceError:
                mu_measured = float("nan")
                notes.append("coherence undefined")
            mu = mu_measured
            if not mu_measured > 0:
                mu = MU_FLOOR
                notes.append("hypothesis violated: measured coherence <= 0")

            sigma2 = sigma2_w0
            picks = np.unique(np.linspace(0, T - 1, checkpoints).round().astype(int))
            for i, t in enumerate(picks):
                est, _ = estimate_sigma2(model, fed, runs[0][t].w, base.H, sigma_draws, seed=base.seed + 1 + i,
                                         exhaustive=base.exhaustive)
                sigma2 = max(sigma2, est)

            beta = cfg.beta
            bound = theorem_bound(problem.L, f0, fstar, sigma2, mu, beta, T)
            validity = large_t_condition(problem.L, mu, beta, T)
            if not validity:
                notes.append("T below the large-T condition")
            reports.append(BoundReport(
                K=cfg.K, N=N, T=T, beta=beta, eta=cell.eta, L=problem.L, f0=f0, fstar=fstar,
                sigma2=sigma2, sigma2_w0=sigma2_w0, sigma2_w0_se=sigma2_w0_se,
                mu_measured=mu_measured, mu=mu, bound=bound, measured=measured,
                satisfied=measured <= bound, validity=validity,
                excluded_rounds=int(series.skipped[-1]) if T else 0, seeds=seeds, notes=notes,
                coherence=series,
            ))
    return reports


@dataclass
class ScalingRow:
    N: int
    beta: float
    seeds: int
    mean_rounds: float
    unreached: int
    min_grad_norm: float
    final_loss: float


def participation_scaling(base: RunConfig, Ns, seeds: int, threshold: float, threads: int = 1) -> list[ScalingRow]:
    """Mean rounds until ``||grad f||^2 <= threshold`` for each participation level.

    Runs that never reach the threshold count as ``T`` rounds and are tallied
    in ``unreached``.
    """
    problem = setup_problem(base)
    rows = []
    for N in Ns:
        cfg = base.with_(N=N)
        runs = map_ordered(lambda s: run_training(cfg.with_(seed=base.seed + s), problem), range(seeds), threads)
        hits = [rounds_to_threshold(recs, threshold) for recs in runs]
        rounds = [cfg.T if h is None else h for h in hits]
        rows.append(ScalingRow(
            N=N, beta=cfg.beta, seeds=seeds, mean_rounds=float(np.mean(rounds)),
            unreached=sum(h is None for h in hits), min_grad_norm=min_grad_norm(runs),
            final_loss=float(np.mean([recs[-1].loss for recs in runs])),
        ))
    return rows
