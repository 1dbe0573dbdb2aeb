"""Federated SGD with stale-gradient reuse.

Every round the server picks N of K clients, the picked clients return an
H-sample gradient estimate at the broadcast parameter, every other client's
last upload is reused as is, and the server takes one step along the
size-weighted sum of all K gradients.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError
from .losses import (
    PARTITIONS,
    FederatedDataset,
    LossModel,
    generate_dataset,
    global_grad,
    global_loss,
    local_grad,
    local_grads_all,
    minibatch_grads,
    smoothness_constant,
)
from .staleness import (
    STREAM_SYNTHETIC,
    SelectionPlan,
    StalenessTracker,
    advance_staleness,
    round_rng,
    sample_clients,
    sample_synthetic_staleness,
)

DIVERGENCE_NORM = 1e12
ETA_RULES = ("fixed", "theorem")


@dataclass(frozen=True)
class RunConfig:
    K: int = 10
    N: int = 1
    H: int = 1
    T: int = 100
    eta: float | None = None
    eta_rule: str = "theorem"
    model: LossModel = field(default_factory=LossModel)
    n_per_client: int = 20
    d: int = 5
    partition: str = "iid"
    noise_std: float = 0.0
    data_seed: int = 0
    identical_within_shard: bool = False
    feature_decay: float = 0.0
    staleness_mode: str = "emergent"
    seed: int = 0
    warm_start: bool = False
    w0: tuple[float, ...] | None = None
    history_window: int = 200
    record_w: bool = False
    exhaustive: bool = False

    def __post_init__(self) -> None:
        SelectionPlan(self.K, self.N, self.staleness_mode)
        if self.H < 1:
            raise ConfigError(f"H must be >= 1, got {self.H}")
        if self.T < 0:
            raise ConfigError(f"T must be >= 0, got {self.T}")
        if self.eta_rule not in ETA_RULES:
            raise ConfigError(f"eta_rule must be one of {ETA_RULES}, got {self.eta_rule!r}")
        if self.eta_rule == "fixed" and (self.eta is None or not self.eta > 0):
            raise ConfigError(f"fixed eta_rule needs eta > 0, got {self.eta}")
        if self.history_window < 1:
            raise ConfigError("history_window must be >= 1")
        if self.w0 is not None and len(self.w0) != self.d:
            raise ConfigError(f"w0 has {len(self.w0)} entries, expected d={self.d}")
        if self.partition not in PARTITIONS:
            raise ConfigError(f"unknown partition {self.partition!r}; expected one of {PARTITIONS}")

    @property
    def plan(self) -> SelectionPlan:
        return SelectionPlan(self.K, self.N, self.staleness_mode)

    @property
    def beta(self) -> float:
        return self.plan.beta

    def with_(self, **changes) -> RunConfig:
        return replace(self, **changes)

    def initial_w(self) -> np.ndarray:
        if self.w0 is None:
            return np.zeros(self.d)
        return np.array(self.w0, dtype=np.float64)


@dataclass
class Problem:
    """Dataset plus the quantities every run on it needs."""

    fed: FederatedDataset
    w_star: np.ndarray
    L: float
    eta: float


def theorem_step_size(L: float, T: int) -> float:
    return 1.0 / math.sqrt(L * T)


def setup_problem(config: RunConfig) -> Problem:
    fed, w_star = generate_dataset(
        config.model,
        config.K,
        config.n_per_client,
        config.d,
        partition=config.partition,
        noise_std=config.noise_std,
        seed=config.data_seed,
        identical_within_shard=config.identical_within_shard,
        feature_decay=config.feature_decay,
    )
    L = smoothness_constant(config.model, fed)
    if config.eta_rule == "theorem":
        eta = theorem_step_size(L, max(config.T, 1))
    else:
        eta = float(config.eta)
    return Problem(fed, w_star, L, eta)


@dataclass
class ClientState:
    owner: int
    last_gradient: np.ndarray
    staleness: int
    refreshed_at: int


@dataclass
class ServerState:
    w: np.ndarray
    t: int = 0
    g_agg: np.ndarray | None = None


@dataclass
class RoundRecord:
    t: int
    delta_w: np.ndarray
    g_agg: np.ndarray
    true_grad: np.ndarray
    grad_norm_sq: float
    loss: float
    selected: np.ndarray
    staleness: np.ndarray
    w: np.ndarray | None = None
    coherence: float = float("nan")


@dataclass
class SimState:
    """Server state plus the per-client arrays the server keeps.

    ``G[k]`` is the gradient the server currently holds for client ``k``;
    ``refreshed_at[k]`` is the round it was computed in (-1 for the zero
    initial value).
    """

    server: ServerState
    G: np.ndarray
    tracker: StalenessTracker
    refreshed_at: np.ndarray
    history: deque = field(default_factory=deque)
    clamp_count: int = 0

    @classmethod
    def initial(cls, w0: np.ndarray, K: int, history_window: int = 200) -> SimState:
        d = w0.shape[0]
        return cls(
            server=ServerState(w=np.array(w0, dtype=np.float64)),
            G=np.zeros((K, d)),
            tracker=StalenessTracker.fresh(K),
            refreshed_at=np.full(K, -1, dtype=np.int64),
            history=deque([np.array(w0, dtype=np.float64)], maxlen=history_window),
        )

    def clients(self) -> list[ClientState]:
        return [
            ClientState(k, self.G[k].copy(), int(self.tracker.tau[k]), int(self.refreshed_at[k]))
            for k in range(self.G.shape[0])
        ]


def local_gradient_estimate(
    model: LossModel,
    fed: FederatedDataset,
    k: int,
    w,
    H: int,
    rng: np.random.Generator,
    exhaustive: bool = False,
) -> np.ndarray:
    """Client ``k``'s H-sample gradient estimate at ``w`` (all samples see the same ``w``)."""
    if H < 1:
        raise ConfigError(f"H must be >= 1, got {H}")
    w = np.asarray(w, dtype=np.float64)
    if exhaustive:
        return local_grads_all(model, fed, w)[k]
    return minibatch_grads(model, fed, np.array([k]), w, H, rng)[0]


def aggregate(gradients: np.ndarray, weights: np.ndarray) -> np.ndarray:
    gradients = np.asarray(gradients, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if gradients.ndim != 2 or gradients.shape[0] != weights.shape[0]:
        raise ShapeError(f"{gradients.shape[0] if gradients.ndim else 0} gradients for {weights.shape[0]} weights")
    return weights @ gradients


def server_update(w: np.ndarray, g: np.ndarray, eta: float, round_index: int = -1) -> np.ndarray:
    if w.shape != g.shape:
        raise ShapeError(f"parameter shape {w.shape} != gradient shape {g.shape}")
    if not eta > 0:
        raise ConfigError(f"eta must be > 0, got {eta}")
    w_new = w - eta * g
    if not np.all(np.isfinite(w_new)) or np.linalg.norm(w_new) > DIVERGENCE_NORM:
        raise DivergenceError(round_index)
    return w_new


def run_round(
    state: SimState,
    fed: FederatedDataset,
    config: RunConfig,
    eta: float,
    rng: np.random.Generator | None = None,
) -> tuple[SimState, RoundRecord]:
    """Advance the simulation by one communication round (mutates ``state``)."""
    t = state.server.t
    w = state.server.w
    model = config.model
    if rng is None:
        rng = round_rng(config.seed, t)

    if config.staleness_mode == "emergent":
        if config.warm_start and t == 0:
            selected = np.arange(config.K)
        else:
            selected = sample_clients(config.plan, rng)
        if config.exhaustive:
            fresh = local_grads_all(model, fed, w)[selected]
        else:
            fresh = minibatch_grads(model, fed, selected, w, config.H, rng)
        state.G[selected] = fresh
        state.refreshed_at[selected] = t
        state.tracker = advance_staleness(state.tracker, selected)
    else:
        tau = sample_synthetic_staleness(config.plan, round_rng(config.seed, t, STREAM_SYNTHETIC))
        lag = np.minimum(tau, t)
        edge = len(state.history) - 1
        over = lag > edge
        state.clamp_count += int(over.sum())
        lag = np.minimum(lag, edge)
        hist = np.stack(state.history)
        W = hist[edge - lag]
        if config.exhaustive:
            fresh = np.stack([local_grad(model, fed.shards[k], W[k]) for k in range(config.K)])
        else:
            fresh = minibatch_grads(model, fed, np.arange(config.K), W, config.H, rng)
        state.G[:] = fresh
        state.refreshed_at[:] = t - lag
        state.tracker = StalenessTracker(lag.astype(np.int64))
        selected = np.flatnonzero(lag == 0)

    g = aggregate(state.G, fed.weights)
    true_grad = global_grad(model, fed, w)
    loss = global_loss(model, fed, w)
    step = eta * g
    w_new = server_update(w, g, eta, round_index=t)
    record = RoundRecord(
        t=t,
        delta_w=-step,
        g_agg=g,
        true_grad=true_grad,
        grad_norm_sq=float(true_grad @ true_grad),
        loss=loss,
        selected=selected,
        staleness=state.tracker.tau.copy(),
        w=w.copy() if config.record_w else None,
    )
    state.server = ServerState(w=w_new, t=t + 1, g_agg=g)
    state.history.append(w_new)
    return state, record


def run_training(config: RunConfig, problem: Problem | None = None) -> list[RoundRecord]:
    """Run ``config.T`` rounds from ``w0`` and return one record per round.

    On divergence the raised :class:`DivergenceError` carries the records
    produced so far.
    """
    if problem is None:
        problem = setup_problem(config)
    state = SimState.initial(config.initial_w(), config.K, config.history_window)
    records: list[RoundRecord] = []
    for _ in range(config.T):
        try:
            state, rec = run_round(state, problem.fed, config, problem.eta)
        except DivergenceError as err:
            err.records = records
            raise
        records.append(rec)
    return records


def final_w(config: RunConfig, records: list[RoundRecord]) -> np.ndarray:
    """Replay the recorded updates from ``w0``."""
    w = config.initial_w()
    for rec in records:
        w = w + rec.delta_w
    return w
