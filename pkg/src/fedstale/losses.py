"""Synthetic federated datasets and closed-form losses.

Two per-point losses are supported, both with an optional ridge term
``reg/2 * ||w||^2``:

* ``quadratic``: ``0.5 * (<x, w> - y)^2``
* ``logistic``:  ``log(1 + exp(-y <x, w>))`` with labels in {-1, +1}

The global objective is the size-weighted mixture of the per-client
empirical means, which is the same thing as the flat mean over every point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericalError, ShapeError

KINDS = ("quadratic", "logistic")
PARTITIONS = ("iid", "label_skew")

#: fraction of each shard drawn from its majority class under ``label_skew``
SKEW_MAJORITY = 0.8


@dataclass(frozen=True)
class DataPoint:
    x: np.ndarray
    y: float


@dataclass(frozen=True)
class LossModel:
    kind: str = "quadratic"
    reg: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if not np.isfinite(self.reg) or self.reg < 0:
            raise ConfigError(f"regularization must be finite and >= 0, got {self.reg}")

    def losses(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-point losses for rows of ``X``; ``w`` broadcasts against ``X[..., 0, :]``."""
        margin = np.einsum("...md,...d->...m", X, w)
        if self.kind == "quadratic":
            out = 0.5 * (margin - y) ** 2
        else:
            out = np.logaddexp(0.0, -y * margin)
        if self.reg:
            out = out + 0.5 * self.reg * np.einsum("...d,...d->...", w, w)[..., None]
        return out

    def grads(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-point gradients, shape ``X.shape``."""
        margin = np.einsum("...md,...d->...m", X, w)
        if self.kind == "quadratic":
            coef = margin - y
        else:
            coef = -y * expit(-y * margin)
        out = coef[..., None] * X
        if self.reg:
            out = out + self.reg * np.asarray(w)[..., None, :]
        return out


@dataclass
class DatasetShard:
    X: np.ndarray
    y: np.ndarray
    owner: int = 0

    def __post_init__(self) -> None:
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.X.shape[0] != self.y.shape[0]:
            raise ShapeError(f"shard has {self.X.shape[0]} features rows but {self.y.shape[0]} labels")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ConfigError("shard contains non-finite values")

    @property
    def size(self) -> int:
        return int(self.y.shape[0])

    @property
    def dim(self) -> int:
        return int(self.X.shape[1])

    def point(self, i: int) -> DataPoint:
        return DataPoint(self.X[i], float(self.y[i]))


@dataclass
class FederatedDataset:
    shards: list[DatasetShard]
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if not self.shards:
            raise ConfigError("a federated dataset needs at least one shard")
        for s in self.shards:
            if s.size < 1:
                raise ConfigError(f"shard of client {s.owner} is empty")
        dims = {s.dim for s in self.shards}
        if len(dims) != 1:
            raise ShapeError(f"shards disagree on feature dimension: {sorted(dims)}")
        if self.weights is None:
            self.weights = self.sizes / self.total
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.shards),):
            raise ConfigError(f"{self.weights.shape[0]} weights for {len(self.shards)} shards")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ConfigError(f"client weights sum to {self.weights.sum()!r}, not 1")

    @property
    def K(self) -> int:
        return len(self.shards)

    @property
    def dim(self) -> int:
        return self.shards[0].dim

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.array([s.size for s in self.shards], dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.sizes.sum())

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(np.int64)

    @cached_property
    def X_all(self) -> np.ndarray:
        return np.concatenate([s.X for s in self.shards], axis=0)

    @cached_property
    def y_all(self) -> np.ndarray:
        return np.concatenate([s.y for s in self.shards])


def _check_dim(w: np.ndarray, d: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (d,):
        raise ShapeError(f"parameter has shape {w.shape}, expected ({d},)")
    return w


def point_loss(model: LossModel, w, p: DataPoint) -> float:
    x = np.asarray(p.x, dtype=np.float64)
    w = _check_dim(w, x.shape[0])
    return float(model.losses(w, x[None, :], np.array([p.y]))[0])


def point_grad(model: LossModel, w, p: DataPoint) -> np.ndarray:
    x = np.asarray(p.x, dtype=np.float64)
    w = _check_dim(w, x.shape[0])
    return model.grads(w, x[None, :], np.array([p.y]))[0]


def local_loss(model: LossModel, shard: DatasetShard, w) -> float:
    if shard.size < 1:
        raise ConfigError("local loss of an empty shard")
    w = _check_dim(w, shard.dim)
    return float(np.mean(model.losses(w, shard.X, shard.y)))


def local_grad(model: LossModel, shard: DatasetShard, w) -> np.ndarray:
    if shard.size < 1:
        raise ConfigError("local gradient of an empty shard")
    w = _check_dim(w, shard.dim)
    return np.mean(model.grads(w, shard.X, shard.y), axis=0)


def local_grads_all(model: LossModel, fed: FederatedDataset, w) -> np.ndarray:
    """Every client's full local gradient at ``w`` as a ``(K, d)`` array."""
    w = _check_dim(w, fed.dim)
    per_point = model.grads(w, fed.X_all, fed.y_all)
    return np.add.reduceat(per_point, fed.offsets, axis=0) / fed.sizes[:, None]


def global_loss(model: LossModel, fed: FederatedDataset, w) -> float:
    w = _check_dim(w, fed.dim)
    per_point = model.losses(w, fed.X_all, fed.y_all)
    local = np.add.reduceat(per_point, fed.offsets) / fed.sizes
    return float(fed.weights @ local)


def global_grad(model: LossModel, fed: FederatedDataset, w) -> np.ndarray:
    return fed.weights @ local_grads_all(model, fed, w)


def minibatch_grads(
    model: LossModel,
    fed: FederatedDataset,
    clients: np.ndarray,
    W: np.ndarray,
    H: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """H-sample gradient estimates for ``clients``, one row per client.

    ``W`` is either a single parameter ``(d,)`` shared by every client or one
    row per client. Sample indices are drawn with replacement, for all clients
    at once and in the order given, so the stream layout is fixed by ``rng``.
    """
    clients = np.asarray(clients, dtype=np.int64)
    if clients.size == 0:
        return np.zeros((0, fed.dim))
    local = rng.integers(0, fed.sizes[clients][:, None], size=(clients.size, H))
    idx = fed.offsets[clients][:, None] + local
    Xs = fed.X_all[idx]
    ys = fed.y_all[idx]
    if W.ndim == 1:
        W = np.broadcast_to(W, (clients.size, W.shape[0]))
    return model.grads(W, Xs, ys).mean(axis=1)


def generate_dataset(
    model: LossModel,
    K: int,
    n_per_client: int,
    d: int,
    partition: str = "iid",
    noise_std: float = 0.0,
    seed: int = 0,
    identical_within_shard: bool = False,
    feature_decay: float = 0.0,
) -> tuple[FederatedDataset, np.ndarray]:
    """Draw a planted-model federated dataset.

    Features are zero-mean Gaussian with diagonal covariance
    ``(j + 1) ** -feature_decay`` for coordinate ``j`` (identity by default);
    the planted parameter ``w_star`` is standard Gaussian. Quadratic labels are ``<x, w_star> + noise``; logistic
    labels are ``sign(<x, w_star> + noise)`` so ``noise_std`` controls how
    often a label flips relative to the noiseless classifier.

    With ``identical_within_shard`` each client holds ``n_per_client`` copies
    of a single point, which removes all minibatch sampling variance.

    Returns:
        The dataset and ``w_star``.
    """
    if K < 1 or n_per_client < 1 or d < 1:
        raise ConfigError(f"need K, n_per_client, d >= 1; got K={K}, n={n_per_client}, d={d}")
    if not noise_std >= 0:
        raise ConfigError(f"noise_std must be >= 0, got {noise_std}")
    if partition not in PARTITIONS:
        raise ConfigError(f"unknown partition {partition!r}; expected one of {PARTITIONS}")
    if partition == "label_skew" and model.kind != "logistic":
        raise ConfigError("label_skew partition requires the logistic model")

    if not feature_decay >= 0:
        raise ConfigError(f"feature_decay must be >= 0, got {feature_decay}")
    rng = np.random.default_rng(seed)
    w_star = rng.standard_normal(d)
    scale = np.arange(1, d + 1, dtype=np.float64) ** (-feature_decay / 2)

    def draw(m: int) -> tuple[np.ndarray, np.ndarray]:
        X = rng.standard_normal((m, d)) * scale
        noisy = X @ w_star + noise_std * rng.standard_normal(m)
        if model.kind == "quadratic":
            return X, noisy
        return X, np.where(noisy >= 0, 1.0, -1.0)

    shards = []
    for k in range(K):
        if partition == "label_skew":
            X, y = _skewed_shard(draw, n_per_client, majority=1.0 if k % 2 == 0 else -1.0, rng=rng)
        elif identical_within_shard:
            x1, y1 = draw(1)
            X, y = np.repeat(x1, n_per_client, axis=0), np.repeat(y1, n_per_client)
        else:
            X, y = draw(n_per_client)
        shards.append(DatasetShard(X, y, owner=k))
    return FederatedDataset(shards), w_star


def _skewed_shard(draw, n: int, majority: float, rng: np.random.Generator):
    n_major = int(round(SKEW_MAJORITY * n))
    want = {majority: n_major, -majority: n - n_major}
    got_X: dict[float, list[np.ndarray]] = {1.0: [], -1.0: []}
    have = {1.0: 0, -1.0: 0}
    while any(have[c] < want[c] for c in want):
        X, y = draw(max(2 * n, 16))
        for c in want:
            need = want[c] - have[c]
            if need > 0:
                rows = X[y == c][:need]
                got_X[c].append(rows)
                have[c] += rows.shape[0]
    X = np.concatenate([np.concatenate(got_X[c]) for c in (majority, -majority) if got_X[c]], axis=0)
    y = np.concatenate([np.full(want[c], c) for c in (majority, -majority)])
    perm = rng.permutation(n)
    return X[perm], y[perm]


def top_eigenvalue(C: np.ndarray, tol: float = 1e-8, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Stops once the eigen-residual ``||C v - lam v||`` falls below ``tol * lam``.
    """
    d = C.shape[0]
    v = np.random.default_rng(seed).standard_normal(d)
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        Cv = C @ v
        lam = float(v @ Cv)
        if lam <= 0.0:
            if np.linalg.norm(Cv) == 0.0:
                return 0.0
        elif np.linalg.norm(Cv - lam * v) <= tol * lam:
            return lam
        v = Cv / np.linalg.norm(Cv)
    raise NumericalError(f"power iteration did not converge in {max_iter} steps")


def smoothness_constant(model: LossModel, fed: FederatedDataset) -> float:
    """Smoothness constant shared by every local objective.

    Uses the curvature bound ``lambda_max(X_k^T X_k / n_k)`` (scaled by 1/4 for
    the logistic loss, whose second derivative never exceeds 1/4) plus the
    ridge term, maximized over clients.
    """
    scale = 1.0 if model.kind == "quadratic" else 0.25
    worst = 0.0
    for s in fed.shards:
        C = s.X.T @ s.X / s.size
        worst = max(worst, top_eigenvalue(C))
    return scale * worst + model.reg


def quadratic_minimizer(model: LossModel, fed: FederatedDataset) -> np.ndarray:
    """Closed-form minimizer of the global quadratic objective (needs reg > 0 or full-rank data)."""
    if model.kind != "quadratic":
        raise ConfigError("closed-form minimizer only exists for the quadratic model")
    d = fed.dim
    # weighted second moments so unequal shard weights are honoured
    A = np.zeros((d, d))
    b = np.zeros(d)
    for p, s in zip(fed.weights, fed.shards):
        A += p * (s.X.T @ s.X) / s.size
        b += p * (s.X.T @ s.y) / s.size
    return np.linalg.solve(A + model.reg * np.eye(d), b)


def estimate_sigma2(
    model: LossModel,
    fed: FederatedDataset,
    w,
    H: int,
    draws: int,
    seed: int = 0,
    exhaustive: bool = False,
) -> tuple[float, float]:
    """Monte Carlo estimate of ``E || sum_k p_k g_k - grad f(w) ||^2``.

    Each ``g_k`` is a fresh H-sample gradient estimate of client ``k`` at
    ``w``. Returns ``(estimate, standard_error)``.
    """
    if draws < 2:
        raise ConfigError(f"need at least 2 draws, got {draws}")
    if H < 1:
        raise ConfigError(f"H must be >= 1, got {H}")
    w = _check_dim(w, fed.dim)
    if exhaustive:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    full = global_grad(model, fed, w)
    clients = np.arange(fed.K)
    errs = np.empty(draws)
    for i in range(draws):
        g = fed.weights @ minibatch_grads(model, fed, clients, w, H, rng)
        diff = g - full
        errs[i] = diff @ diff
    return float(errs.mean()), float(errs.std(ddof=1) / np.sqrt(draws))
