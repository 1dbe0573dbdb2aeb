"""Experiment spec files.

Grammar (one statement per line)::

    # comment                      blank lines and '#' comments are ignored
    key = value                    scalar setting
    grid.N = 5, 20, 80             grid axis: comma-separated integers

Keys are case-sensitive, each may appear once, and unknown keys are
rejected. See ``FIELDS`` for the accepted keys, their types and defaults.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .core import RunConfig
from .errors import ConfigError, ModeError, ParseError
from .losses import LossModel

TASKS = ("train", "staleness", "lemma1", "theorem", "sweep")
GRID_AXES = ("N", "T", "H")
_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "experiment"
    task: str = "train"
    K: int = 10
    N: int = 1
    H: int = 1
    T: int = 100
    eta: float | None = None
    eta_rule: str = "theorem"
    model: str = "quadratic"
    reg: float = 0.0
    n_per_client: int = 20
    d: int = 5
    partition: str = "iid"
    noise_std: float = 0.0
    feature_decay: float = 0.0
    identical_within_shard: bool = False
    data_seed: int = 0
    seed: int = 0
    seeds: int = 1
    staleness_mode: str = "emergent"
    warm_start: bool = False
    w0: tuple[float, ...] | None = None
    history_window: int = 200
    record_w: bool = False
    exhaustive: bool = False
    replicates: int = 2000
    t_max: int = 20
    emergent_diagnostic: bool = True
    max_lag: int = 100
    tv_tolerance: float = 0.01
    threshold: float = 1e-4
    check_monotone_n: bool = False
    sigma_draws: int = 200
    checkpoints: int = 10
    epsilon_guard: float = 1e-16
    out: str | None = None
    grid: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def run_config(self, **overrides) -> RunConfig:
        w0 = self.w0
        if w0 is not None and len(w0) == 1 and self.d != 1:
            w0 = tuple(w0 * self.d)
        kw = dict(
            K=self.K, N=self.N, H=self.H, T=self.T, eta=self.eta, eta_rule=self.eta_rule,
            model=LossModel(self.model, self.reg), n_per_client=self.n_per_client, d=self.d,
            partition=self.partition, noise_std=self.noise_std, feature_decay=self.feature_decay,
            identical_within_shard=self.identical_within_shard, data_seed=self.data_seed,
            staleness_mode=self.staleness_mode, seed=self.seed, warm_start=self.warm_start, w0=w0,
            history_window=self.history_window, record_w=self.record_w, exhaustive=self.exhaustive,
        )
        kw.update(overrides)
        return RunConfig(**kw)

    @property
    def beta(self) -> float:
        return 1.0 - self.N / self.K

    def axis(self, name: str) -> tuple[int, ...]:
        return self.grid.get(name, (getattr(self, name),))

    def canonical(self) -> dict:
        """Everything that determines outputs; the output directory is excluded."""
        d = asdict(self)
        d.pop("out")
        d["grid"] = {k: list(v) for k, v in sorted(self.grid.items())}
        d["w0"] = list(self.w0) if self.w0 is not None else None
        return d

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _w0(text: str) -> tuple[float, ...] | None:
    parts = [p.strip() for p in text.split(",")]
    values = tuple(float(p) for p in parts)
    if values == (0.0,):
        return None
    return values


def _eta(text: str) -> float | None:
    return None if text.lower() in ("theorem", "auto") else float(text)


def _optional_str(text: str) -> str | None:
    return text or None


FIELDS = {
    "name": str, "task": str, "K": int, "N": int, "H": int, "T": int, "eta": _eta,
    "eta_rule": str, "model": str, "reg": float, "n_per_client": int, "d": int,
    "partition": str, "noise_std": float, "feature_decay": float,
    "identical_within_shard": _bool, "data_seed": int, "seed": int, "seeds": int,
    "staleness_mode": str, "warm_start": _bool, "w0": _w0, "history_window": int,
    "record_w": _bool, "exhaustive": _bool, "replicates": int, "t_max": int,
    "emergent_diagnostic": _bool, "max_lag": int, "tv_tolerance": float, "threshold": float,
    "check_monotone_n": _bool, "sigma_draws": int, "checkpoints": int,
    "epsilon_guard": float, "out": _optional_str,
}


def parse_spec(text: str) -> dict:
    """Parse spec text into a raw ``{key: value}`` mapping (values already typed)."""
    values: dict = {}
    grid: dict[str, tuple[int, ...]] = {}
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, _, value = (part.strip() for part in line.partition("="))
        if not key:
            raise ParseError("missing key", lineno)
        if key in seen:
            raise ParseError(f"duplicate key {key!r}", lineno)
        seen.add(key)
        if key.startswith("grid."):
            axis = key[len("grid."):]
            if axis not in GRID_AXES:
                raise ParseError(f"unknown grid axis {axis!r}; expected one of {GRID_AXES}", lineno)
            items = [v.strip() for v in value.split(",") if v.strip()]
            if not items:
                raise ConfigError(f"grid axis {axis} is empty")
            try:
                grid[axis] = tuple(int(v) for v in items)
            except ValueError as err:
                raise ParseError(f"grid.{axis}: {err}", lineno) from None
            continue
        if key not in FIELDS:
            raise ParseError(f"unknown key {key!r}", lineno)
        try:
            values[key] = FIELDS[key](value)
        except ValueError as err:
            raise ParseError(f"{key}: {err}", lineno) from None
    if grid:
        values["grid"] = grid
    return values


def build_spec(values: dict) -> ExperimentSpec:
    values = dict(values)
    if values.get("task") == "lemma1" and "staleness_mode" not in values:
        values["staleness_mode"] = "synthetic"
    if "eta" in values and values["eta"] is not None and "eta_rule" not in values:
        values["eta_rule"] = "fixed"
    spec = ExperimentSpec(**values)
    validate(spec)
    return spec


def validate(spec: ExperimentSpec) -> None:
    if not _NAME_RE.match(spec.name):
        raise ConfigError(f"name must be a valid path segment, got {spec.name!r}")
    if spec.task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {spec.task!r}")
    if spec.K < 1:
        raise ConfigError(f"K must be >= 1, got {spec.K}")
    for n in spec.axis("N"):
        if not 1 <= n <= spec.K:
            raise ConfigError(f"N must satisfy 1 <= N <= K (K={spec.K}), got {n}")
    if spec.seeds < 1:
        raise ConfigError(f"seeds must be >= 1, got {spec.seeds}")
    if spec.task == "lemma1" and spec.staleness_mode != "synthetic":
        raise ModeError("lemma1 runs under synthetic staleness; got staleness_mode=emergent")
    if spec.task == "theorem" and spec.staleness_mode != "emergent":
        raise ModeError("theorem checks run under emergent staleness")
    for name, values in spec.grid.items():
        if not values:
            raise ConfigError(f"grid axis {name} is empty")
    if spec.w0 is not None and len(spec.w0) not in (1, spec.d):
        raise ConfigError(f"w0 needs 1 or d={spec.d} values, got {len(spec.w0)}")
    if spec.replicates < 1 or spec.t_max < 1:
        raise ConfigError("replicates and t_max must be >= 1")
    # builds (and so validates) every run configuration the grid will produce
    for n in spec.axis("N"):
        for t in spec.axis("T"):
            for h in spec.axis("H"):
                spec.run_config(N=n, T=t, H=h)


def load_spec(path) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read spec {path}: {err}") from None
    return build_spec(parse_spec(text))
