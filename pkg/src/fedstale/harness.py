"""Run experiment specs end to end and persist their outputs.

Each task writes its CSVs plus one ``summary.json`` into the output
directory. While a task runs a ``.partial`` marker sits next to the outputs;
it is removed on success and left (holding the error) on failure.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np

from . import __version__, io
from .analysis import (
    check_theorem,
    map_ordered,
    min_grad_norm,
    momentum_residual,
    rounds_to_threshold,
    verify_lemma1,
)
from .config import ExperimentSpec
from .core import final_w, run_training, setup_problem
from .errors import DivergenceError, FedStaleError
from .staleness import STREAM_SYNTHETIC, round_rng, sample_synthetic_staleness, simulate_emergent_staleness, \
    staleness_histogram

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ASSERTION = 2
EXIT_CONFIG = 3
EXIT_DIVERGENCE = 4

PARTIAL_MARKER = ".partial"


@dataclass
class ResultManifest:
    spec_hash: str
    out_dir: Path
    csv_paths: list[Path] = field(default_factory=list)
    summary_path: Path | None = None
    wall_clock: float = 0.0
    version: str = __version__
    exit_code: int = EXIT_OK
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.exit_code == EXIT_OK


def _check(name: str, passed: bool, **detail) -> dict:
    return {"name": name, "passed": bool(passed), **detail}


def _task_train(spec: ExperimentSpec, out: Path, threads: int) -> tuple[dict, list[Path]]:
    cfg = spec.run_config()
    problem = setup_problem(cfg)
    seeds = [spec.seed + i for i in range(spec.seeds)]

    def one(seed: int):
        try:
            return run_training(cfg.with_(seed=seed), problem)
        except DivergenceError as err:
            io.write_records(out / f"train_seed{seed}.csv", err.records)
            raise

    runs = map_ordered(one, seeds, threads)
    paths = []
    per_seed = []
    for s, recs in zip(seeds, runs):
        io.fill_coherence(recs, spec.epsilon_guard)
        paths.append(io.write_records(out / f"train_seed{s}.csv", recs))
        per_seed.append({
            "seed": s,
            "final_loss": recs[-1].loss if recs else None,
            "min_grad_norm_sq": min((r.grad_norm_sq for r in recs), default=None),
            "rounds_to_threshold": rounds_to_threshold(recs, spec.threshold),
            "w_T": final_w(cfg, recs),
        })
    hits = [r["rounds_to_threshold"] for r in per_seed]
    results = {
        "beta": cfg.beta, "eta": problem.eta, "L": problem.L, "runs": per_seed,
        "min_mean_grad_norm_sq": min_grad_norm(runs) if cfg.T else None,
        "mean_rounds_to_threshold": float(np.mean([cfg.T if h is None else h for h in hits])),
        "unreached": sum(h is None for h in hits),
        "final_loss_mean": float(np.mean([r["final_loss"] for r in per_seed])) if cfg.T else None,
    }
    return {"results": results, "checks": []}, paths


def _task_staleness(spec: ExperimentSpec, out: Path, threads: int) -> tuple[dict, list[Path]]:
    cfg = spec.run_config()
    plan = cfg.plan
    seeds = [spec.seed + i for i in range(spec.seeds)]

    def one(seed: int) -> np.ndarray:
        if plan.mode == "emergent":
            return simulate_emergent_staleness(plan, spec.T, seed)
        return np.stack([sample_synthetic_staleness(plan, round_rng(seed, t, STREAM_SYNTHETIC))
                         for t in range(spec.T)])

    samples = np.concatenate(map_ordered(one, seeds, threads))
    hist = staleness_histogram(samples, plan.beta, spec.max_lag)
    path = io.write_csv(out / "staleness_hist.csv", ["l", "empirical_pmf", "theoretical_pmf"],
                        zip(hist["lag"], hist["empirical_pmf"], hist["theoretical_pmf"]))
    tv = hist["tv_distance"]
    results = {
        "beta": plan.beta, "mode": plan.mode, "samples": int(samples.size), "tv_distance": tv,
        "tail_empirical": hist["tail_empirical"], "tail_theoretical": hist["tail_theoretical"],
        "mean_staleness": float(samples.mean()),
        "mean_staleness_theoretical": plan.beta / (1.0 - plan.beta),
    }
    checks = [_check("tv_distance", tv < spec.tv_tolerance, value=tv, tolerance=spec.tv_tolerance)]
    return {"results": results, "checks": checks}, [path]


def _task_lemma1(spec: ExperimentSpec, out: Path, threads: int) -> tuple[dict, list[Path]]:
    cfg = spec.run_config()
    report = verify_lemma1(cfg, spec.replicates, spec.t_max, threads=threads)
    paths = [io.write_momentum(out / "momentum.csv", report)]
    results = {
        "beta": report.beta, "eta": report.eta, "M": report.M, "t_max": spec.t_max,
        "max_z": report.max_z, "max_abs_residual": report.max_abs_residual,
        "sufficient_replicates": report.sufficient,
    }
    checks = [_check("momentum_residual_within_4se", report.passed, max_z=report.max_z)]
    if report.beta == 0.0:
        checks.append(_check("beta0_residual_abs", report.max_abs_residual <= 1e-10,
                             value=report.max_abs_residual, tolerance=1e-10))
    if spec.emergent_diagnostic:
        diag = momentum_residual(cfg.with_(staleness_mode="emergent"), spec.replicates, spec.t_max, threads=threads)
        paths.append(io.write_momentum(out / "momentum_emergent.csv", diag))
        results["emergent_diagnostic"] = {"max_z": diag.max_z, "max_abs_residual": diag.max_abs_residual}
    return {"results": results, "checks": checks}, paths


def _task_theorem(spec: ExperimentSpec, out: Path, threads: int) -> tuple[dict, list[Path]]:
    base = spec.run_config()
    reports = check_theorem(base, spec.axis("N"), spec.axis("T"), spec.seeds, sigma_draws=spec.sigma_draws,
                            checkpoints=spec.checkpoints, epsilon_guard=spec.epsilon_guard, threads=threads)
    cols = ["K", "N", "T", "beta", "eta", "L", "f0", "fstar", "sigma2", "sigma2_w0", "sigma2_w0_se",
            "mu_measured", "mu", "bound", "measured", "satisfied", "validity", "hypothesis_ok", "asserted",
            "excluded_rounds", "seeds", "notes"]
    rows = []
    cells = []
    paths = []
    for r in reports:
        paths.append(io.write_coherence(out / f"coherence_N{r.N}_T{r.T}.csv", r.coherence))
        d = {c: getattr(r, c) for c in cols if c not in ("hypothesis_ok", "asserted", "notes")}
        d.update(hypothesis_ok=r.hypothesis_ok, asserted=r.asserted, notes="; ".join(r.notes))
        rows.append([d[c] for c in cols])
        cells.append({c: d[c] for c in cols} | {"passed": r.passed})
    paths.insert(0, io.write_csv(out / "bounds.csv", cols, rows))
    asserted = [r for r in reports if r.asserted]
    checks = [_check("bound_holds_where_asserted", all(r.satisfied for r in asserted),
                     asserted_cells=len(asserted), total_cells=len(reports))]
    return {"results": {"cells": cells}, "checks": checks}, paths


TASKS = {
    "train": _task_train,
    "staleness": _task_staleness,
    "lemma1": _task_lemma1,
    "theorem": _task_theorem,
}


def _execute(spec: ExperimentSpec, out: Path, threads: int) -> tuple[ResultManifest, dict | None]:
    out.mkdir(parents=True, exist_ok=True)
    marker = out / PARTIAL_MARKER
    marker.write_text("running\n")
    manifest = ResultManifest(spec_hash=spec.digest(), out_dir=out)
    start = time.perf_counter()
    try:
        if spec.task == "sweep":
            summary, paths, exit_code = _sweep_task(spec, out, threads)
        else:
            summary, paths = TASKS[spec.task](spec, out, threads)
            exit_code = EXIT_OK if all(c["passed"] for c in summary["checks"]) else EXIT_ASSERTION
    except FedStaleError as err:
        manifest.exit_code = err.exit_code
        manifest.error = f"{type(err).__name__}: {err}"
        marker.write_text(manifest.error + "\n")
        log.error("%s failed: %s", spec.name, manifest.error)
        manifest.wall_clock = time.perf_counter() - start
        return manifest, None

    manifest.exit_code = exit_code
    summary.update(name=spec.name, task=spec.task, spec_hash=manifest.spec_hash, spec=spec.canonical(),
                   passed=all(c["passed"] for c in summary["checks"]), exit_code=exit_code)
    manifest.csv_paths = paths
    manifest.summary_path = io.write_summary(out / "summary.json", summary)
    manifest.wall_clock = time.perf_counter() - start
    marker.unlink()
    for c in summary["checks"]:
        log.info("%s: %s %s", spec.name, "PASS" if c["passed"] else "FAIL", c["name"])
    return manifest, summary


def _output_dir(spec: ExperimentSpec, out) -> Path:
    return Path(out or spec.out or Path("results") / spec.name)


def run_experiment(spec: ExperimentSpec, out: str | Path | None = None, threads: int = 1) -> ResultManifest:
    """Execute ``spec.task`` and write its outputs; module errors become exit codes, not exceptions."""
    manifest, _ = _execute(spec, _output_dir(spec, out), threads)
    return manifest


SWEEP_COLUMNS = ["N", "T", "H", "beta", "eta", "seeds", "mean_rounds_to_threshold", "unreached",
                 "min_mean_grad_norm_sq", "final_loss_mean", "exit_code"]


def _cells(spec: ExperimentSpec) -> list[ExperimentSpec]:
    return [
        replace(spec, task="train", N=N, T=T, H=H, grid={}, name=f"cell_N{N}_T{T}_H{H}", out=None)
        for T, H, N in product(spec.axis("T"), spec.axis("H"), spec.axis("N"))
    ]


def _sweep_cells(spec: ExperimentSpec, out: Path, threads: int) -> list[tuple[ResultManifest, dict | None]]:
    return [_execute(cell, out / cell.name, threads) for cell in _cells(spec)]


def _sweep_task(spec: ExperimentSpec, out: Path, threads: int) -> tuple[dict, list[Path], int]:
    results = _sweep_cells(spec, out, threads)
    rows = []
    for cell, (manifest, summary) in zip(_cells(spec), results):
        row = {"N": cell.N, "T": cell.T, "H": cell.H, "beta": cell.beta, "seeds": cell.seeds,
               "exit_code": manifest.exit_code}
        if summary is not None:
            r = summary["results"]
            row.update(eta=r["eta"], mean_rounds_to_threshold=r["mean_rounds_to_threshold"],
                       unreached=r["unreached"], min_mean_grad_norm_sq=r["min_mean_grad_norm_sq"],
                       final_loss_mean=r["final_loss_mean"])
        rows.append(row)
    table = io.write_csv(out / "sweep.csv", SWEEP_COLUMNS, ([r.get(c) for c in SWEEP_COLUMNS] for r in rows))

    failed = [m for m, _ in results if m.exit_code != EXIT_OK]
    checks = [_check("all_cells_completed", not failed, failed=len(failed))]
    if spec.check_monotone_n:
        ok = True
        for T, H in product(spec.axis("T"), spec.axis("H")):
            group = sorted((r for r in rows if r["T"] == T and r["H"] == H and "eta" in r), key=lambda r: r["N"])
            means = [r["mean_rounds_to_threshold"] for r in group]
            ok &= all(b <= a for a, b in zip(means, means[1:]))
        checks.append(_check("rounds_non_increasing_in_N", ok))
    exit_code = failed[0].exit_code if failed else EXIT_OK
    if exit_code == EXIT_OK and not all(c["passed"] for c in checks):
        exit_code = EXIT_ASSERTION
    summary = {"results": {"cells": rows, "cell_count": len(rows), "runs": len(rows) * spec.seeds},
               "checks": checks}
    paths = [p for m, _ in results for p in m.csv_paths] + [table]
    return summary, paths, exit_code


def sweep(spec: ExperimentSpec, out: str | Path | None = None, threads: int = 1) -> list[ResultManifest]:
    """Run every (N, T, H) grid cell and write the joined ``sweep.csv`` table.

    Returns one manifest per cell. A failing cell keeps its ``.partial``
    marker and the remaining cells still run.
    """
    root = _output_dir(spec, out)
    root.mkdir(parents=True, exist_ok=True)
    spec = replace(spec, task="sweep")
    manifest, summary = _execute(spec, root, threads)
    if summary is None:
        return [manifest]
    return [ResultManifest(spec_hash=c.digest(), out_dir=root / c.name,
                           csv_paths=[root / c.name / f"train_seed{c.seed + i}.csv" for i in range(c.seeds)],
                           summary_path=root / c.name / "summary.json",
                           exit_code=row["exit_code"])
            for c, row in zip(_cells(spec), summary["results"]["cells"])]
