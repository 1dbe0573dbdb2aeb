import csv
import json

import pytest

from fedstale.cli import main
from fedstale.config import build_spec, parse_spec
from fedstale.harness import PARTIAL_MARKER, run_experiment, sweep


def spec_of(text):
    return build_spec(parse_spec(text))


def write(tmp_path, text, name="s.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def summary(out):
    return json.loads((out / "summary.json").read_text())


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


TRAIN = """name = tr
task = train
K = 6
N = 2
H = 2
T = 40
noise_std = 0.3
seeds = 3
"""


def test_train_outputs(tmp_path):
    m = run_experiment(spec_of(TRAIN), tmp_path / "o")
    assert m.exit_code == 0 and m.passed
    assert [p.name for p in m.csv_paths] == ["train_seed0.csv", "train_seed1.csv", "train_seed2.csv"]
    rows = list(csv.DictReader(open(m.csv_paths[0])))
    assert len(rows) == 40
    assert list(rows[0])[:6] == ["t", "f_w", "grad_norm_sq", "delta_w_norm", "coherence", "selected"]
    assert len(rows[3]["selected"].split(";")) == 2
    s = summary(tmp_path / "o")
    assert s["schema_version"] == 1 and s["spec_hash"] == m.spec_hash
    assert s["results"]["beta"] == pytest.approx(2 / 3)
    assert not (tmp_path / "o" / PARTIAL_MARKER).exists()


def test_staleness_task_passes(tmp_path):
    m = run_experiment(spec_of("name = st\ntask = staleness\nK = 20\nN = 5\nT = 5000\n"), tmp_path)
    s = summary(tmp_path)
    assert m.exit_code == 0
    assert s["results"]["tv_distance"] < 0.01


def test_assertion_failure_exit_code(tmp_path):
    m = run_experiment(spec_of("name = st\ntask = staleness\nK = 20\nN = 5\nT = 50\ntv_tolerance = 1e-9\n"), tmp_path)
    assert m.exit_code == 2
    assert summary(tmp_path)["passed"] is False


def test_lemma1_beta_zero(tmp_path):
    text = ("name = lm\ntask = lemma1\nK = 4\nN = 4\nn_per_client = 1\nidentical_within_shard = true\n"
            "eta = 0.1\nreplicates = 100\nt_max = 10\n")
    m = run_experiment(spec_of(text), tmp_path)
    s = summary(tmp_path)
    assert m.exit_code == 0
    assert s["results"]["max_z"] == 0.0
    assert s["results"]["max_abs_residual"] <= 1e-10
    assert (tmp_path / "momentum.csv").exists() and (tmp_path / "momentum_emergent.csv").exists()


def test_divergence_keeps_partial_outputs(tmp_path):
    m = run_experiment(spec_of("name = dv\nK = 3\nN = 3\nT = 500\neta = 50\nnoise_std = 0.1\n"), tmp_path)
    assert m.exit_code == 4
    assert "DivergenceError" in (tmp_path / PARTIAL_MARKER).read_text()
    assert (tmp_path / "train_seed0.csv").exists()
    assert not (tmp_path / "summary.json").exists()


def test_theorem_task(tmp_path):
    text = ("name = th\ntask = theorem\nK = 4\nN = 4\nd = 3\nn_per_client = 1\nidentical_within_shard = true\n"
            "reg = 0.1\nT = 400\nseeds = 2\nsigma_draws = 10\ncheckpoints = 2\n")
    m = run_experiment(spec_of(text), tmp_path)
    assert m.exit_code == 0
    rows = list(csv.DictReader(open(tmp_path / "bounds.csv")))
    assert rows[0]["asserted"] == "true" and rows[0]["satisfied"] == "true"
    assert (tmp_path / "coherence_N4_T400.csv").exists()


SWEEP = """name = sw
task = sweep
K = 100
T = 30
H = 1
eta = 0.5
grid.N = 5, 20, 80
"""


def test_sweep_rows_and_beta(tmp_path):
    manifests = sweep(spec_of(SWEEP), tmp_path)
    assert len(manifests) == 3 and all(m.exit_code == 0 for m in manifests)
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert [float(r["beta"]) for r in rows] == pytest.approx([0.95, 0.8, 0.2])
    assert summary(tmp_path)["results"]["cell_count"] == 3


def test_sweep_counts_cells_and_runs(tmp_path):
    spec = spec_of("name = g\ntask = sweep\nK = 10\nH = 1\nseeds = 2\neta = 0.2\ngrid.N = 1, 5, 10\ngrid.T = 3, 4, 5\n")
    manifests = sweep(spec, tmp_path)
    assert len(manifests) == 9
    assert sum(len(m.csv_paths) for m in manifests) == 18
    assert all(p.exists() for m in manifests for p in m.csv_paths)
    assert summary(tmp_path)["results"]["runs"] == 18


def test_sweep_failed_cell_does_not_stop_others(tmp_path):
    spec = spec_of("name = f\ntask = sweep\nK = 3\nT = 300\nnoise_std = 0.1\neta = 50\ngrid.N = 1, 3\n")
    manifests = sweep(spec, tmp_path)
    codes = [m.exit_code for m in manifests]
    assert 4 in codes
    assert (tmp_path / "sweep.csv").exists()
    assert summary(tmp_path)["exit_code"] == 4


# -- CLI ---------------------------------------------------------------------


def test_cli_exit_codes(tmp_path):
    ok = write(tmp_path, "name = c\nK = 4\nN = 2\nT = 5\n")
    assert main(["train", "--spec", ok, "--out", str(tmp_path / "a"), "--quiet"]) == 0
    bad = write(tmp_path, "K = 10\nN = 0\n", "bad.cfg")
    assert main(["train", "--spec", bad, "--quiet"]) == 3
    assert main(["train", "--spec", str(tmp_path / "nope.cfg"), "--quiet"]) == 3
    fail = write(tmp_path, "name = f\nK = 20\nN = 5\nT = 50\ntv_tolerance = 1e-9\n", "fail.cfg")
    assert main(["staleness-check", "--spec", fail, "--out", str(tmp_path / "b"), "--quiet"]) == 2


def test_cli_seeds_override(tmp_path):
    spec = write(tmp_path, "name = c\nK = 4\nN = 2\nT = 5\n")
    assert main(["train", "--spec", spec, "--out", str(tmp_path / "o"), "--seeds", "4", "--quiet"]) == 0
    assert len(list((tmp_path / "o").glob("train_seed*.csv"))) == 4


@pytest.mark.parametrize("command,text", [
    ("train", TRAIN),
    ("sweep", SWEEP),
    ("verify-lemma1", "name = l\nK = 10\nN = 5\nn_per_client = 1\nidentical_within_shard = true\n"
                      "eta = 0.1\nreplicates = 100\nt_max = 5\n"),
])
def test_cli_outputs_independent_of_threads(tmp_path, command, text):
    spec = write(tmp_path, text)
    assert main([command, "--spec", spec, "--out", str(tmp_path / "one"), "--quiet"]) in (0, 2)
    assert main([command, "--spec", spec, "--out", str(tmp_path / "four"), "--threads", "4", "--quiet"]) in (0, 2)
    a, b = tree_bytes(tmp_path / "one"), tree_bytes(tmp_path / "four")
    assert a and a == b
