import pytest

from fedstale.config import build_spec, load_spec, parse_spec
from fedstale.errors import ConfigError, ModeError, ParseError


def spec_of(text):
    return build_spec(parse_spec(text))


def test_minimal_spec_fills_defaults():
    spec = spec_of("K = 10\nN = 2\nT = 100\nmodel = quadratic\n")
    assert spec.beta == pytest.approx(0.8)
    assert spec.eta is None and spec.eta_rule == "theorem"
    assert spec.staleness_mode == "emergent"
    cfg = spec.run_config()
    assert cfg.initial_w().tolist() == [0.0] * spec.d


def test_n_out_of_range():
    for n in (0, 11):
        with pytest.raises(ConfigError, match="N must satisfy 1 <= N <= K"):
            spec_of(f"K = 10\nN = {n}\n")


def test_duplicate_key_reports_line():
    with pytest.raises(ParseError, match="line 3"):
        parse_spec("K = 10\n# comment\nK = 11\n")


@pytest.mark.parametrize("text", ["bogus = 1", "K 10", "grid.Q = 1, 2", "K = ten", "warm_start = maybe"])
def test_parse_errors(text):
    with pytest.raises(ParseError, match="line 1"):
        parse_spec(text)


def test_empty_grid_axis():
    with pytest.raises(ConfigError):
        spec_of("grid.N = ,\n")


def test_comments_and_grid():
    spec = spec_of("K = 100  # clients\ngrid.N = 5, 20, 80\ntask = sweep\n")
    assert spec.axis("N") == (5, 20, 80)
    assert spec.axis("T") == (100,)


def test_grid_values_are_validated():
    with pytest.raises(ConfigError, match="N must satisfy"):
        spec_of("K = 10\ngrid.N = 5, 20\n")


def test_eta_implies_fixed_rule():
    spec = spec_of("eta = 0.05\n")
    assert spec.eta_rule == "fixed"
    assert spec.run_config().eta == 0.05
    assert spec_of("eta = theorem\n").eta is None


def test_w0_broadcast():
    spec = spec_of("d = 3\nw0 = 2.5\n")
    assert spec.run_config().initial_w().tolist() == [2.5, 2.5, 2.5]
    with pytest.raises(ConfigError):
        spec_of("d = 3\nw0 = 1, 2\n")


def test_task_mode_pairing():
    assert spec_of("task = lemma1\n").staleness_mode == "synthetic"
    with pytest.raises(ModeError):
        spec_of("task = lemma1\nstaleness_mode = emergent\n")
    with pytest.raises(ModeError):
        spec_of("task = theorem\nstaleness_mode = synthetic\nreg = 0.1\n")


@pytest.mark.parametrize("text", ["name = a/b", "task = plot", "seeds = 0", "H = 0", "model = svm",
                                  "partition = weird", "replicates = 0"])
def test_semantic_errors(text):
    with pytest.raises(ConfigError):
        spec_of(text)


def test_digest_ignores_output_dir_and_tracks_content():
    a = spec_of("K = 10\nout = here\n")
    b = spec_of("K = 10\nout = there\n")
    c = spec_of("K = 11\n")
    assert a.digest() == b.digest() != c.digest()


def test_load_spec(tmp_path):
    p = tmp_path / "s.cfg"
    p.write_text("name = x\nK = 4\nN = 4\n")
    assert load_spec(p).beta == 0.0
    with pytest.raises(ConfigError):
        load_spec(tmp_path / "missing.cfg")
