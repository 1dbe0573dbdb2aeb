import math
from types import SimpleNamespace

import numpy as np
import pytest

from fedstale.analysis import (
    ZERO_SE_ATOL,
    check_theorem,
    coherence_series,
    gradient_coherence,
    large_t_condition,
    map_ordered,
    mean_grad_norm_curve,
    min_grad_norm,
    momentum_residual,
    participation_scaling,
    rounds_to_threshold,
    theorem_bound,
    verify_lemma1,
)
from fedstale.core import RunConfig
from fedstale.errors import BoundInapplicableError, ConfigError, ModeError, UndefinedCoherenceError
from fedstale.losses import LossModel


def rec(g2):
    return SimpleNamespace(grad_norm_sq=g2)


# -- coherence ---------------------------------------------------------------


def test_coherence_identical_gradients():
    hist = [[1.0, -2.0]] * 5
    assert all(gradient_coherence(hist, t) == 1.0 for t in range(5))


def test_coherence_orthogonal_pair():
    assert gradient_coherence([[1.0, 0.0], [0.0, 1.0]], 1) == 0.0


def test_coherence_shrinking_gradient():
    assert gradient_coherence([[1.0, 0.0], [0.5, 0.0]], 1) == 0.5


def test_coherence_guard_skips_and_raises():
    hist = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]
    assert gradient_coherence(hist, 2) == 1.0
    with pytest.raises(UndefinedCoherenceError):
        gradient_coherence(hist, 0)
    series = coherence_series(hist)
    assert math.isnan(series.mu[0])
    assert series.skipped.tolist() == [1, 1, 1]
    with pytest.raises(UndefinedCoherenceError):
        coherence_series([[0.0], [1e-9]]).mu_min


def test_coherence_series_matches_pointwise_and_running_min_is_monotone():
    rng = np.random.default_rng(0)
    hist = rng.standard_normal((60, 3)) + np.array([2.0, 0.0, 0.0])
    series = coherence_series(hist, block=7)
    pointwise = [gradient_coherence(hist, t) for t in range(60)]
    assert np.allclose(series.mu, pointwise, rtol=1e-12, atol=1e-14)
    assert np.all(np.diff(series.running_min) <= 0)
    assert series.mu_min == pytest.approx(min(pointwise))


# -- bound -------------------------------------------------------------------


def test_theorem_bound_hand_value():
    assert theorem_bound(1.0, 1.0, 0.0, 0.0, 0.5, 0.5, 100) == pytest.approx(2 / 7.5, rel=1e-14)


def test_theorem_bound_full_coherence_ignores_beta():
    values = {theorem_bound(2.0, 3.0, 1.0, 0.5, 1.0, b, 64) for b in (0.0, 0.3, 0.9)}
    assert len(values) == 1
    assert values.pop() == pytest.approx(2 * math.sqrt(2) * 2.5 / 8)


def test_theorem_bound_sqrt_t():
    b1 = theorem_bound(3.0, 2.0, 0.5, 0.1, 0.7, 0.6, 100)
    assert theorem_bound(3.0, 2.0, 0.5, 0.1, 0.7, 0.6, 400) == pytest.approx(b1 / 2, rel=1e-14)


def test_theorem_bound_monotonicity_grid():
    Ts = [1, 10, 100, 1000]
    mus = np.linspace(0.05, 1.0, 12)
    betas = np.linspace(0.0, 0.95, 12)
    B = np.array([[[theorem_bound(1.5, 1.0, 0.0, 0.2, mu, b, T) for T in Ts] for b in betas] for mu in mus])
    assert np.all(B > 0)
    assert np.all(np.diff(B, axis=2) <= 0)                  # T
    assert np.all(np.diff(B[:, 1:, :], axis=0) < 0)         # mu, beta > 0
    assert np.all(np.diff(B[:-1], axis=1) > 0)              # beta, mu < 1


def test_theorem_bound_errors():
    with pytest.raises(BoundInapplicableError):
        theorem_bound(1.0, 1.0, 0.0, 0.0, -1.0, 0.5, 10)
    with pytest.raises(ConfigError):
        theorem_bound(0.0, 1.0, 0.0, 0.0, 0.5, 0.5, 10)
    with pytest.raises(ConfigError):
        theorem_bound(1.0, 1.0, 0.0, 0.0, 0.5, 0.5, 0)


def test_large_t_condition():
    assert large_t_condition(1.0, 1.0, 0.5, 4)
    assert not large_t_condition(1.0, 1.0, 0.5, 3)
    assert not large_t_condition(1.0, 0.0, 0.9, 100)  # 0.1 * 10 = 1 < 2


# -- min grad norm -----------------------------------------------------------


def test_min_grad_norm_examples():
    assert min_grad_norm([rec(2.5)]) == 2.5
    assert min_grad_norm([rec(4.0), rec(1.0), rec(9.0)]) == 1.0
    with pytest.raises(ConfigError):
        min_grad_norm([[]])


def test_average_then_min_differs_from_mean_of_mins():
    a = [rec(0.0), rec(4.0)]
    b = [rec(4.0), rec(0.0)]
    assert mean_grad_norm_curve([a, b]).tolist() == [2.0, 2.0]
    assert min_grad_norm([a, b]) == 2.0
    assert np.mean([min_grad_norm(a), min_grad_norm(b)]) == 0.0


def test_rounds_to_threshold():
    recs = [SimpleNamespace(t=t, grad_norm_sq=g) for t, g in enumerate([5.0, 1.0, 1e-5, 1e-6])]
    assert rounds_to_threshold(recs, 1e-4) == 2
    assert rounds_to_threshold(recs, 1e-9) is None


def test_map_ordered_preserves_order():
    assert map_ordered(lambda x: x * x, range(20), threads=4) == [x * x for x in range(20)]


# -- momentum identity -------------------------------------------------------


def lemma_config(N, **kw):
    return RunConfig(K=20, N=N, H=1, d=5, n_per_client=1, identical_within_shard=True,
                     eta_rule="fixed", eta=0.1, staleness_mode="synthetic", **kw)


def test_lemma1_full_participation_is_exact():
    report = verify_lemma1(lemma_config(20), M=100, t_max=20)
    assert report.beta == 0.0
    assert report.max_abs_residual <= ZERO_SE_ATOL
    assert report.passed


def test_lemma1_half_participation():
    report = verify_lemma1(lemma_config(10), M=2000, t_max=20)
    assert report.residual.shape == (20, 5)
    assert report.sufficient
    assert report.max_z <= 4.0


def test_lemma1_single_replicate_is_flagged():
    report = verify_lemma1(lemma_config(10), M=1, t_max=5)
    assert not report.sufficient and not report.passed
    assert np.all(np.isnan(report.stderr))
    assert report.max_abs_residual > 0


def test_lemma1_rejects_emergent_mode():
    with pytest.raises(ModeError):
        verify_lemma1(lemma_config(10).with_(staleness_mode="emergent"), M=100, t_max=5)


def test_momentum_residual_is_thread_invariant():
    cfg = lemma_config(5, seed=3)
    a = momentum_residual(cfg, M=40, t_max=6)
    b = momentum_residual(cfg, M=40, t_max=6, threads=3)
    assert np.array_equal(a.residual, b.residual) and np.array_equal(a.stderr, b.stderr)


# -- theorem check -----------------------------------------------------------


def test_check_theorem_full_participation_deterministic():
    base = RunConfig(K=4, N=4, H=1, d=3, n_per_client=1, identical_within_shard=True,
                     model=LossModel("quadratic", 0.1), noise_std=0.0)
    (report,) = check_theorem(base, Ns=[4], Ts=[400], seeds=2, sigma_draws=20, checkpoints=3)
    assert report.beta == 0.0
    assert report.sigma2 == pytest.approx(0.0, abs=1e-25)
    assert report.mu_measured > 0 and report.validity
    assert report.asserted and report.satisfied
    assert report.measured < report.bound / 10


def test_check_theorem_small_t_not_asserted():
    base = RunConfig(K=10, H=2, d=3, model=LossModel("quadratic", 0.1), noise_std=0.5)
    (report,) = check_theorem(base, Ns=[1], Ts=[2], seeds=2, sigma_draws=20, checkpoints=2)
    assert not report.validity
    assert not report.asserted and report.passed
    assert "T below the large-T condition" in report.notes


def test_check_theorem_preconditions():
    quad = LossModel("quadratic", 0.1)
    with pytest.raises(ModeError):
        check_theorem(RunConfig(model=quad, staleness_mode="synthetic"), [1], [10], 1)
    with pytest.raises(ConfigError):
        check_theorem(RunConfig(model=LossModel("quadratic", 0.0)), [1], [10], 1)
    with pytest.raises(ConfigError):
        check_theorem(RunConfig(model=LossModel("logistic", 0.1)), [1], [10], 1)


def test_min_grad_norm_shrinks_with_horizon():
    base = RunConfig(K=10, N=5, H=4, d=3, model=LossModel("quadratic", 0.1), noise_std=0.5, feature_decay=2.0)
    reports = check_theorem(base, Ns=[5], Ts=[100, 400, 1600], seeds=5, sigma_draws=20, checkpoints=2)
    measured = [r.measured for r in reports]
    assert measured[0] > measured[1] > measured[2]


def test_participation_scaling_small():
    base = RunConfig(K=20, H=1, T=400, eta_rule="fixed", eta=0.5, d=3)
    rows = participation_scaling(base, [2, 10, 20], seeds=4, threshold=1e-4)
    assert [r.beta for r in rows] == pytest.approx([0.9, 0.5, 0.0])
    means = [r.mean_rounds for r in rows]
    assert means[0] >= means[1] >= means[2]
