import inspect
import json
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from distdp import blr
from distdp.blr import (
    BlrPosterior, DistributedAggregator, FitSettings, ProjectionBounds, SufficientStatistics,
    TrustedAggregator, estimate_marginal_std, fit_distributed, fit_input_perturbation,
    fit_non_private, fit_trusted_aggregator, flatten_stats, generate_auxiliary,
    grid_search_thresholds, posterior, predict, project, record_stats, suff_stats,
    unflatten_stats,
)
from distdp.dp import PrivacyBudget, blr_sensitivity, gaussian_sigma, record_sensitivity
from distdp.errors import DimensionMismatch, InsufficientClients, NotPositiveDefinite

INF = PrivacyBudget(math.inf, 1e-5)


def ridge_oracle(X, y, alpha):
    """Least squares on the data stacked with sqrt(alpha) * I; no normal equations."""
    d = X.shape[1]
    A = np.vstack([X, math.sqrt(alpha) * np.eye(d)])
    b = np.concatenate([y, np.zeros(d)])
    return scipy.linalg.lstsq(A, b)[0]


def test_project_examples():
    assert project([5.0], [2.0]).tolist() == [2.0]
    assert project([-3.0], [2.0]).tolist() == [-2.0]
    assert project([1.0], [2.0]).tolist() == [1.0]
    b = ProjectionBounds.uniform(1.0, 3.0, 2)
    assert project([[4.0, -4.0, 4.0]], b).tolist() == [[1.0, -1.0, 3.0]]


def test_bounds_validation():
    with pytest.raises(ValueError):
        ProjectionBounds(np.array([1.0]))
    with pytest.raises(ValueError):
        ProjectionBounds(np.array([1.0, 0.0]))
    b = ProjectionBounds.uniform(2.0, 0.5, 3)
    assert b.d == 3 and b.target == 0.5
    assert b.sensitivity().l2 == blr_sensitivity(2.0, 0.5, 3).l2


def test_suff_stats_examples():
    s = suff_stats(np.zeros((0, 3)), np.zeros(0))
    assert np.all(s.xx == 0) and np.all(s.xy == 0) and s.n == 0
    s = suff_stats([[1.0]], [2.0])
    assert s.xx.tolist() == [[1.0]] and s.xy.tolist() == [2.0]
    with pytest.raises(DimensionMismatch):
        suff_stats(np.ones((3, 2)), np.ones(4))


def test_suff_stats_against_naive_sums():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(100, 5)), rng.normal(size=100)
    s = suff_stats(X, y)
    xx = np.zeros((5, 5))
    xy = np.zeros(5)
    for i in range(100):
        for a in range(5):
            xy[a] += X[i, a] * y[i]
            for b in range(5):
                xx[a, b] += X[i, a] * X[i, b]
    assert np.allclose(s.xx, xx, rtol=1e-12, atol=0)
    assert np.allclose(s.xy, xy, rtol=1e-12, atol=1e-12)


def test_flatten_examples():
    s = SufficientStatistics(np.array([[3.0]]), np.array([4.0]), 1)
    assert flatten_stats(s).tolist() == [3.0, 4.0]
    assert flatten_stats(suff_stats(np.ones((2, 2)), np.ones(2))).size == 5
    with pytest.raises(DimensionMismatch):
        unflatten_stats(np.zeros(4), 2)


def test_flatten_round_trip_is_symmetric():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(30, 4)), rng.normal(size=30)
    s = suff_stats(X, y)
    t = unflatten_stats(flatten_stats(s), 4, 30)
    assert np.array_equal(t.xx, t.xx.T)
    assert np.allclose(t.xx, s.xx, rtol=0, atol=1e-12) and np.array_equal(t.xy, s.xy)


def test_record_stats_sum_to_flat_stats():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(40, 3)), rng.normal(size=40)
    assert np.allclose(record_stats(X, y).sum(axis=0), flatten_stats(suff_stats(X, y)))


def test_posterior_examples():
    p = posterior(SufficientStatistics(np.zeros((3, 3)), np.zeros(3), 0), lambda0=2.0)
    assert np.array_equal(p.precision, 2.0 * np.eye(3)) and np.all(p.mean == 0)
    p = posterior(suff_stats([[1.0]], [1.0]))
    assert p.precision.tolist() == [[2.0]] and p.mean[0] == pytest.approx(0.5, rel=1e-15)
    assert np.array_equal(p.precision, p.precision.T)


@pytest.mark.parametrize("lambda0,lam", [(1.0, 1.0), (0.5, 2.0), (3.0, 0.1)])
def test_posterior_matches_ridge(lambda0, lam):
    rng = np.random.default_rng(3)
    X, y = rng.normal(size=(200, 6)), rng.normal(size=200)
    p = posterior(suff_stats(X, y), lambda0, lam)
    assert p.ridge == 0.0
    assert np.allclose(p.mean, ridge_oracle(X, y, lambda0 / lam), rtol=1e-10, atol=0)


def test_ridge_ladder_repairs_indefinite_precision():
    s = SufficientStatistics(np.array([[-5.0, 0.0], [0.0, 1.0]]), np.ones(2), 1)
    p = posterior(s)
    assert p.ridge == 10.0
    assert np.linalg.eigvalsh(p.precision)[0] >= 1.0
    with pytest.raises(NotPositiveDefinite):
        posterior(SufficientStatistics(-1e15 * np.eye(2), np.ones(2), 1))


def test_predict_examples():
    p = BlrPosterior(np.eye(3), np.zeros(3))
    assert predict([1.0, 2.0, 3.0], p) == 0.0
    p = BlrPosterior(np.eye(3), np.array([0.5, -1.0, 2.0]))
    assert predict([0.0, 1.0, 0.0], p) == -1.0
    x = np.random.default_rng(0).normal(size=3)
    assert predict(x, p) == pytest.approx(sum(a * b for a, b in zip(x, p.mean)))
    with pytest.raises(DimensionMismatch):
        predict([1.0], p)


def test_posterior_json():
    p = fit_trusted_aggregator(*generate_auxiliary(50, 2, rng=0), ProjectionBounds.uniform(3, 3, 2),
                               PrivacyBudget(1.0, 1e-5), rng=0)
    d = json.loads(p.to_json())
    assert d["d"] == 2 and d["n"] == 50 and len(d["precision"]) == 4
    assert d["budget_spent"] == {"epsilon": 1.0, "delta": 1e-5}
    assert set(d) >= {"mean", "precision", "ridge_increment", "bounds"}


def test_auxiliary_moments():
    X, y = generate_auxiliary(10**5, 3, 1.0, 0.5, np.random.default_rng(4))
    assert np.abs(np.cov(X.T) - np.eye(3)).max() < 0.02
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    assert np.var(y - X @ beta) == pytest.approx(0.5, rel=0.05)


def test_auxiliary_degenerate_prior():
    X, y = generate_auxiliary(10**4, 2, 1e-12, 1.0, np.random.default_rng(5))
    assert abs(np.mean(y)) < 0.05 and abs(np.corrcoef(X[:, 0], y)[0, 1]) < 0.05


def test_grid_defaults():
    g = blr.default_grid()
    assert g.size == 20 and g[0] == pytest.approx(0.1) and g[-1] == pytest.approx(2.1)
    assert inspect.signature(grid_search_thresholds).parameters["repeats"].default == 10
    assert FitSettings().repeats == 10 and FitSettings().split == 0.2


def test_grid_search_noiseless_beats_smallest_threshold():
    X, y = generate_auxiliary(500, 3, rng=np.random.default_rng(6))
    p_x, p_y = grid_search_thresholds((X, y), INF, repeats=1, rng=0)

    def err(px, py):
        cx, cy = px * X.std(axis=0), py * y.std()
        m = fit_non_private(np.clip(X, -cx, cx), np.clip(y, -cy, cy)).mean
        return np.mean(np.abs(X @ m - y))

    assert err(p_x, p_y) <= err(0.1, 0.1)
    assert p_x > 0.1


def test_grid_search_validates_input():
    aux = generate_auxiliary(20, 2, rng=0)
    with pytest.raises(ValueError):
        grid_search_thresholds(aux, INF, grid=[])
    with pytest.raises(ValueError):
        grid_search_thresholds(aux, INF, repeats=0)


@pytest.mark.parametrize("estimator", ["abs", "squares"])
def test_std_estimate_floor(estimator):
    est = estimate_marginal_std(np.zeros((100, 3)), np.full(3, 7.5), INF, estimator=estimator)
    assert est.tolist() == [0.5, 0.5, 0.5]


@pytest.mark.parametrize("estimator", ["abs", "squares"])
def test_std_estimate_standard_normal(estimator):
    data = np.random.default_rng(7).standard_normal((10**4, 2))
    c = np.full(2, 5.0)
    est = estimate_marginal_std(project(data, c), c, PrivacyBudget(10.0, 1e-5),
                                DistributedAggregator(), np.random.default_rng(8), estimator=estimator)
    assert np.all(np.abs(est - 1.0) < 0.1)


def test_std_estimate_capped_at_bound():
    data = project(3 * np.random.default_rng(9).standard_normal((1000, 2)), [1.0, 1.0])
    est = estimate_marginal_std(data, np.ones(2), INF)
    assert np.all(est <= 1.0)


def _data(n=400, d=3, seed=10):
    return generate_auxiliary(n, d, rng=np.random.default_rng(seed))


@pytest.mark.parametrize("projection", [False, True])
def test_infinite_budget_matches_non_private(projection):
    X, y = _data()
    b = ProjectionBounds.uniform(2.0, 3.0, 3)
    for fit in (
        lambda: fit_distributed(X, y, b, INF, rng=1, projection=projection,
                                settings=FitSettings(repeats=2)),
        lambda: fit_trusted_aggregator(X, y, b, INF, rng=1, projection=projection,
                                       settings=FitSettings(repeats=2)),
    ):
        p = fit()
        ref = fit_non_private(X, y, p.bounds)
        assert np.allclose(p.mean, ref.mean, rtol=1e-6, atol=1e-9)
        assert p.ridge == 0.0


def test_projection_tightens_bounds():
    X, y = _data(n=2000)
    b = ProjectionBounds.uniform(7.5, 7.5, 3)
    p = fit_distributed(X, y, b, PrivacyBudget(1.0, 1e-5), rng=2, settings=FitSettings(repeats=2))
    assert p.bounds.provenance == "estimated"
    assert np.all(p.bounds.thresholds <= b.thresholds)
    assert p.bounds.sensitivity().l2 <= b.sensitivity().l2


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=6), st.floats(0, 1), st.floats(0, 1))
def test_projection_never_increases_sensitivity(c, shrink_x, shrink_y):
    c = np.asarray(c)
    d = c.size - 1
    tight = c * np.r_[np.full(d, max(shrink_x, 1e-3)), max(shrink_y, 1e-3)]
    assert blr_sensitivity(tight[:-1], tight[-1], d).l2 <= blr_sensitivity(c[:-1], c[-1], d).l2 * (1 + 1e-12)


def test_fit_distributed_needs_enough_clients():
    X, y = _data(n=3)
    with pytest.raises(InsufficientClients):
        fit_distributed(X, y, ProjectionBounds.uniform(1, 1, 3), PrivacyBudget(1, 1e-5),
                        DistributedAggregator(collusion_tolerance=2), projection=False)


def test_distributed_noise_variance_factor():
    # zero records isolate the noise; small N makes the factor visible
    N, T, dim = 6, 2, 40000
    records = np.zeros((N, dim))
    budget = PrivacyBudget(1.0, 1e-5)
    sens = blr.QuerySensitivity(1.0, dim)
    ta = TrustedAggregator().noisy_sum(records, sens, budget, np.random.default_rng(0))
    ddp = DistributedAggregator(collusion_tolerance=T).noisy_sum(records, sens, budget,
                                                               np.random.default_rng(0))
    sigma2 = gaussian_sigma(sens, budget) ** 2
    se = math.sqrt(2 / dim)
    assert ta.var() / sigma2 == pytest.approx(1.0, abs=4 * se)
    assert ddp.var() / sigma2 == pytest.approx(N / (N - T - 1), rel=4 * se)


def test_distributed_over_network_matches_simulation_without_noise():
    from distdp.transport import InProcessNetwork

    X, y = _data(n=30)
    b = ProjectionBounds.uniform(2.0, 2.0, 3)
    with InProcessNetwork() as net:
        p = fit_distributed(X, y, b, INF, DistributedAggregator(network=net, timeout=1.0),
                            rng=0, projection=False)
    q = fit_distributed(X, y, b, INF, rng=0, projection=False)
    assert np.allclose(p.mean, q.mean, rtol=0, atol=1e-9)


def test_input_perturbation():
    X, y = _data()
    b = ProjectionBounds.uniform(2.0, 3.0, 3)
    p = fit_input_perturbation(X, y, b, INF, rng=0)
    assert np.allclose(p.mean, fit_non_private(X, y, b).mean, rtol=1e-12)
    budget = PrivacyBudget(1.0, 1e-5)
    expected = gaussian_sigma(record_sensitivity(b.thresholds), budget)
    for n in (50, 5000):
        Xn, yn = _data(n=n)
        q = fit_input_perturbation(Xn, yn, b, budget, rng=1)
        assert q.info["record_sigma"] == expected


def test_input_perturbation_noise_per_record():
    # with zero data every feature of every record carries the per-record noise
    b = ProjectionBounds.uniform(1.0, 1.0, 2)
    budget = PrivacyBudget(1.0, 1e-5)
    sigma = gaussian_sigma(record_sensitivity(b.thresholds), budget)
    n = 20000
    p = fit_input_perturbation(np.zeros((n, 2)), np.zeros(n), b, budget, rng=3)
    # the noisy xx diagonal is about n sigma^2
    diag = np.diag(p.precision) - 1.0
    assert np.allclose(diag / (n * sigma**2), 1.0, rtol=0.05)
