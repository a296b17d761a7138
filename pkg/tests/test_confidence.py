import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hekf_kit import confidence as conf
from hekf_kit.errors import ConfigurationError, DomainError
from hekf_kit.narx import Standardizer


def _brute_mean_knn(points, queries, K):
    d2 = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
    return np.sort(d2, axis=1)[:, :K].mean(axis=1)


@pytest.fixture
def model(rng):
    X = rng.normal(size=(400, 3)) * [3.0, 2e4, 0.1] + [12.0, 1.2e5, 0.0]
    return conf.build(X, Standardizer.fit(X), K=10)


def test_knn_distance_matches_brute_force(model, rng):
    Q = rng.normal(size=(200, 3)) * [4.0, 3e4, 0.15] + [12.0, 1.2e5, 0.0]
    got = conf.mean_knn_distance(model, Q)
    want = _brute_mean_knn(model.points, model.standardizer.standardize(Q), model.K)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_confidence_end_points_and_slope():
    assert conf.confidence(2.0, 0.0) == 1.0
    assert conf.confidence(2.0, 2.0) == 0.0
    assert conf.confidence(2.0, 5.0) == 0.0
    assert conf.confidence(2.0, 0.5) == pytest.approx(0.75)
    with pytest.raises(DomainError):
        conf.confidence(2.0, -0.1)


@settings(max_examples=200, deadline=None)
@given(d_max=st.floats(1e-3, 1e3), a=st.floats(0, 2e3), b=st.floats(0, 2e3))
def test_confidence_is_monotone_and_bounded(d_max, a, b):
    lo, hi = sorted((a, b))
    t_lo, t_hi = conf.confidence(d_max, lo), conf.confidence(d_max, hi)
    assert 0.0 <= t_hi <= t_lo <= 1.0


def test_leave_one_out_excludes_the_point_itself(rng):
    P = rng.normal(size=(60, 2))
    loo = conf.leave_one_out_distances(P, 5)
    for i in (0, 17, 59):
        others = np.delete(P, i, axis=0)
        assert loo[i] == pytest.approx(_brute_mean_knn(others, P[i:i + 1], 5)[0], rel=1e-12)


def test_leave_one_out_with_duplicates(rng):
    P = np.vstack([np.zeros((3, 2)), rng.normal(size=(20, 2))])
    loo = conf.leave_one_out_distances(P, 2)
    assert loo[0] == 0.0  # two identical partners remain


def test_leave_group_out_uses_only_other_groups(rng):
    P = rng.normal(size=(90, 2))
    groups = np.repeat([0, 1, 2], 30)
    lgo = conf.leave_group_out_distances(P, groups, 4)
    i = 40
    want = _brute_mean_knn(P[groups != 1], P[i:i + 1], 4)[0]
    assert lgo[i] == pytest.approx(want, rel=1e-12)
    assert np.all(lgo >= conf.leave_one_out_distances(P, 4) - 1e-12)


def test_threshold_is_held_out_quantile(rng):
    X = rng.normal(size=(300, 3))
    std = Standardizer.fit(X)
    m = conf.build(X, std, K=8, quantile=0.9)
    assert m.d_max == pytest.approx(np.quantile(conf.leave_one_out_distances(std.standardize(X), 8), 0.9))
    groups = np.repeat(np.arange(6), 50)
    mg = conf.build(X, std, K=8, quantile=0.9, groups=groups)
    assert mg.d_max == pytest.approx(
        np.quantile(conf.leave_group_out_distances(std.standardize(X), groups, 8), 0.9))


def test_far_queries_get_zero_confidence(model):
    _, tau_in = conf.evaluate(model, np.array([12.0, 1.2e5, 0.0]))
    _, tau_out = conf.evaluate(model, np.array([12.0, 5e5, 0.0]))
    assert tau_in > 0.5 and tau_out == 0.0


def test_model_round_trip_and_errors(model, rng):
    again = conf.ConfidenceModel.from_dict(model.to_dict())
    Q = rng.normal(size=(5, 3)) * [3.0, 2e4, 0.1] + [12.0, 1.2e5, 0.0]
    np.testing.assert_array_equal(conf.mean_knn_distance(again, Q), conf.mean_knn_distance(model, Q))
    with pytest.raises(ConfigurationError):
        conf.ConfidenceModel(model.points[:3], model.standardizer, K=10)
    with pytest.raises(ConfigurationError):
        conf.ConfidenceModel(model.points, model.standardizer, K=3, d_max=0.0)


def test_histogram_baseline_ranks_dense_regions_higher(rng):
    X = rng.normal(size=(2000, 2))
    h = conf.histogram_confidence(X, 8)
    assert h(np.array([0.0, 0.0])) > h(np.array([2.0, 2.0]))
    assert h(np.array([50.0, 0.0])) == 0.0
