import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from bilinear_ssm.estimator import SSMForecaster, check_series
from bilinear_ssm.tasks import build_dataset


@pytest.fixture(scope="module")
def narma_small():
    ds = build_dataset("narma10", (24, 4, 3), (12, 12, 30), seed=0)
    return ds


def small_model(**kw):
    base = dict(variant="coupled", d_state=4, d_inner=4, context=12, state_channels=(1,),
                iterations=30, batch_size=8, lr_start=3e-3, random_state=0)
    base.update(kw)
    return SSMForecaster(**base)


def test_check_series_promotes_single_trajectory():
    X = check_series(np.zeros((5, 2)))
    assert X.shape == (1, 5, 2) and X.dtype == np.float64


@pytest.mark.parametrize("bad", [np.zeros(5), np.zeros((1, 2, 3, 4))])
def test_check_series_rejects_wrong_rank(bad):
    with pytest.raises(ValueError):
        check_series(bad)


def test_check_series_rejects_short_and_wrong_width():
    with pytest.raises(ValueError, match="at least"):
        check_series(np.zeros((2, 1, 2)))
    with pytest.raises(ValueError, match="channels"):
        check_series(np.zeros((2, 5, 3)), d_model=2)


def test_check_series_rejects_nan():
    X = np.zeros((1, 4, 2))
    X[0, 2, 1] = np.nan
    with pytest.raises(ValueError):
        check_series(X)


def test_params_round_trip_through_clone():
    est = small_model(variant="seq-bim", routing="xproj-only")
    params = est.get_params()
    assert params["variant"] == "seq-bim" and params["routing"] == "xproj-only"
    twin = clone(est)
    assert twin.get_params() == params
    twin.set_params(d_state=6)
    assert twin.d_state == 6 and est.d_state == 4


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        small_model().predict(np.zeros((1, 5, 2)))


def test_invalid_routing_rejected_at_fit(narma_small):
    with pytest.raises(ValueError):
        small_model(variant="gm", routing="bcoup-only").fit(narma_small.train.series)


def test_state_channel_out_of_range(narma_small):
    with pytest.raises(ValueError, match="state_channels"):
        small_model(state_channels=(2,)).fit(narma_small.train.series)


def test_fit_predict_shapes_and_score(narma_small):
    X = narma_small.train.series
    est = small_model().fit(X)
    assert est.n_features_in_ == 2 and not est.diverged_
    pred = est.predict(narma_small.test.series)
    assert pred.shape == narma_small.test.series.shape
    assert np.all(np.isfinite(pred))
    s = est.score(narma_small.test.series)
    assert s <= 0 and np.isfinite(s)


def test_training_improves_score(narma_small):
    cold = small_model(iterations=1).fit(narma_small.train.series)
    warm = small_model(iterations=60).fit(narma_small.train.series)
    assert warm.score(narma_small.test.series) > cold.score(narma_small.test.series)


def test_fit_is_deterministic(narma_small):
    X = narma_small.train.series
    a = small_model().fit(X).predict(X[:2])
    b = small_model().fit(X).predict(X[:2])
    np.testing.assert_array_equal(a, b)


def test_rollout_keeps_exogenous_channel(narma_small):
    est = small_model().fit(narma_small.train.series)
    R = narma_small.rollout.series
    pred = est.rollout(R, total=30)
    assert pred.shape == (len(R), 30, 2)
    # before the warmup ends every input is ground truth, so the rollout matches teacher forcing
    tf = est.predict(R[:, :29])
    np.testing.assert_allclose(pred[:, 1:12], tf[:, :11], rtol=1e-12, atol=1e-14)
    mse = est.rollout_mse(R, total=30)
    assert np.isfinite(mse) and mse >= 0
