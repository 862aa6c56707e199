import numpy as np
import pytest
from sklearn.base import clone

from constraintnet.constraints import IntervalSampler, Polytope
from constraintnet.estimator import ConstraintNetRegressor


def data(rng, n=200):
    X = rng.normal(size=(n, 4))
    y = X @ np.array([1.0, -0.5, 0.2, 0.0])
    return X, y


def make(**kw):
    return ConstraintNetRegressor(Polytope(2, 1), IntervalSampler(0.5, 2.0), hidden_layer_sizes=(16,),
                                  epochs=5, learning_rate=5e-3, **kw)


def test_fit_predict_respects_constraint(rng):
    X, y = data(rng)
    est = make().fit(X, y)
    s = np.stack([np.array([v - 0.3, v + 0.3]) for v in y])
    pred = est.predict(X, s)
    assert pred.shape == (200, 1)
    assert np.all(pred[:, 0] >= s[:, 0] - 1e-12) and np.all(pred[:, 0] <= s[:, 1] + 1e-12)
    assert est.score(X, y, s) <= 0
    assert np.isfinite(est.score(X, y))


def test_get_params_and_clone():
    est = make(random_state=3)
    params = est.get_params()
    assert params["random_state"] == 3 and params["hidden_layer_sizes"] == (16,)
    twin = clone(est)
    assert twin.get_params()["epochs"] == 5
    est.set_params(epochs=1)
    assert est.epochs == 1


def test_deterministic_fit(rng):
    X, y = data(rng, 50)
    s = np.array([[-10.0, 10.0]])
    a = make(random_state=1).fit(X, y).predict(X, s)
    b = make(random_state=1).fit(X, y).predict(X, s)
    assert np.array_equal(a, b)


def test_validation_errors(rng):
    X, y = data(rng, 10)
    with pytest.raises(ValueError):
        ConstraintNetRegressor().fit(X, y)
    with pytest.raises(ValueError):
        make().fit(X, np.zeros((10, 3)))
    with pytest.raises(Exception):
        make().predict(X, np.zeros((10, 2)))  # not fitted
    with pytest.raises(ValueError):
        make().fit(np.full((10, 4), np.nan), y)
