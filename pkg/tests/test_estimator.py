import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tasks import task_segments
from uncer.estimator import UncerClassifier

SMALL = dict(temporal_filters=4, pointwise_filters=8, temporal_kernel=16, epochs=15, lr=3e-3, batch_size=32,
             n_passes=5)


@pytest.fixture(scope="module")
def data():
    seg = task_segments(0, trials=32)
    names = np.array(["left", "right", "feet", "tongue"])
    return seg.segments, names[seg.labels]


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return UncerClassifier(**SMALL).fit(X, y)


def test_get_set_params_and_clone():
    est = UncerClassifier(**SMALL)
    params = est.get_params()
    assert params["epochs"] == 15 and params["lam"] == 15.0 and params["augment"] is False
    c = clone(est)
    assert c.get_params() == params and c is not est
    est.set_params(epochs=2)
    assert est.epochs == 2


def test_fit_predict(fitted, data):
    X, y = data
    assert set(fitted.classes_) == {"feet", "left", "right", "tongue"}
    assert fitted.n_features_in_ == 8 * 64
    pred = fitted.predict(X)
    assert pred.dtype == y.dtype and np.mean(pred == y) >= 0.9
    assert fitted.score(X, y) == pytest.approx(np.mean(pred == y))
    proba = fitted.predict_proba(X)
    assert proba.shape == (len(X), 4) and np.allclose(proba.sum(axis=1), 1)
    assert np.array_equal(fitted.classes_[proba.argmax(axis=1)], pred)


def test_deterministic(data):
    X, y = data
    a = UncerClassifier(**{**SMALL, "epochs": 2}).fit(X, y).predict_proba(X)
    b = UncerClassifier(**{**SMALL, "epochs": 2}).fit(X, y).predict_proba(X)
    assert np.array_equal(a, b)


def test_uncertainty_report(fitted, data):
    X, y = data
    rep = fitted.predict_uncertainty(X[:10], y[:10])
    assert rep.total_variance.shape == (10, 4) and np.isfinite(rep.nll)
    with pytest.raises(ValueError):
        fitted.predict_uncertainty(X[:2], ["left", "up"])


def test_augmented_fit(data):
    X, y = data
    est = UncerClassifier(**{**SMALL, "epochs": 1, "augment": True}).fit(X[:32], y[:32])
    assert hasattr(est, "controller_") and est.predict(X[:4]).shape == (4,)


def test_validation(fitted, data):
    X, y = data
    with pytest.raises(NotFittedError):
        UncerClassifier().predict(X)
    with pytest.raises(ValueError):
        fitted.predict(X[:, :4])
    with pytest.raises(ValueError):
        fitted.predict(X[0])
    bad = X[:3].copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        fitted.predict(bad)
    with pytest.raises(ValueError):
        UncerClassifier(**SMALL).fit(X, y[:-1])
    with pytest.raises(ValueError):
        UncerClassifier(**SMALL).fit(X, np.zeros(len(X)))
    with pytest.raises(ValueError):
        UncerClassifier(**SMALL).fit(X, np.linspace(0, 1, len(X)))  # continuous targets


def test_accepts_4d_input(fitted, data):
    X, _ = data
    assert np.array_equal(fitted.predict(X[:5, :, None, :]), fitted.predict(X[:5]))
