import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import assert_close
from stochbranch import StochasticBranchClassifier
from stochbranch.layers import Mode


def blobs(n=300, seed=0):
    r = np.random.default_rng(seed)
    y = np.array(["a", "b", "c"])[np.arange(n) % 3]
    centers = {"a": [-3, 0], "b": [3, 0], "c": [0, 3]}
    x = np.array([centers[c] for c in y]) + r.normal(0, 0.5, (n, 2))
    return x, y


def small(**kw):
    return StochasticBranchClassifier(**{"hidden_layer_sizes": (16,), "n_branches": 3, "max_epochs": 15,
                                         "batch_size": 32, **kw})


def test_fit_predict_string_labels():
    x, y = blobs()
    clf = small(regularizers=("sb", "bn")).fit(x, y)
    assert set(clf.classes_) == {"a", "b", "c"}
    assert clf.score(x, y) > 0.95
    proba = clf.predict_proba(x[:5])
    assert proba.shape == (5, 3) and np.allclose(proba.sum(1), 1.0)
    assert len(clf.history_) == 15


def test_params_and_clone():
    clf = small(keep_prob=0.7)
    p = clf.get_params()
    assert p["keep_prob"] == 0.7 and p["n_branches"] == 3
    c = clone(clf).set_params(n_branches=5)
    assert c.n_branches == 5 and clf.n_branches == 3


def test_deterministic():
    x, y = blobs()
    a = small(random_state=4).fit(x, y).predict_proba(x)
    b = small(random_state=4).fit(x, y).predict_proba(x)
    assert a.tobytes() == b.tobytes()


def test_validation_errors():
    x, y = blobs()
    with pytest.raises(NotFittedError):
        small().predict(x)
    with pytest.raises(ValueError):
        small().fit(x, y[:-1])
    with pytest.raises(ValueError):
        small().fit(x, np.zeros(len(x)))
    clf = small(max_epochs=1).fit(x, y)
    with pytest.raises(ValueError):
        clf.predict(np.zeros((2, 3)))


def test_collapsed_matches():
    x, y = blobs()
    clf = small(max_epochs=2).fit(x, y)
    plain = clf.collapsed()
    assert not plain.sb_layers()
    assert_close(plain.forward(x, Mode.EVAL), clf.decision_function(x), 1e-10)
