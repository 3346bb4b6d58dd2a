import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from bsvit.data import synth_dataset
from bsvit.estimator import BSViTClassifier, SpikeFeatureExtractor, check_images


@pytest.fixture(scope="module")
def fitted():
    d = synth_dataset(2, 120, (1, 16, 16), seed=0)
    labels = np.array(["bars", "blobs"])[d.labels]
    clf = BSViTClassifier(dim=16, epochs=30, batch_size=30, target_acc=0.95).fit(d.images, labels)
    return clf, d.images, labels


def test_get_params_and_clone():
    clf = BSViTClassifier(dim=16, n_max=3)
    params = clf.get_params()
    assert params["dim"] == 16 and params["n_max"] == 3
    assert clone(clf).get_params() == params


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        BSViTClassifier().predict(np.zeros((1, 1, 16, 16)))


def test_fit_predict_score(fitted):
    clf, X, y = fitted
    assert set(clf.classes_) == {"bars", "blobs"}
    assert clf.score(X, y) >= 0.9
    proba = clf.predict_proba(X[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)


def test_spike_engine_agrees(fitted):
    clf, X, y = fitted
    spike = clone(clf).set_params(engine="spike")
    spike.model_, spike.classes_, spike.n_features_in_ = clf.model_, clf.classes_, clf.n_features_in_
    assert (spike.predict(X[:20]) == clf.predict(X[:20])).mean() >= 0.9
    assert len(spike.ledgers_) == 20


def test_flat_input_and_feature_check(fitted):
    clf, X, y = fitted
    flat = BSViTClassifier(image_shape=(1, 16, 16))
    flat.model_, flat.classes_, flat.n_features_in_ = clf.model_, clf.classes_, clf.n_features_in_
    assert np.array_equal(flat.predict(X.reshape(len(X), -1)[:4]), clf.predict(X[:4]))
    with pytest.raises(ValueError):
        clf.predict(np.zeros((2, 1, 8, 8)))


def test_transform(fitted):
    clf, X, _ = fitted
    feats = SpikeFeatureExtractor(clf).fit(X).transform(X[:6])
    assert feats.shape == (6, 16) and (feats >= 0).all()


def test_check_images():
    assert check_images(np.zeros((2, 8, 8))).shape == (2, 1, 8, 8)
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 64)))
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 10)), image_shape=(1, 3, 3))
    with pytest.raises(ValueError):
        check_images(np.zeros(5))
