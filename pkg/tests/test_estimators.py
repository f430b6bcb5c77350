import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gesturestream.data import SyntheticConfig, gen_synthetic
from gesturestream.estimators import GestureClassifier, OnlineGestureRecognizer, SkeletonNormalizer
from gesturestream.exceptions import LabelError, ShapeError
from gesturestream.skeleton import NO_GESTURE, normalize_frames

SMALL = dict(window=10, sgcn_channels=(8, 16), d_model=16, num_layers=1, heads=2, d_ff=16,
             max_epochs=2, batch_size=16)


@pytest.fixture(scope="module")
def streams():
    cfg = SyntheticConfig(classes=("CircleCW", "SwipeLeft"), num_train=3, num_test=1, seed=5)
    _, seqs, _ = gen_synthetic(cfg)
    return seqs[:3], seqs[3:]


@pytest.fixture(scope="module")
def windows():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 10, 20, 3))
    y = np.array(["A", "B", NO_GESTURE] * 4)
    return x, y


class TestNormalizer:
    def test_matches_function(self, rng):
        x = rng.normal(size=(3, 5, 20, 3))
        assert np.allclose(SkeletonNormalizer().fit_transform(x), normalize_frames(x))

    def test_not_fitted(self, rng):
        with pytest.raises(NotFittedError):
            SkeletonNormalizer().transform(rng.normal(size=(1, 5, 20, 3)))

    def test_shape_check(self):
        with pytest.raises(ShapeError):
            SkeletonNormalizer().fit(np.ones((2, 5, 19, 3)))


class TestGestureClassifier:
    def test_params_and_clone(self):
        clf = GestureClassifier(**SMALL)
        params = clf.get_params()
        assert params["d_model"] == 16 and params["partition"] == "distance:2"
        twin = clone(clf)
        assert twin.get_params() == params and twin is not clf
        clf.set_params(heads=4)
        assert clf.heads == 4

    def test_fit_predict(self, windows):
        x, y = windows
        clf = GestureClassifier(**SMALL).fit(x, y)
        assert list(clf.classes_) == ["A", "B", NO_GESTURE]
        assert clf.predict_proba(x).shape == (12, 3)
        assert set(clf.predict(x)) <= set(clf.classes_)
        assert 0.0 <= clf.score(x, y) <= 1.0
        assert len(clf.history_) == 2

    def test_save_load(self, windows, tmp_path):
        x, y = windows
        clf = GestureClassifier(**SMALL).fit(x, y)
        clf.save(tmp_path / "c.npz")
        back = GestureClassifier.load(tmp_path / "c.npz")
        assert np.array_equal(back.predict_proba(x), clf.predict_proba(x))
        assert back.get_params()["d_model"] == 16

    def test_label_errors(self, windows):
        x, y = windows
        with pytest.raises(LabelError):
            GestureClassifier(**SMALL).fit(x, np.arange(12) % 3)
        with pytest.raises(LabelError):
            GestureClassifier(classes=["A"], **SMALL).fit(x, y)
        with pytest.raises(LabelError, match="5 labels for 12"):
            GestureClassifier(**SMALL).fit(x, y[:5])

    def test_not_fitted(self, windows):
        with pytest.raises(NotFittedError):
            GestureClassifier().predict(windows[0])


class TestOnlineRecognizer:
    def test_fit_predict_evaluate(self, streams):
        train, test = streams
        rec = OnlineGestureRecognizer(GestureClassifier(**SMALL), window=10, stride=5).fit(train, train[:1])
        assert set(rec.thresholds_.alpha) <= {"CircleCW", "SwipeLeft"}
        labels = rec.predict(test[0])
        assert len(labels) == len(test[0])
        assert all(e.length >= 5 for e in rec.predict_events(test[0]))
        report = rec.evaluate(test)
        assert report.counts["tp"] + report.counts["fn"] == len(test[0].annotations)
        assert 0.0 <= rec.score(test) <= 1.0

    def test_reuses_fitted_classifier(self, streams, windows):
        x, y = windows
        with pytest.raises(LabelError):
            OnlineGestureRecognizer(GestureClassifier(**SMALL).fit(x, y), window=10).fit(streams[0])
        y = np.array(["CircleCW", "SwipeLeft", NO_GESTURE] * 4)
        clf = GestureClassifier(**SMALL).fit(x, y)
        rec = OnlineGestureRecognizer(clf, window=10, stride=5, engine="continual").fit(streams[0])
        assert rec.classifier_ is clf
        assert len(rec.predict(streams[1][0].frames)) == len(streams[1][0])

    def test_unfitted_classifier_is_not_mutated(self, streams):
        clf = GestureClassifier(**SMALL)
        OnlineGestureRecognizer(clf, window=10).fit(streams[0])
        assert not hasattr(clf, "model_")
