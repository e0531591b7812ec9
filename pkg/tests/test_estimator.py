import numpy as np
import pytest
from sklearn.base import clone

from protoseg import ProtoConsistencySegmenter
from protoseg.estimator import check_images, check_masks


def toy_problem(n=6, size=16, n_unlabeled=2, seed=0):
    rng = np.random.default_rng(seed)
    X = np.empty((n, size, size), dtype=np.float32)
    y = np.empty((n, size, size), dtype=np.int64)
    for i in range(n):
        cy, cx = rng.integers(5, size - 5, size=2)
        yy, xx = np.mgrid[0:size, 0:size]
        fg = (yy - cy) ** 2 + (xx - cx) ** 2 <= 16
        y[i] = fg.astype(np.int64)
        X[i] = 0.2 + 0.6 * fg + rng.normal(0, 0.05, (size, size))
    y[:n_unlabeled] = -1
    return X, y


def tiny_estimator(**kw):
    defaults = dict(steps=4, warmup_steps=1, widths=(4, 8, 8), batch_size=4,
                    seed=0)
    defaults.update(kw)
    return ProtoConsistencySegmenter(**defaults)


class TestValidation:
    def test_check_images_shape(self):
        with pytest.raises(ValueError):
            check_images(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            check_images(np.zeros((0, 4, 4)))

    def test_check_images_nonfinite(self):
        X = np.zeros((1, 4, 4))
        X[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            check_images(X)

    def test_check_masks_range(self):
        y = np.full((2, 4, 4), 3)
        with pytest.raises(ValueError):
            check_masks(y, 2, (4, 4), num_classes=2)

    def test_check_masks_allows_unlabeled_rows(self):
        y = np.zeros((2, 4, 4), dtype=int)
        y[1] = -1
        out = check_masks(y, 2, (4, 4), num_classes=2)
        assert out.dtype == np.int64


class TestSklearnProtocol:
    def test_get_set_params_roundtrip(self):
        est = tiny_estimator(tau=0.1, use_pc=False)
        params = est.get_params()
        assert params["tau"] == 0.1
        assert params["use_pc"] is False
        est.set_params(tau=0.2)
        assert est.get_params()["tau"] == 0.2

    def test_clone(self):
        est = tiny_estimator(lambda_pc=0.5)
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        assert not hasattr(twin, "trainer_")

    def test_unfitted_predict_raises(self):
        X, _ = toy_problem()
        with pytest.raises(RuntimeError):
            tiny_estimator().predict(X)


class TestFitPredict:
    def test_shapes(self):
        X, y = toy_problem()
        est = tiny_estimator().fit(X, y)
        proba = est.predict_proba(X)
        assert proba.shape == (6, 2, 16, 16)
        assert np.abs(proba.sum(axis=1) - 1.0).max() < 1e-5
        pred = est.predict(X)
        assert pred.shape == (6, 16, 16)
        assert set(np.unique(pred)) <= {0, 1}

    def test_fit_returns_self(self):
        X, y = toy_problem()
        est = tiny_estimator()
        assert est.fit(X, y) is est

    def test_all_unlabeled_rejected(self):
        X, y = toy_problem()
        y[:] = -1
        with pytest.raises(ValueError):
            tiny_estimator().fit(X, y)

    def test_score_in_unit_interval(self):
        X, y = toy_problem()
        est = tiny_estimator().fit(X, y)
        s = est.score(X, y)
        assert 0.0 <= s <= 1.0

    def test_deterministic_under_seed(self):
        X, y = toy_problem()
        a = tiny_estimator(seed=3).fit(X, y).predict_proba(X)
        b = tiny_estimator(seed=3).fit(X, y).predict_proba(X)
        assert np.array_equal(a, b)
