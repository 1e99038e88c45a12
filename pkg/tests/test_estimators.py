"""Array validation helpers and the fit/predict/score estimator facade."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dgseg.estimators import SegmentationEstimator
from dgseg.synthdata import SceneSpec, build_benchmark
from dgseg.validation import check_domain_labels, check_image_array, check_mask_array


SMALL_SCENE = SceneSpec(height=16, width=16, shape_size=(4, 8))


def _arrays(n_domains=3, per=6, seed=0):
    data = build_benchmark(n_domains, per, spec=SMALL_SCENE, seed=seed)
    X = np.concatenate([d.images for d in data])
    y = np.concatenate([d.masks for d in data]).astype(np.int64)
    domains = np.concatenate([np.full(len(d), d.domain_id) for d in data])
    return X, y, domains


def test_check_image_array():
    x = check_image_array(np.zeros((2, 3, 4, 4)))
    assert x.dtype == np.float32
    single = check_image_array(np.zeros((3, 4, 4)))
    assert single.shape == (1, 3, 4, 4)
    with pytest.raises(ValueError):
        check_image_array(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        check_image_array(np.zeros((0, 3, 4, 4)))
    with pytest.raises(ValueError):
        check_image_array(np.full((1, 3, 4, 4), np.nan))
    with pytest.raises(ValueError):
        check_image_array(np.zeros((1, 4, 4, 4)), channels=3)


def test_check_mask_array():
    X = np.zeros((2, 3, 4, 4), np.float32)
    y = check_mask_array(np.zeros((2, 4, 4)), X)
    assert y.dtype == np.int64
    lifted = check_mask_array(np.zeros((4, 4)), X[:1])
    assert lifted.shape == (1, 4, 4)
    with pytest.raises(ValueError):
        check_mask_array(np.zeros((2, 5, 5)), X)
    with pytest.raises(ValueError):
        check_mask_array(np.full((2, 4, 4), 0.5), X)
    with pytest.raises(ValueError):
        check_mask_array(np.full((2, 4, 4), -1), X)
    with pytest.raises(ValueError):
        check_mask_array(np.full((2, 4, 4), 7), X, num_classes=4)
    ignored = check_mask_array(np.full((2, 4, 4), 255), X, num_classes=4)
    assert (ignored == 255).all()


def test_check_domain_labels():
    np.testing.assert_array_equal(check_domain_labels(None, 3), [0, 0, 0])
    np.testing.assert_array_equal(check_domain_labels([2, 0, 2], 3), [2, 0, 2])
    with pytest.raises(ValueError):
        check_domain_labels([0, 1], 3)


def test_get_set_params_round_trip():
    est = SegmentationEstimator(epochs=1, m=2)
    params = est.get_params()
    assert params["m"] == 2 and params["method"] == "mldg"
    cloned = clone(est)
    assert cloned.get_params() == params


def test_unfitted_predict_raises():
    est = SegmentationEstimator()
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 3, 8, 8), np.float32))
    with pytest.raises(NotFittedError):
        est.score(np.zeros((1, 3, 8, 8), np.float32), np.zeros((1, 8, 8)))


def test_fit_validation():
    X, y, domains = _arrays()
    with pytest.raises(ValueError):
        SegmentationEstimator(method="boost").fit(X, y, domains)
    with pytest.raises(ValueError):
        SegmentationEstimator(test_method="magic").fit(X, y, domains)
    with pytest.raises(ValueError):
        SegmentationEstimator().fit(X, np.full_like(y, 255), domains)


def test_fit_predict_score_shapes():
    X, y, domains = _arrays()
    est = SegmentationEstimator(
        method="mldg", test_method="tn", epochs=1, batch_size=4, widths=(4, 6), m=2, seed=0
    )
    est.fit(X, y, domains)
    assert est.num_classes_ == 4
    assert est.model_params_.config.widths == (4, 6)
    preds = est.predict(X[:3])
    assert preds.shape == (3, 16, 16) and preds.dtype == np.int64
    assert set(np.unique(preds)) <= {0, 1, 2, 3}
    s = est.score(X[:6], y[:6])
    assert 0.0 <= s <= 1.0


def test_fit_rebalances_split_to_domain_count():
    # three training domains cannot satisfy 2:2; fit falls back to 1:2
    X, y, domains = _arrays(n_domains=3)
    est = SegmentationEstimator(epochs=1, batch_size=4, widths=(4,), split="2:2")
    est.fit(X, y, domains)
    assert hasattr(est, "model_params_")


def test_fit_single_domain_mldg_raises_agg_works():
    X, y, _ = _arrays(n_domains=1)
    with pytest.raises(ValueError):
        SegmentationEstimator(method="mldg", epochs=1, widths=(4,)).fit(X, y)
    est = SegmentationEstimator(method="agg", test_method="bn", epochs=1, widths=(4,))
    est.fit(X, y)
    assert est.predict(X[:2]).shape == (2, 16, 16)


def test_fit_seed_determinism():
    X, y, domains = _arrays(n_domains=2, per=4)
    kw = dict(method="mldg", epochs=1, batch_size=4, widths=(4,), seed=3)
    a = SegmentationEstimator(**kw).fit(X, y, domains)
    b = SegmentationEstimator(**kw).fit(X, y, domains)
    for name in a.model_params_.tensors:
        np.testing.assert_array_equal(
            a.model_params_.tensors[name].data, b.model_params_.tensors[name].data
        )


def test_predict_channel_mismatch_raises():
    X, y, domains = _arrays(n_domains=2, per=4)
    est = SegmentationEstimator(method="agg", epochs=1, widths=(4,))
    est.fit(X, y, domains)
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 5, 16, 16), np.float32))
