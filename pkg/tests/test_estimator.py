import numpy as np
import pytest
from sklearn.base import clone

from csdkit.estimator import CsdEstimator
from csdkit.synth import make_segments
from csdkit.types import ValidationError


@pytest.fixture(scope="module")
def segments():
    return make_segments(12, seed=0, image_size=16, mic_count=1, max_streams=2)


def _small_estimator(**kw):
    defaults = dict(embed_dim=32, num_blocks=2, num_heads=4, epochs=1,
                    batch_size=12, seed=0)
    defaults.update(kw)
    return CsdEstimator(**defaults)


def test_get_set_params_and_clone():
    est = _small_estimator(fusion="late")
    params = est.get_params()
    assert params["embed_dim"] == 32
    assert params["fusion"] == "late"
    est.set_params(epochs=2)
    assert est.epochs == 2
    cloned = clone(est)
    assert cloned.get_params() == est.get_params()


def test_fit_predict_shapes(segments):
    est = _small_estimator().fit(segments)
    proba = est.predict_proba(segments)
    assert proba.shape == (12, 7, 3)
    np.testing.assert_allclose(proba.sum(axis=-1), 1.0, atol=1e-6)
    preds = est.predict(segments)
    assert preds.shape == (12, 7)
    assert set(np.unique(preds)) <= {0, 1, 2}


def test_score_range(segments):
    est = _small_estimator().fit(segments)
    score = est.score(segments)
    assert 0.0 <= score <= 1.0


def test_unfitted_is_loud(segments):
    est = _small_estimator()
    with pytest.raises(ValidationError, match="not fitted"):
        est.predict(segments)


def test_fit_empty_is_loud():
    with pytest.raises(ValidationError):
        _small_estimator().fit([])


def test_no_cls_variant_fits(segments):
    est = _small_estimator(use_cls=False).fit(segments)
    assert est.predict(segments).shape == (12, 7)


def test_history_recorded(segments):
    est = _small_estimator(epochs=2).fit(segments)
    assert len(est.history_) == 2
    assert "mean_loss" in est.history_[0]
