import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lightformer import LightFormerClassifier, check_buffers, check_labels
from lightformer.errors import ContractError, ShapeError
from lightformer.rng import make_rng


def dataset(n=6, frames=2):
    rng = make_rng(0, "estimator")
    return rng.uniform(0, 1, (n, frames, 3, 32, 64)).astype(np.float32), rng.integers(0, 2, (n, 2))


def small(**kw):
    return LightFormerClassifier(embed_dim=8, num_heads=2, num_points=2, epochs=2,
                                 learning_rate=1e-3, **kw)


def test_params_round_trip():
    est = small(centres_per_class=3)
    params = est.get_params()
    assert params["centres_per_class"] == 3 and params["embed_dim"] == 8
    twin = clone(est)
    assert twin.get_params() == params
    twin.set_params(ablate_tsa=True)
    assert twin.ablate_tsa and not est.ablate_tsa


def test_fit_predict_transform_score(tmp_path):
    X, y = dataset()
    est = small().fit(X, y)
    assert len(est.history_) == 2
    pred = est.predict(X)
    assert pred.shape == (6, 2) and set(np.unique(pred)) <= {0, 1}
    proba = est.predict_proba(X)
    assert proba.shape == (6, 2, 2)
    np.testing.assert_array_equal(proba.argmax(-1), pred)
    assert est.transform(X).shape == (6, 8)
    assert est.score(X, y) == pytest.approx(np.mean(np.all(pred == y, axis=1)))
    assert set(est.report(X, y).statuses) == {"straight_pass", "straight_stop", "left_pass", "left_stop"}

    est.save(tmp_path / "e.lfck")
    loaded = LightFormerClassifier.from_checkpoint(tmp_path / "e.lfck")
    np.testing.assert_array_equal(loaded.predict(X), pred)
    assert loaded.get_params()["embed_dim"] == 8


def test_fit_is_deterministic():
    X, y = dataset()
    a, b = small(random_state=3).fit(X, y), small(random_state=3).fit(X, y)
    np.testing.assert_array_equal(a.transform(X), b.transform(X))


def test_not_fitted():
    with pytest.raises(NotFittedError):
        small().predict(dataset()[0])


def test_validation_helpers():
    X, y = dataset()
    assert check_buffers(X.astype(np.float64)).dtype == np.float32
    with pytest.raises(ShapeError):
        check_buffers(X[0])
    with pytest.raises(ContractError, match="N=3"):
        check_buffers(X, buffer_size=3)
    with pytest.raises(ShapeError):
        check_buffers(X, frame_shape=(3, 16, 16))
    bad = X.copy()
    bad[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(ShapeError):
        check_buffers(bad)
    with pytest.raises(ShapeError):
        check_labels(y[:, :1], len(y))
    with pytest.raises(ContractError):
        check_labels(y + 1, len(y))


def test_predict_checks_buffer_length():
    X, y = dataset()
    est = small().fit(X, y)
    with pytest.raises(ContractError, match="N=2"):
        est.predict(dataset(frames=3)[0])
