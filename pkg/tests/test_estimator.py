import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from duralign import DurationAlignedSynthesizer
from duralign.aligner import inferred_frame_count
from duralign.checks import MICRO_CONFIG
from duralign.data import SyntheticCorpusSpec, generate_corpus


@pytest.fixture(scope="module")
def data():
    corpus = generate_corpus(SyntheticCorpusSpec(vocab_size=5, feature_dim=4, utterances=10, max_tokens=5))
    return [u.token_ids for u in corpus], [u.frames for u in corpus]


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return DurationAlignedSynthesizer(**MICRO_CONFIG, steps=6).fit(X, y)


def test_get_params_and_clone():
    est = DurationAlignedSynthesizer(model_dim=12, steps=3)
    params = est.get_params()
    assert params["model_dim"] == 12 and params["steps"] == 3
    assert clone(est).get_params() == params
    est.set_params(gamma=0.2)
    assert est.gamma == 0.2


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        DurationAlignedSynthesizer().predict([[1, 2]])


def test_fit_sets_attributes(fitted):
    assert fitted.n_steps_ == 6
    assert len(fitted.loss_history_) == 6
    assert fitted.config_.model_dim == MICRO_CONFIG["model_dim"]


def test_predict_shapes(fitted):
    X = [[0, 1, 2], [4]]
    preds = fitted.predict(X)
    durs = fitted.predict_durations(X)
    for p, d, ids in zip(preds, durs, X):
        assert p.shape == (inferred_frame_count(d), 4)
        assert d.shape == (len(ids),)
    assert fitted.frame_count([0, 1, 2]) == preds[0].shape[0]


def test_duration_scale(fitted):
    d = fitted.predict_durations([[0, 1, 2, 3]])[0]
    out = fitted.predict([[0, 1, 2, 3]], duration_scale=1.25)[0]
    assert out.shape[0] == max(1, int(np.floor(1.25 * d.sum() + 0.5)))


def test_transform_returns_row_stochastic_attention(fitted):
    (W,) = fitted.transform([[2, 3, 1]])
    assert W.shape[1] == 3
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-5)


def test_score_is_negative_sdtw(fitted, data):
    X, y = data
    assert np.isfinite(fitted.score(X[:3], y[:3]))


def test_fit_is_deterministic(data):
    X, y = data
    a = DurationAlignedSynthesizer(**MICRO_CONFIG, steps=3).fit(X, y)
    b = DurationAlignedSynthesizer(**MICRO_CONFIG, steps=3).fit(X, y)
    assert a.loss_history_ == b.loss_history_


def test_save_and_load(fitted, tmp_path):
    fitted.save(tmp_path / "est.ckpt")
    again = DurationAlignedSynthesizer.load(tmp_path / "est.ckpt")
    assert again.n_steps_ == fitted.n_steps_
    np.testing.assert_array_equal(again.predict([[1, 2]])[0], fitted.predict([[1, 2]])[0])


@pytest.mark.parametrize("X,y", [
    ([[0, 9]], [np.zeros((3, 4))]),
    ([[0, 1]], [np.zeros((3, 5))]),
    ([[0, 1], [2]], [np.zeros((3, 4))]),
    ([[]], [np.zeros((3, 4))]),
    ([[0, 1]], [np.full((3, 4), np.nan)]),
])
def test_input_validation(X, y):
    with pytest.raises(ValueError):
        DurationAlignedSynthesizer(**MICRO_CONFIG, steps=1).fit(X, y)
