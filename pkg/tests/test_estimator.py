import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fedutr.estimator import FedUTRRecommender


@pytest.fixture(scope="module")
def fitted(small_synthetic):
    ds, corpus, _ = small_synthetic
    return FedUTRRecommender(d=8, rounds=3, seed=1).fit(ds.pairs(), item_texts=corpus.texts), ds


def test_params_and_clone():
    est = FedUTRRecommender(d=8, lam=0.1)
    assert est.get_params()["lam"] == 0.1
    twin = clone(est)
    assert twin.get_params() == est.get_params() and not hasattr(twin, "result_")


def test_unfitted_use_raises():
    with pytest.raises(NotFittedError):
        FedUTRRecommender().recommend(0)


def test_fit_predict_recommend_score(fitted):
    est, ds = fitted
    pairs = ds.pairs()[:20]
    proba = est.predict_proba(pairs)
    assert proba.shape == (20,) and np.all((proba > 0) & (proba < 1))
    assert np.array_equal(est.predict(pairs), (proba > 0.5).astype(int))
    top = est.recommend(0, k=5)
    assert top.size == 5 and not set(top.tolist()) & set(est.result_.split.train[0].tolist())
    assert 0 <= est.score() <= 1
    assert est.score() == est.metrics_[-1]["hr10"]


def test_recommend_order_matches_scores(fitted):
    est, ds = fitted
    top = est.recommend(3, k=ds.m_items, exclude_seen=False)
    s = est.decision_function(np.column_stack([np.full(top.size, 3), top]))
    assert np.all(np.diff(s) <= 0)


def test_same_seed_same_model(small_synthetic):
    ds, corpus, _ = small_synthetic
    a = FedUTRRecommender(d=8, rounds=2, seed=4).fit(ds.pairs(), item_texts=corpus)
    b = FedUTRRecommender(d=8, rounds=2, seed=4).fit(ds, item_texts=corpus)
    pairs = ds.pairs()
    assert np.array_equal(a.decision_function(pairs), b.decision_function(pairs))


@pytest.mark.parametrize("X, match", [
    (np.array([[0, 1, 2]]), "columns"),
    (np.array([[-1, 0], [-1, 1]]), "non-negative"),
    (np.array([[0, 1]]), "at least 2"),
])
def test_fit_input_validation(X, match):
    with pytest.raises(ValueError, match=match):
        FedUTRRecommender(rounds=1).fit(X)


def test_query_validation(fitted):
    est, ds = fitted
    with pytest.raises(ValueError, match="outside"):
        est.decision_function([[ds.n_users, 0]])
    with pytest.raises(ValueError, match="outside"):
        est.recommend(-1)
    with pytest.raises(ValueError, match="item texts"):
        FedUTRRecommender(rounds=1).fit(ds.pairs(), item_texts=["a"])
    with pytest.raises(ValueError, match="unknown provider"):
        FedUTRRecommender(rounds=1, provider="bert").fit(ds.pairs())
