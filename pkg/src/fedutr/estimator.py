"""scikit-learn style front end for the federated simulator."""
from __future__ import annotations

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .datasets import InteractionDataset, ItemCorpus
from .evaluation import batched_ranks
from .federation import TrainConfig, run_experiment
from .urm import HashedNgramEmbedder, RandomEmbedding


def check_interactions(X, n_users=None, m_items=None):
    """Integer ``(k, 2)`` array of ``(user, item)`` pairs with ids inside the given ranges."""
    if isinstance(X, InteractionDataset):
        X = X.pairs()
    arr = check_array(X, dtype=np.int64, ensure_2d=True)
    if arr.shape[1] != 2:
        raise ValueError(f"expected (user, item) pairs, got {arr.shape[1]} columns")
    if arr.min() < 0:
        raise ValueError("ids must be non-negative")
    if n_users is not None and arr[:, 0].max() >= n_users:
        raise ValueError(f"user id {arr[:, 0].max()} outside the {n_users} fitted users")
    if m_items is not None and arr[:, 1].max() >= m_items:
        raise ValueError(f"item id {arr[:, 1].max()} outside the {m_items} fitted items")
    return arr


def check_item_texts(texts, m_items):
    if texts is None:
        return None
    texts = list(texts.texts if isinstance(texts, ItemCorpus) else texts)
    if len(texts) != m_items:
        raise ValueError(f"got {len(texts)} item texts for {m_items} items")
    if not all(isinstance(t, str) for t in texts):
        raise TypeError("item texts must be strings")
    return ItemCorpus(texts)


class FedUTRRecommender(BaseEstimator):
    """Train a federation of per-user recommenders on ``(user, item)`` pairs.

    ``fit`` holds out each user's latest (or a random) interaction;
    ``score`` reports HR@``eval_k`` on those. Without item texts every
    item gets an empty text, which makes the hashed provider useless;
    pass ``provider="random"`` in that case.
    """

    def __init__(self, d=32, rounds=30, local_epochs=3, lr=0.01, item_lr_scale=200.0, lam=0.01,
                 neg_ratio=4, participation=1.0, ldp_scale=0.0, mode="fedutr", no_lam=False,
                 no_regular=False, provider="hashed_ngram", eval_k=10, seed=0):
        self.d = d
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.lr = lr
        self.item_lr_scale = item_lr_scale
        self.lam = lam
        self.neg_ratio = neg_ratio
        self.participation = participation
        self.ldp_scale = ldp_scale
        self.mode = mode
        self.no_lam = no_lam
        self.no_regular = no_regular
        self.provider = provider
        self.eval_k = eval_k
        self.seed = seed

    def _train_config(self):
        return TrainConfig(d=self.d, rounds=self.rounds, local_epochs=self.local_epochs, lr=self.lr,
                           item_lr_scale=self.item_lr_scale, lam=self.lam, neg_ratio=self.neg_ratio,
                           participation=self.participation, ldp_scale=self.ldp_scale, mode=self.mode,
                           no_lam=self.no_lam, no_regular=self.no_regular, eval_k=self.eval_k,
                           seed=self.seed, trace_users=0, eval_every=max(1, self.rounds))

    def _make_provider(self):
        if self.provider == "hashed_ngram":
            return HashedNgramEmbedder(self.d)
        if self.provider == "random":
            return RandomEmbedding(self.d, seed=self.seed)
        if hasattr(self.provider, "transform"):
            return self.provider
        raise ValueError(f"unknown provider {self.provider!r}")

    def fit(self, X, y=None, item_texts=None):
        if isinstance(X, InteractionDataset):
            dataset = X
        else:
            pairs = check_interactions(X)
            dataset = InteractionDataset.from_pairs(pairs)
        if np.any(dataset.counts() < 2):
            raise ValueError("every user needs at least 2 interactions for leave-one-out evaluation")
        corpus = check_item_texts(item_texts, dataset.m_items) or ItemCorpus([""] * dataset.m_items)
        cfg = self._train_config()
        self.result_ = run_experiment(cfg, dataset, self._make_provider(), corpus)
        self.n_users_ = dataset.n_users
        self.n_items_ = dataset.m_items
        self.metrics_ = self.result_.metrics
        return self

    def decision_function(self, X):
        """Raw logits for ``(user, item)`` pairs, each from that user's own model."""
        check_is_fitted(self, "result_")
        pairs = check_interactions(X, self.n_users_, self.n_items_)
        res = self.result_
        cfg = res.cfg
        out = np.empty(len(pairs))
        for u in np.unique(pairs[:, 0]):
            rows = np.flatnonzero(pairs[:, 0] == u)
            model = res.clients[u].model(res.server.items, res.server.cifm, cfg.effective_mode, cfg.uses_lam)
            out[rows] = model.scores(pairs[rows, 1])
        return out

    def predict_proba(self, X):
        return expit(self.decision_function(X))

    def predict(self, X):
        """1 where the predicted interaction probability exceeds one half."""
        return (self.decision_function(X) > 0).astype(np.int64)

    def recommend(self, user, k=10, exclude_seen=True):
        """Top-``k`` item ids for ``user``, best first; ties go to the lower id."""
        check_is_fitted(self, "result_")
        if not 0 <= user < self.n_users_:
            raise ValueError(f"user {user} outside the {self.n_users_} fitted users")
        res = self.result_
        cfg = res.cfg
        model = res.clients[user].model(res.server.items, res.server.cifm, cfg.effective_mode, cfg.uses_lam)
        scores = model.scores(np.arange(self.n_items_))
        if exclude_seen:
            scores[res.split.train[user]] = -np.inf
        order = np.lexsort((np.arange(self.n_items_), -scores))
        return order[:k]

    def score(self, X=None, y=None):
        """HR@``eval_k`` on the held-out interactions of the fitted data."""
        check_is_fitted(self, "result_")
        res = self.result_
        return batched_ranks(res.server, res.clients, res.split, res.cfg).hr
