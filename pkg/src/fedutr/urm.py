"""Universal item representations: providers that turn item text into E.

No language model ships with the package. ``PrecomputedEmbedding`` ingests
vectors produced elsewhere; ``HashedNgramEmbedder`` is the deterministic
offline stand-in; ``RandomEmbedding`` gives ID-style initialisation.
All three are scikit-learn transformers over a sequence of item texts.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.random_projection import GaussianRandomProjection

from .numeric import NonFiniteError, make_rng

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
HASH_KEY = 0x6A09E667F3BCC908  # folded into the offset basis; fixed forever
_MASK64 = 0xFFFFFFFFFFFFFFFF


class EmbeddingFormatError(ValueError):
    pass


def fnv1a64(data: bytes, key: int = HASH_KEY) -> int:
    h = FNV_OFFSET ^ key
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def l2_normalize_rows(E):
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    return np.divide(E, norms, out=np.zeros_like(E), where=norms > 0)


def _texts(X):
    if hasattr(X, "texts"):
        X = X.texts
    if isinstance(X, str):
        raise TypeError("expected a sequence of item texts, got a single string")
    return list(X)


class HashedNgramEmbedder(TransformerMixin, BaseEstimator):
    """Signed feature hashing of word unigrams and character n-grams.

    Text is lowercased and split on whitespace. Each word contributes the
    feature ``w:<word>`` and, for every n in ``char_ngrams``, the features
    ``c:<gram>`` over ``<word>`` with boundary markers. A feature's FNV-1a
    hash picks coordinate ``h % n_components`` and its sign from bit 63.
    """

    def __init__(self, n_components=32, char_ngrams=(3,), word_unigrams=True, normalize=True):
        self.n_components = n_components
        self.char_ngrams = char_ngrams
        self.word_unigrams = word_unigrams
        self.normalize = normalize

    def fit(self, X=None, y=None):
        if self.n_components <= 0:
            raise ValueError("n_components must be positive")
        self._cache = {}
        return self

    def _features(self, word):
        feats = []
        if self.word_unigrams:
            feats.append("w:" + word)
        padded = f"<{word}>"
        for n in self.char_ngrams:
            feats.extend("c:" + padded[k:k + n] for k in range(len(padded) - n + 1))
        return feats

    def _word_vector(self, word):
        hit = self._cache.get(word)
        if hit is None:
            hit = []
            for feat in self._features(word):
                h = fnv1a64(feat.encode("utf-8"))
                hit.append((h % self.n_components, -1.0 if h >> 63 else 1.0))
            self._cache[word] = hit
        return hit

    def transform(self, X):
        if not hasattr(self, "_cache"):
            self.fit()
        texts = _texts(X)
        E = np.zeros((len(texts), self.n_components))
        for i, text in enumerate(texts):
            row = E[i]
            for word in text.lower().split():
                for j, sign in self._word_vector(word):
                    row[j] += sign
        return l2_normalize_rows(E) if self.normalize else E

    def embed(self, corpus):
        return self.fit().transform(corpus)


class RandomEmbedding(TransformerMixin, BaseEstimator):
    """I.i.d. Gaussian rows; the text is ignored apart from its count."""

    def __init__(self, n_components=32, std=0.1, seed=0):
        self.n_components = n_components
        self.std = std
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return random_init(len(_texts(X)), self.n_components, make_rng(self.seed, 0x5EED))

    def embed(self, corpus):
        return self.transform(corpus)


def random_init(m, d, rng, std=0.1):
    return rng.normal(0.0, std, size=(m, d))


class PrecomputedEmbedding(TransformerMixin, BaseEstimator):
    """Vectors read from a file written by an external encoder."""

    def __init__(self, path=None, n_components=32, normalize=False):
        self.path = path
        self.n_components = n_components
        self.normalize = normalize

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return load_precomputed(self.path, len(_texts(X)), self.n_components, self.normalize)

    def embed(self, corpus):
        return self.transform(corpus)


# ----------------------------------------------------------------- file i/o

def load_precomputed(path, expected_m, expected_d, normalize=False):
    """Load an ``m x d`` matrix from a TSV file or a float32 blob + JSON sidecar.

    TSV: a ``#dim=<d> count=<m>`` header, then ``item_id<TAB>v1 v2 ...``.
    Blob: ``<path>`` holds little-endian float32 rows; ``<path>.json``
    carries ``{"dim", "count", "order": "by_item_id"}``.
    """
    path = Path(path)
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        E = _load_blob(path, sidecar)
    else:
        E = _load_tsv(path)
    if E.shape[1] != expected_d:
        raise EmbeddingFormatError(f"{path}: embedding dim mismatch: expected {expected_d}, found {E.shape[1]}")
    if E.shape[0] != expected_m:
        raise EmbeddingFormatError(f"{path}: row count mismatch: expected {expected_m}, found {E.shape[0]}")
    if not np.all(np.isfinite(E)):
        raise NonFiniteError(f"{path}: non-finite values in embedding file")
    return l2_normalize_rows(E) if normalize else E


def _header_fields(path, header):
    try:
        fields = dict(tok.split("=", 1) for tok in header.lstrip("#").split())
        int(fields["dim"]), int(fields["count"])
    except (ValueError, KeyError):
        raise EmbeddingFormatError(f"{path}: bad header {header!r}") from None
    return fields


def _load_tsv(path):
    with open(path, encoding="utf-8") as fh:
        fields = _header_fields(path, fh.readline().strip())
        dim, count = int(fields["dim"]), int(fields["count"])
        E = np.full((count, dim), np.nan)
        seen = np.zeros(count, dtype=bool)
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            try:
                key, values = line.rstrip("\n").split("\t")
                i = int(key)
                row = np.array(values.split(), dtype=np.float64)
            except ValueError:
                raise EmbeddingFormatError(f"{path}:{lineno}: malformed row") from None
            if not 0 <= i < count:
                raise EmbeddingFormatError(f"{path}:{lineno}: item id {i} outside [0, {count})")
            if row.size != dim:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: embedding dim mismatch: expected {dim}, found {row.size}")
            E[i] = row
            seen[i] = True
    if not seen.all():
        raise EmbeddingFormatError(f"{path}: {int((~seen).sum())} item rows missing")
    return E


def _load_blob(path, sidecar):
    meta = json.loads(sidecar.read_text())
    if meta.get("order", "by_item_id") != "by_item_id":
        raise EmbeddingFormatError(f"{sidecar}: unsupported order {meta['order']!r}")
    dim, count = int(meta["dim"]), int(meta["count"])
    flat = np.fromfile(path, dtype="<f4")
    if flat.size != dim * count:
        raise EmbeddingFormatError(f"{path}: expected {dim * count} float32 values, found {flat.size}")
    return flat.reshape(count, dim).astype(np.float64)


def save_precomputed(path, E, fmt="tsv", projected=False):
    """Inverse of ``load_precomputed``; ``projected`` marks output of ``project_embeddings``."""
    E = np.asarray(E, dtype=np.float64)
    path = Path(path)
    if fmt == "tsv":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"#dim={E.shape[1]} count={E.shape[0]}" + (" projected=1" if projected else "") + "\n")
            for i, row in enumerate(E):
                fh.write(f"{i}\t" + " ".join(repr(float(v)) for v in row) + "\n")
    elif fmt == "blob":
        E.astype("<f4").tofile(path)
        meta = {"dim": E.shape[1], "count": E.shape[0], "order": "by_item_id", "projected": bool(projected)}
        Path(str(path) + ".json").write_text(json.dumps(meta))
    else:
        raise ValueError(f"unknown format {fmt!r}")


def precomputed_metadata(path):
    """Header fields of an embedding file without reading the rows."""
    path = Path(path)
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        return {"format": "blob", "dim": int(meta["dim"]), "count": int(meta["count"]),
                "projected": bool(meta.get("projected", False))}
    with open(path, encoding="utf-8") as fh:
        fields = _header_fields(path, fh.readline().strip())
    return {"format": "tsv", "dim": int(fields["dim"]), "count": int(fields["count"]),
            "projected": fields.get("projected", "0") == "1"}


def project_embeddings(E, d, seed=0):
    """Server-side Gaussian random projection of wide encoder output down to ``d``."""
    proj = GaussianRandomProjection(n_components=d, random_state=seed)
    return proj.fit_transform(np.asarray(E, dtype=np.float64))


# ------------------------------------------------------------------ config

@dataclass
class ProviderConfig:
    kind: str = "hashed_ngram"  # precomputed | hashed_ngram | random
    d: int = 32
    char_ngrams: tuple = (3,)
    word_unigrams: bool = True
    normalize: bool = True
    seed: int = 0
    path: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError("provider d must be positive")
        if self.kind not in ("precomputed", "hashed_ngram", "random"):
            raise ValueError(f"unknown provider kind {self.kind!r}")


def make_provider(cfg: ProviderConfig):
    if cfg.kind == "hashed_ngram":
        return HashedNgramEmbedder(cfg.d, tuple(cfg.char_ngrams), cfg.word_unigrams, cfg.normalize)
    if cfg.kind == "random":
        return RandomEmbedding(cfg.d, 0.1, cfg.seed)
    if cfg.path is None:
        raise ValueError("precomputed provider needs a path")
    return PrecomputedEmbedding(cfg.path, cfg.d, cfg.normalize)
