import numpy as np
import pytest

from fedutr import numeric as nx
from fedutr.datasets import ItemCorpus, SyntheticSpec, generate_synthetic
from fedutr.evaluation import cosine
from fedutr.urm import (EmbeddingFormatError, HashedNgramEmbedder, PrecomputedEmbedding, ProviderConfig,
                        RandomEmbedding, fnv1a64, l2_normalize_rows, load_precomputed, make_provider, precomputed_metadata,
                        project_embeddings, random_init, save_precomputed)


def test_fnv1a_is_the_reference_hash_without_key():
    # published FNV-1a 64-bit test vectors
    assert fnv1a64(b"", key=0) == 0xCBF29CE484222325
    assert fnv1a64(b"a", key=0) == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar", key=0) == 0x85944171F73967E8


def test_precomputed_tsv_round_trip(tmp_path):
    E = np.array([[1.0, 0.0], [0.0, 1.0], [3.0, 4.0]])
    save_precomputed(tmp_path / "e.tsv", E)
    np.testing.assert_array_equal(load_precomputed(tmp_path / "e.tsv", 3, 2), E)
    normed = load_precomputed(tmp_path / "e.tsv", 3, 2, normalize=True)
    np.testing.assert_allclose(normed[2], [0.6, 0.8])


def test_precomputed_blob_round_trip(tmp_path):
    E = nx.make_rng(0).normal(size=(4, 3)).astype(np.float32).astype(np.float64)
    save_precomputed(tmp_path / "e.bin", E, fmt="blob")
    np.testing.assert_array_equal(load_precomputed(tmp_path / "e.bin", 4, 3), E)


def test_dimension_mismatch_names_both(tmp_path):
    save_precomputed(tmp_path / "e.tsv", np.ones((3, 2)))
    with pytest.raises(EmbeddingFormatError, match="expected 4, found 2"):
        load_precomputed(tmp_path / "e.tsv", 3, 4)
    with pytest.raises(EmbeddingFormatError, match="row count"):
        load_precomputed(tmp_path / "e.tsv", 5, 2)


def test_precomputed_rejects_gaps_and_nan(tmp_path):
    p = tmp_path / "e.tsv"
    p.write_text("#dim=2 count=2\n0\t1 2\n")
    with pytest.raises(EmbeddingFormatError, match="missing"):
        load_precomputed(p, 2, 2)
    p.write_text("#dim=2 count=1\n0\tnan 2\n")
    with pytest.raises(nx.NonFiniteError):
        load_precomputed(p, 1, 2)
    p.write_text("dim two\n")
    with pytest.raises(EmbeddingFormatError, match="bad header"):
        load_precomputed(p, 1, 2)


def test_hashed_rows_are_bag_of_features():
    emb = HashedNgramEmbedder(16).fit()
    E = emb.transform(["alpha beta", "beta alpha", "alpha beta", "", "Alpha BETA"])
    assert np.array_equal(E[0], E[1]) and np.array_equal(E[0], E[2]) and np.array_equal(E[0], E[4])
    assert not E[3].any()
    np.testing.assert_allclose(np.linalg.norm(E[0]), 1.0)


def test_hashed_embedding_is_stable_across_instances():
    texts = ["red apple pie", "green tea"]
    a = HashedNgramEmbedder(8).fit_transform(texts)
    b = HashedNgramEmbedder(8).fit_transform(ItemCorpus(texts))
    assert np.array_equal(a, b)
    with pytest.raises(TypeError):
        HashedNgramEmbedder(8).fit().transform("single string")


def test_hashed_text_separates_factors():
    ds, corpus, truth = generate_synthetic(SyntheticSpec(n=80, m=150, noise=0.3), nx.make_rng(4))
    E = HashedNgramEmbedder(32).fit().transform(corpus)
    C = E @ E.T
    same = truth.dominant[:, None] == truth.dominant[None, :]
    off = ~np.eye(150, dtype=bool)
    assert C[same & off].mean() > C[~same].mean()


def test_random_init_moments_and_seed():
    E = random_init(1000, 100, nx.make_rng(1))
    assert abs(E.std() - 0.1) < 0.005 and abs(E.mean()) < 0.005
    assert np.array_equal(RandomEmbedding(4, seed=2).transform(["a"] * 3), RandomEmbedding(4, seed=2).transform(["b"] * 3))


def test_l2_normalize_leaves_zero_rows():
    out = l2_normalize_rows(np.array([[0.0, 0.0], [3.0, 4.0]]))
    np.testing.assert_allclose(out, [[0, 0], [0.6, 0.8]])


def test_random_projection_shape_and_determinism():
    wide = nx.make_rng(0).normal(size=(10, 300))
    a, b = project_embeddings(wide, 16, seed=3), project_embeddings(wide, 16, seed=3)
    assert a.shape == (10, 16) and np.array_equal(a, b)


def test_provider_factory(tmp_path):
    assert isinstance(make_provider(ProviderConfig("hashed_ngram", d=8)), HashedNgramEmbedder)
    assert isinstance(make_provider(ProviderConfig("random", d=8)), RandomEmbedding)
    save_precomputed(tmp_path / "e.tsv", np.ones((2, 8)))
    prov = make_provider(ProviderConfig("precomputed", d=8, path=str(tmp_path / "e.tsv"), normalize=False))
    assert isinstance(prov, PrecomputedEmbedding) and prov.transform(["x", "y"]).shape == (2, 8)
    with pytest.raises(ValueError):
        ProviderConfig("bert")
    with pytest.raises(ValueError):
        make_provider(ProviderConfig("precomputed"))


def test_cosine_helper():
    assert float(cosine([1, 2], [1, 2])) == pytest.approx(1.0)
    assert float(cosine([1, 0], [0, 3])) == 0.0
    assert float(cosine([0, 0], [1, 1])) == 0.0


def test_projection_is_flagged_in_file_metadata(tmp_path):
    narrow = project_embeddings(nx.make_rng(0).normal(size=(3, 50)), 4)
    save_precomputed(tmp_path / "p.tsv", narrow, projected=True)
    save_precomputed(tmp_path / "p.bin", narrow, fmt="blob", projected=True)
    save_precomputed(tmp_path / "plain.tsv", narrow)
    assert precomputed_metadata(tmp_path / "p.tsv")["projected"]
    assert precomputed_metadata(tmp_path / "p.bin") == {"format": "blob", "dim": 4, "count": 3, "projected": True}
    assert not precomputed_metadata(tmp_path / "plain.tsv")["projected"]
    np.testing.assert_allclose(load_precomputed(tmp_path / "p.tsv", 3, 4), narrow)
