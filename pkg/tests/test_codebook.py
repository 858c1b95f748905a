import numpy as np
import pytest
from hypothesis import given, settings, strategies as hs

from bowlrp.codebook import (BowVector, SoftMapping, Vocabulary, average_bow, bow_from_tile, distortion,
                             kmeans_train, load_vocabulary, rank_soft_map, rank_soft_map_batch, save_vocabulary)
from bowlrp.features import MetricWeights


def blobs(seed=0, k=4, n=60, dim=5):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 10, (k, dim))
    return np.concatenate([c + rng.normal(0, 0.1, (n, dim)) for c in centers]), centers


def test_kmeans_recovers_separated_clusters():
    X, centers = blobs()
    v = kmeans_train(X, 4, seed=1)
    for c in centers:
        assert np.min(np.linalg.norm(v.centers - c, axis=1)) < 0.1


def test_kmeans_seed_determinism():
    X, _ = blobs(2)
    a = kmeans_train(X, 6, seed=3)
    b = kmeans_train(X, 6, seed=3)
    assert np.array_equal(a.centers, b.centers)


def test_kmeans_too_few_points():
    with pytest.raises(ValueError):
        kmeans_train(np.zeros((3, 2)), 5)
    with pytest.raises(ValueError):
        kmeans_train(np.zeros((10, 2)), 2)


def test_more_words_lower_distortion():
    X, _ = blobs(3, k=5)
    assert distortion(X, kmeans_train(X, 10, seed=0)) <= distortion(X, kmeans_train(X, 2, seed=0))


def test_weighted_metric_changes_assignment():
    # with the second axis weighted to zero only the first axis separates points
    X = np.array([[0.0, 0.0], [0.0, 10.0], [5.0, 0.0], [5.0, 10.0]] * 5)
    v = kmeans_train(X, 2, seed=0, metric=MetricWeights(np.array([1.0, 0.0])))
    assert sorted(v.centers[:, 0].tolist()) == [0.0, 5.0]


def test_rank_mapping_weights():
    v = Vocabulary(np.arange(6.0)[:, None], np.ones(1))
    m = rank_soft_map(np.array([2.2]), v)
    # nearest 2, 3, 1, 4
    assert m.tolist() == pytest.approx([0, 0.125, 0.5, 0.25, 0.0625, 0])
    assert m.sum() == pytest.approx(0.9375)


def test_rank_mapping_ties_prefer_lower_index():
    v = Vocabulary(np.array([[1.0], [-1.0], [2.0], [-2.0], [3.0]]), np.ones(1))
    m = rank_soft_map_batch(np.array([[0.0]]), v)
    assert m.indices[0].tolist() == [0, 1, 2, 3]


@given(hs.integers(5, 30), hs.integers(0, 10 ** 6))
@settings(max_examples=40, deadline=None)
def test_rank_mapping_matches_sort(k, seed):
    rng = np.random.default_rng(seed)
    v = Vocabulary(rng.normal(size=(k, 3)), rng.random(3) + 0.1)
    x = rng.normal(size=3)
    d = (((v.centers - x) * v.weights) ** 2).sum(axis=1)
    order = np.argsort(d, kind="stable")[:4]
    m = rank_soft_map_batch(x[None, :], v)
    assert m.indices[0].tolist() == order.tolist()


def test_bow_l1_normalized():
    v = Vocabulary(np.arange(8.0)[:, None], np.ones(1))
    maps = rank_soft_map_batch(np.array([[0.1], [3.4], [7.0]]), v)
    b = bow_from_tile(maps)
    assert b.values.sum() == pytest.approx(1.0) and not b.empty
    assert np.allclose(b.values, maps.dense().sum(axis=0) / maps.dense().sum())
    assert np.allclose(bow_from_tile(maps.dense()).values, b.values)


def test_empty_tile_flagged():
    b = bow_from_tile(SoftMapping(np.zeros((0, 4), np.int64), np.zeros((0, 4)), 10))
    assert b.empty and b.values.shape == (10,) and not b.values.any()


def test_average_bow():
    a = BowVector(np.array([1.0, 0.0]))
    b = BowVector(np.array([0.0, 1.0]))
    assert average_bow([a, b, BowVector(np.zeros(2), empty=True)]).values.tolist() == [0.5, 0.5]
    with pytest.raises(ValueError):
        average_bow([BowVector(np.zeros(2), empty=True)])


def test_vocabulary_roundtrip(tmp_path):
    X, _ = blobs(4)
    v = kmeans_train(X, 5, seed=2, kind="sift+gnq")
    save_vocabulary(v, tmp_path / "v.vocab")
    w = load_vocabulary(tmp_path / "v.vocab")
    assert np.array_equal(v.centers, w.centers) and np.array_equal(v.weights, w.weights)
    assert (w.kind, w.seed, w.n_train) == ("sift+gnq", 2, len(X))
    q = np.random.default_rng(0).normal(size=(50, 5))
    assert np.array_equal(rank_soft_map_batch(q, v).indices, rank_soft_map_batch(q, w).indices)
