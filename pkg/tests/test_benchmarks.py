import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from mstree.benchmarks import (ClusteredModel, ContextEncoder, context_free, fit_clustered,
                               kmeans, tune_k)
from mstree.data import CATEGORICAL, AuctionPayload, ContextSchema, Dataset, Variable
from mstree.datagen import gen_auctions, gen_context_free, gen_kmeans_truth
from mstree.leaves import FamilyMismatch
from mstree.metrics import mae_vs_truth
from mstree.serial import DecodeError
from mstree.trainer import fit_context_free


def inertia(X, labels, centroids):
    return float(((X - centroids[labels]) ** 2).sum())


def test_blobs_recovered():
    rng = np.random.default_rng(0)
    a = rng.normal(0.0, 1.0, (300, 3))
    b = rng.normal(10.0, 1.0, (200, 3))
    X = np.vstack([a, b])
    truth = np.r_[np.zeros(300), np.ones(200)]
    labels, cent = kmeans(X, 2, seed=1)
    assert adjusted_rand_score(truth, labels) == 1.0
    assert cent.shape == (2, 3)


def test_k1_is_mean_and_k_n_is_exact():
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(40, 2))
    labels, cent = kmeans(X, 1)
    assert np.all(labels == 0)
    assert np.allclose(cent[0], X.mean(0), atol=1e-15)
    labels, cent = kmeans(X, 40)
    assert inertia(X, labels, cent) == pytest.approx(0.0, abs=1e-20)
    assert len(np.unique(labels)) == 40


def test_kmeans_errors_and_determinism():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(ValueError):
        kmeans(X, 3)
    with pytest.raises(ValueError):
        kmeans(X, 0)
    rng = np.random.default_rng(2)
    Y = rng.normal(size=(500, 4))
    l1, c1 = kmeans(Y, 5, seed=3)
    l2, c2 = kmeans(Y, 5, seed=3)
    assert np.array_equal(l1, l2) and np.array_equal(c1, c2)


def test_inertia_non_increasing_over_iterations():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(600, 3))
    values = []
    for it in range(1, 15):
        labels, cent = kmeans(X, 6, seed=4, n_init=1, max_iter=it)
        values.append(inertia(X, labels, cent))
    assert all(b <= a + 1e-9 for a, b in zip(values, values[1:]))


def test_encoder_standardizes_and_one_hots():
    schema = ContextSchema((Variable("a"), Variable("c", CATEGORICAL, ("u", "v", "w"))))
    ctx = np.array([[1.0, 0], [3.0, 2], [5.0, 1], [7.0, 2]])
    enc = ContextEncoder.fit(schema, ctx)
    Z = enc.transform(ctx)
    assert Z.shape == (4, 4)
    assert np.allclose(Z[:, 0].mean(), 0) and np.allclose(Z[:, 0].std(), 1)
    assert np.array_equal(Z[:, 1:], np.eye(3)[[0, 2, 1, 2]])
    # constant column keeps unit scale instead of dividing by zero
    enc = ContextEncoder.fit(ContextSchema.numeric(1), np.ones((5, 1)))
    assert np.all(enc.transform(np.ones((5, 1))) == 0)


@pytest.fixture(scope="module")
def kmeans_data():
    data, truth = gen_kmeans_truth(6, 9000)
    train, val, test = data.split(3000, 3000, 3000)
    return train, val, test, truth


def test_k1_equals_context_free(kmeans_data):
    train, _, test, _ = kmeans_data
    km = fit_clustered(train, 1, "mnl")
    cf = fit_context_free(train)
    assert np.array_equal(km.predict(test), cf.predict(test))
    assert np.array_equal(km.models[0].beta, context_free(train).beta)


def test_predict_routes_to_nearest_centroid(kmeans_data):
    train, _, test, _ = kmeans_data
    km = fit_clustered(train, 4, "mnl", seed=1)
    Z = km.encoder.transform(test.contexts)
    d = np.linalg.norm(Z[:, None, :] - km.centroids[None], axis=2)
    labels = d.argmin(1)
    assert np.array_equal(km.assign(test.contexts), labels)
    probs = km.predict(test)
    for c in range(4):
        idx = np.nonzero(labels == c)[0]
        assert np.array_equal(probs[idx], km.models[c].predict(test.payload.take(idx)))


def test_true_k_recovers_truth_better_with_more_rows():
    maes = []
    for n in (2000, 20000):
        data, truth = gen_kmeans_truth(7, 2 * n)
        train, test = data.split(n, n)
        km = fit_clustered(train, truth.k, "mnl", seed=7)
        maes.append(mae_vs_truth(km, truth, test))
    assert maes[1] < maes[0] and maes[1] < 0.02


def test_tune_k(kmeans_data):
    train, val, _, truth = kmeans_data
    cache = {}
    best = tune_k(train, val, 8, "mnl", seed=2, cache=cache)
    sel = best.selection
    losses = sel["validation_loss"]
    assert sorted(cache) == list(range(1, 9))
    assert losses[sel["k"]] == min(losses.values()) and losses[sel["k"]] <= losses[1]
    assert best.k == sel["k"] >= 2
    one = tune_k(train, val, 1, "mnl")
    assert one.k == 1
    assert np.array_equal(one.predict(val), fit_context_free(train).predict(val))
    # parallel K fits give the same answer
    par = tune_k(train, val, 8, "mnl", seed=2, workers=3, cache=cache)
    assert par.k == best.k and par.dumps() == best.dumps()
    with pytest.raises(ValueError):
        tune_k(train, val, 0)


def test_tune_k_ties_go_to_smaller_k():
    # contexts carry no information and every cluster model is the same constant
    rng = np.random.default_rng(4)
    schema = ContextSchema.numeric(2)
    n = 400
    payload = AuctionPayload(np.ones(n), np.ones(n))
    train = Dataset(schema, rng.uniform(size=(n, 2)), payload)
    val = Dataset(schema, rng.uniform(size=(n, 2)), payload)
    best = tune_k(train, val, 4, "constant")
    assert set(best.selection["validation_loss"].values()) == {0.0}
    assert best.k == 1


def test_context_free_truth_selects_k1():
    data, _ = gen_context_free(8, 6000)
    train, val = data.split(3000, 3000)
    assert tune_k(train, val, 6, "mnl", seed=8).k == 1


def test_auction_families_and_round_trip():
    data, _ = gen_auctions(5, 6000)
    train, test = data.split(4000, 2000)
    for fam in ("isotonic", "logistic", "constant"):
        km = fit_clustered(train, 3, fam, seed=5)
        back = ClusteredModel.loads(km.dumps())
        assert np.array_equal(back.predict(test), km.predict(test))
        assert back.dumps() == km.dumps()
    with pytest.raises(DecodeError):
        ClusteredModel.loads(km.dumps().replace("mstkm-v1", "mst-v1"))
    with pytest.raises(FamilyMismatch):
        fit_clustered(train, 2, "mnl")
