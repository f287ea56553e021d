import numpy as np
import pytest
from scipy import stats

from mstree.data import Dataset
from mstree.datagen import (AUCTION_SCHEMA, BALANCE, KMEANS_SIGMA, KMeansTruth, _random_cmt,
                            _sample_choices, gen_auctions, gen_cmt_truth, gen_context_free,
                            gen_kmeans_truth, make_rng, true_probs, truth_from_dict)
from mstree.ingest import export, export_text, ingest
from mstree.leaves import IsotonicModel, mnl_predict
from mstree.pruning import PruneConfig, prune
from mstree.serial import DecodeError, loads
from mstree.trainer import TrainConfig, grow


def three_sigma(count, n, p):
    return abs(count - n * p) <= 3 * np.sqrt(n * p * (1 - p)) + 1e-9


# -- context-free ----------------------------------------------------------------


def test_context_free_shapes_and_ranges():
    data, truth = gen_context_free(0, 25000)
    assert len(data) == 25000 and data.contexts.shape == (25000, 4)
    assert np.all((data.contexts >= 0) & (data.contexts < 1))
    p = data.payload
    assert set(np.unique(p.n_options)) == {2, 3, 4, 5}
    assert p.features.shape == (25000, 5, 4)
    assert np.all(p.features[~p.mask] == 0)
    assert np.all((p.choices >= 0) & (p.choices <= p.n_options))
    assert np.all(np.abs(truth.beta) <= 1)
    # assortment sizes uniform on {2..5}
    counts = np.bincount(p.n_options, minlength=6)[2:]
    assert all(three_sigma(c, 25000, 0.25) for c in counts)


def test_generators_deterministic():
    for gen in (gen_context_free, gen_cmt_truth, gen_kmeans_truth):
        a, ta = gen(4, 500)
        b, tb = gen(4, 500)
        c, _ = gen(5, 500)
        assert export_text(a) == export_text(b)
        assert ta.dumps() == tb.dumps()
        assert export_text(a) != export_text(c)
    a, ta = gen_auctions(4, 500)
    b, tb = gen_auctions(4, 500)
    assert export_text(a) == export_text(b) and ta.dumps() == tb.dumps()


def test_choice_sampling_matches_mnl_monte_carlo():
    rng = np.random.default_rng(0)
    beta = rng.uniform(-1, 1, 4)
    assortment = rng.uniform(size=(4, 4))
    p = mnl_predict(beta, assortment)
    n = 10**6
    draws = _sample_choices(make_rng(99), np.tile(p, (n, 1)))
    counts = np.bincount(draws, minlength=5)
    assert counts.sum() == n
    for h in range(5):
        assert three_sigma(counts[h], n, p[h]), (h, counts[h], n * p[h])


def test_sample_choices_never_picks_padding():
    probs = np.array([[0.2, 0.8, 0.0, 0.0]] * 1000)
    draws = _sample_choices(make_rng(1), probs)
    assert set(np.unique(draws)) <= {0, 1}


def test_context_free_truth_ignores_context():
    _, truth = gen_context_free(1, 10)
    a = rng_assortment()
    p1 = true_probs(truth, [0.1, 0.2, 0.3, 0.4], a)
    p2 = true_probs(truth, [0.9, 0.9, 0.0, 0.5], a)
    assert np.array_equal(p1, p2)
    assert np.allclose(p1, mnl_predict(truth.beta, a), atol=1e-15)


def rng_assortment(h=3, seed=2):
    return np.random.default_rng(seed).uniform(size=(h, 4))


# -- CMT truth -------------------------------------------------------------------


def region_fractions(tree):
    """Left share of each split's region under uniform contexts on the unit box."""
    out = []
    stack = [(tree.root, np.zeros(4), np.ones(4))]
    while stack:
        i, lo, hi = stack.pop()
        node = tree.nodes[i]
        if node.is_leaf:
            continue
        j, s = node.split.variable, node.split.threshold
        out.append((s - lo[j]) / (hi[j] - lo[j]))
        lhi, rlo = hi.copy(), lo.copy()
        lhi[j], rlo[j] = s, s
        stack.extend([(node.left, lo, lhi), (node.right, rlo, hi)])
    return out


def test_cmt_truth_structure_audit():
    for seed in range(200):
        _, truth = gen_cmt_truth(seed, 1)
        tree = truth.tree
        assert 4 <= tree.n_leaves <= 7 and tree.depth <= 3
        for frac in region_fractions(tree):
            assert BALANCE <= frac <= 1 - BALANCE
        for k in range(tree.n_leaves):
            assert np.all(np.abs(tree.leaf(k).model.beta) <= 1)


def test_cmt_leaf_count_uniform_chi2():
    counts = np.zeros(4)
    for seed in range(10_000):
        counts[int(make_rng(seed).integers(4, 8)) - 4] += 1
    # same draw the generator makes first on its stream
    assert gen_cmt_truth(17, 1)[1].tree.n_leaves == int(make_rng(17).integers(4, 8))
    chi2 = ((counts - 2500) ** 2 / 2500).sum()
    # 3 degrees of freedom: mean 3, sd sqrt(6)
    assert chi2 <= 3 + 3 * np.sqrt(6)


def test_random_cmt_balance_for_every_leaf_count():
    rng = make_rng(5)
    for n_leaves in (4, 5, 6, 7, 8):
        nodes = _random_cmt(rng, n_leaves)
        assert sum(nd["split"] is None for nd in nodes) == n_leaves
        assert max(nd["depth"] for nd in nodes) <= 3


def test_cmt_oracle_is_routed_leaf_mnl():
    data, truth = gen_cmt_truth(2, 300)
    probs = truth.true_probs(data)
    leaves = truth.tree.route_rows(data.contexts)
    for i in range(0, 300, 17):
        beta = truth.tree.leaf(leaves[i]).model.beta
        h = data.payload.n_options[i]
        expect = mnl_predict(beta, data.payload.features[i, :h])
        assert np.allclose(probs[i, : h + 1], expect, atol=1e-14)
        assert np.all(probs[i, h + 1:] == 0)
    ctx = data.contexts[0]
    a = data.payload.features[0, : data.payload.n_options[0]]
    assert np.allclose(true_probs(truth, ctx, a), probs[0, : len(a) + 1], atol=1e-15)


# -- k-means truth ---------------------------------------------------------------


def test_kmeans_truth_parameters():
    for seed in range(50):
        _, truth = gen_kmeans_truth(seed, 1)
        assert truth.sigma == KMEANS_SIGMA == 0.08
        assert 4 <= truth.k <= 7
        assert np.all(truth.weights > 0)
        assert abs(truth.weights.sum() - 1) <= 1e-12
        assert np.all((truth.means >= 0) & (truth.means <= 1))


def test_kmeans_cluster_frequencies():
    data, truth = gen_kmeans_truth(3, 10**5)
    counts = np.bincount(data.latent, minlength=truth.k)
    for k in range(truth.k):
        assert three_sigma(counts[k], 10**5, truth.weights[k])
    # contexts scatter around their cluster mean with sd sigma, unclipped
    resid = data.contexts - truth.means[data.latent]
    assert abs(resid.std() - 0.08) < 0.002
    assert abs(resid.mean()) < 0.002


def test_kmeans_latent_vs_posterior():
    data, truth = gen_kmeans_truth(4, 2000)
    latent = truth.true_probs(data)
    post = truth.true_probs(data, posterior=True)
    for i in range(0, 2000, 97):
        k = data.latent[i]
        h = data.payload.n_options[i]
        assert np.allclose(latent[i, : h + 1],
                           mnl_predict(truth.betas[k], data.payload.features[i, :h]), atol=1e-14)
    assert np.allclose(post.sum(1), 1)
    # without latent labels the posterior mixture is used
    stripped = Dataset(data.schema, data.contexts, data.payload)
    assert np.allclose(truth.true_probs(stripped), post)
    # posterior puts almost all mass on the generating cluster for separated means
    w = truth.posterior(data.contexts)
    assert np.mean(w.argmax(1) == data.latent) > 0.8


# -- auctions ----------------------------------------------------------------------


def test_auction_curves_monotone():
    for seed in range(20):
        _, truth = gen_auctions(seed, 10, segments=8)
        assert truth.n_segments == 8
        grid = np.exp(np.linspace(np.log(0.01), np.log(100), 1000))
        for k in range(truth.n_segments):
            p = truth.tree.leaf(k).model.predict_bids(grid)
            assert np.all(np.diff(p) >= 0)
            assert p.min() >= 0 and p.max() <= 1


def test_auction_data_ranges():
    data, truth = gen_auctions(1, 20000, segments=8)
    assert data.schema == AUCTION_SCHEMA
    assert set(np.unique(data.payload.wins)) <= {0.0, 1.0}
    b = data.payload.bids
    assert b.min() >= 0.1 and b.max() <= 10.0
    assert np.allclose(b, np.round(b, 2))
    # log-uniform: log bids roughly uniform
    ks = stats.kstest((np.log(b) - np.log(0.1)) / (np.log(10) - np.log(0.1)), "uniform")
    assert ks.statistic < 0.02
    seg = truth.segment_of(data.contexts)
    assert len(np.unique(seg)) == 8
    # every segment split keeps at least 30% of its parent region
    assert np.bincount(seg).min() > 0.3**7 * 20000 * 0.5


def test_auction_monte_carlo_win_rate():
    data, truth = gen_auctions(2, 10**5, segments=1, bid_range=(2.0, 2.0))
    p = truth.tree.leaf(0).model.predict_bids(2.0)
    assert np.all(data.payload.bids == 2.0)
    assert three_sigma(data.payload.wins.sum(), 10**5, float(p))


def test_single_segment_ir_and_irt_coincide():
    data, truth = gen_auctions(3, 30000, segments=1)
    assert truth.n_segments == 1 and truth.tree.depth == 0
    probe = data.take(np.arange(1000))
    shuffled = Dataset(data.schema, data.contexts[::-1][:1000], probe.payload)
    assert np.array_equal(truth.true_probs(probe), truth.true_probs(shuffled))
    train, val = data.split(20000, 10000)
    tree = grow(train, TrainConfig(leaf_family="isotonic", min_leaf_size=2000, max_depth=3))
    pruned = prune(tree, val, PruneConfig("mse"))
    ir = IsotonicModel.fit(train.payload).model
    assert pruned.n_leaves == 1
    assert pruned.leaf(0).model == ir


def test_auction_true_probs_single():
    data, truth = gen_auctions(4, 50)
    ctx = [data.schema.decode_value(j, v) for j, v in enumerate(data.contexts[3])]
    seg = truth.segment_of(data.contexts[3:4])[0]
    expect = truth.tree.leaf(seg).model.predict_bids(data.payload.bids[3])
    assert true_probs(truth, ctx, data.payload.bids[3]) == pytest.approx(float(expect), abs=0)


def test_variant_mismatch_and_bad_args():
    _, truth = gen_context_free(0, 5)
    adata, atruth = gen_auctions(0, 5)
    with pytest.raises(ValueError):
        truth.true_probs(adata)
    cdata, _ = gen_context_free(0, 5)
    with pytest.raises(ValueError):
        atruth.true_probs(cdata)
    with pytest.raises(ValueError):
        gen_auctions(0, 5, segments=0)
    with pytest.raises(ValueError):
        gen_context_free(0, 0)
    with pytest.raises(ValueError):
        KMeansTruth(np.zeros((2, 4)), np.zeros((2, 4)), [0.5, 0.6])


def test_truth_documents_round_trip():
    cases = [gen_context_free(0, 200), gen_cmt_truth(0, 200), gen_kmeans_truth(0, 200),
             gen_auctions(0, 200)]
    for data, truth in cases:
        doc = loads(truth.dumps())
        assert doc["format"] == "mst-v1" and doc["truth"]["variant"] == truth.variant
        back = truth_from_dict(doc)
        assert type(back) is type(truth)
        assert np.array_equal(back.true_probs(data), truth.true_probs(data))
        assert back.dumps() == truth.dumps()
    with pytest.raises(DecodeError):
        truth_from_dict({"format": "mst-v1", "schema": [], "truth": {"variant": "x"}})
    with pytest.raises(DecodeError):
        truth_from_dict({"format": "mst-v1"})


def test_truth_scores_reingested_rows(tmp_path):
    # ingest sorts categories, so codes differ from the generator's; labels decide
    data, truth = gen_auctions(6, 400, segments=4)
    path = str(tmp_path / "a.csv")
    export(data, path)
    back = ingest(path)
    assert back.schema != data.schema
    assert np.array_equal(truth.true_probs(back), truth.true_probs(data))
