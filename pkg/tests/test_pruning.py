import math

import numpy as np
import pytest

from mstree.data import AuctionPayload, ContextSchema, Dataset
from mstree.datagen import gen_context_free
from mstree.leaves import ConstantModel
from mstree.pruning import (PruneConfig, collapse, prune, validation_metric,
                            weakest_link_sequence)
from mstree.trainer import TrainConfig, grow
from mstree.tree import Node, Split, Tree, is_subtree, same_structure


@pytest.fixture(scope="module")
def noise_tree():
    data, _ = gen_context_free(21, 8000)
    train, val = data.split(4000, 4000)
    tree = grow(train, TrainConfig(max_depth=3, min_leaf_size=100, q_split=5, seed=21))
    return tree, train, val


def test_context_free_prunes_to_root(noise_tree):
    tree, _, val = noise_tree
    assert tree.depth == 3
    pruned = prune(tree, val)
    assert pruned.depth == 0 and pruned.n_leaves == 1
    assert np.array_equal(pruned.leaf(0).model.beta, tree.nodes[tree.root].model.beta)


@pytest.mark.parametrize("metric", ["loss", "mse", "nll"])
def test_validation_never_worse_and_subtree(noise_tree, cmt_small, metric):
    for tree, val in ((noise_tree[0], noise_tree[2]), (cmt_small[0], cmt_small[2])):
        pruned = prune(tree, val, PruneConfig(metric))
        before = validation_metric(tree, val, metric)
        after = validation_metric(pruned, val, metric)
        assert after <= before + 1e-12
        assert is_subtree(pruned, tree)
        # selected value is the minimum over the recorded sequence
        assert after == min(pruned.stats["prune"]["validation"])


@pytest.mark.parametrize("metric", ["loss", "mse"])
def test_idempotent(noise_tree, cmt_small, metric):
    for tree, val in ((noise_tree[0], noise_tree[2]), (cmt_small[0], cmt_small[2])):
        once = prune(tree, val, PruneConfig(metric))
        twice = prune(once, val, PruneConfig(metric))
        assert same_structure(once, twice)
        assert once.dumps() == twice.dumps()


def test_cmt_truth_keeps_structure(cmt_small):
    tree, _, val, _, truth = cmt_small
    pruned = prune(tree, val)
    # real segments survive: the pruned tree still splits and beats the root model
    assert pruned.n_leaves > 1
    root = collapse(tree, {tree.root})
    assert validation_metric(pruned, val) < validation_metric(root, val)


def test_alpha_sequence(noise_tree, cmt_small):
    for tree in (noise_tree[0], cmt_small[0]):
        steps = weakest_link_sequence(tree)
        alphas = [s.alpha for s in steps]
        assert all(b > a for a, b in zip(alphas, alphas[1:]))
        leaves = [s.n_leaves for s in steps]
        assert leaves[0] == tree.n_leaves and leaves[-1] == 1
        assert all(b < a for a, b in zip(leaves, leaves[1:]))
        # nested: each step's tree is a subtree of the previous one
        trees = [collapse(tree, s.collapsed) for s in steps]
        for small, big in zip(trees[1:], trees):
            assert is_subtree(small, big)


def test_alpha_matches_brute_force_on_small_tree():
    # root split gains 10 over 2 extra leaves; the left split gains 6 over 1
    schema = ContextSchema.numeric(1)
    nodes = [
        Node(split=Split(0, "numeric", 0.5), left=1, right=2, model=ConstantModel(.5), train_loss=30.0),
        Node(split=Split(0, "numeric", 0.25), left=3, right=4, model=ConstantModel(.5), train_loss=16.0),
        Node(model=ConstantModel(.5), train_loss=4.0),
        Node(model=ConstantModel(.5), train_loss=5.0),
        Node(model=ConstantModel(.5), train_loss=5.0),
    ]
    tree = Tree(schema, nodes, "constant")
    steps = weakest_link_sequence(tree)
    assert [s.alpha for s in steps] == [0.0, 6.0, 10.0]
    assert [s.n_leaves for s in steps] == [3, 2, 1]
    # equal link strengths (16 and 32 / 2) collapse in a single step
    nodes[1].train_loss = 26.0
    nodes[0].train_loss = 46.0
    steps = weakest_link_sequence(Tree(schema, nodes, "constant"))
    assert [s.n_leaves for s in steps] == [3, 1]


def test_depth0_unchanged(noise_tree):
    _, train, val = noise_tree
    root = grow(train, TrainConfig(max_depth=0))
    pruned = prune(root, val)
    assert same_structure(root, pruned) and pruned.n_leaves == 1


def test_tie_goes_to_smaller_tree():
    rng = np.random.default_rng(0)
    schema = ContextSchema.numeric(1)
    same = ConstantModel(0.4)
    nodes = [Node(split=Split(0, "numeric", 0.5), left=1, right=2, model=same, train_loss=10.0),
             Node(model=same, train_loss=4.0), Node(model=same, train_loss=5.0)]
    tree = Tree(schema, nodes, "constant")
    val = Dataset(schema, rng.uniform(size=200), AuctionPayload(np.ones(200), rng.integers(0, 2, 200)))
    pruned = prune(tree, val, PruneConfig("mse"))
    vals = pruned.stats["prune"]["validation"]
    assert vals[0] == vals[1]
    assert pruned.n_leaves == 1


def test_empty_validation_and_schema_mismatch(noise_tree):
    tree, _, val = noise_tree
    with pytest.raises(ValueError):
        prune(tree, val.take(np.arange(0)))
    other = Dataset(ContextSchema.numeric(4, "z"), val.contexts, val.payload)
    with pytest.raises(ValueError):
        prune(tree, other)
    with pytest.raises(ValueError):
        PruneConfig("auc")


def test_missing_losses_refit_from_training_data(cmt_small):
    tree, train, val, *_ = cmt_small
    stripped = Tree.loads(tree.dumps())
    for node in stripped.nodes:
        node.train_loss = math.nan
        if not node.is_leaf:
            node.model = None
    with pytest.raises(ValueError):
        prune(stripped, val)
    a = prune(tree, val)
    b = prune(stripped, val, train=train)
    assert is_subtree(b, tree)
    assert a.n_leaves == b.n_leaves
    assert validation_metric(b, val) == pytest.approx(validation_metric(a, val), rel=1e-6)
