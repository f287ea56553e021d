import numpy as np
import pytest

from mstree.data import CATEGORICAL, ContextSchema, Variable
from mstree.datagen import gen_cmt_truth
from mstree.leaves import ConstantModel
from mstree.trainer import TrainConfig, grow
from mstree.tree import Node, Split, Tree


def fig1_tree() -> Tree:
    """Five-segment tree over age, location and gender."""
    schema = ContextSchema((
        Variable("Age"),
        Variable("Location", CATEGORICAL, ("Canada", "Mexico", "USA")),
        Variable("Gender", CATEGORICAL, ("Female", "Male")),
    ))
    leaf = lambda p: Node(model=ConstantModel(p))
    nodes = [
        Node(split=Split(0, "numeric", 40.0), left=1, right=2, model=ConstantModel(0.5)),
        Node(split=Split(1, CATEGORICAL, "USA"), left=3, right=4, model=ConstantModel(0.5)),
        Node(split=Split(2, CATEGORICAL, "Male"), left=5, right=6, model=ConstantModel(0.5)),
        Node(split=Split(2, CATEGORICAL, "Female"), left=7, right=8, model=ConstantModel(0.5)),
        leaf(0.3),
        leaf(0.4),
        leaf(0.5),
        leaf(0.1),
        leaf(0.2),
    ]
    return Tree(schema, nodes, "constant")


@pytest.fixture(scope="session")
def cmt_small():
    data, truth = gen_cmt_truth(3, 9000)
    train, val, test = data.split(3000, 3000, 3000)
    tree = grow(train, TrainConfig(max_depth=3, min_leaf_size=100, q_split=5, seed=3))
    return tree, train, val, test, truth


def random_contexts(rng, schema, n):
    cols = []
    for v in schema.variables:
        if v.is_categorical:
            cols.append(rng.integers(0, len(v.categories), n).astype(float))
        else:
            cols.append(rng.uniform(-1.0, 2.0, n))
    return np.column_stack(cols)


# acceptance verdict lines, filled by test_acceptance and echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
