"""Cost-complexity (weakest-link) pruning with validation-set selection.

The complexity sequence is computed from the training losses stored in every
node at growth time. The validation set only picks the member of that
sequence to return.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import metrics as _metrics
from .data import Dataset
from .leaves import FitConfig, get_family
from .tree import Node, Tree

METRICS = ("loss", "mse", "nll")


@dataclass(frozen=True)
class PruneConfig:
    """``metric`` is ``loss`` (the leaf family's training loss), ``mse`` or ``nll``."""

    metric: str = "loss"
    fit_config: FitConfig = FitConfig()

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown prune metric {self.metric!r}; choose from {METRICS}")


@dataclass
class PruneStep:
    alpha: float
    collapsed: frozenset
    n_leaves: int
    validation: float = math.nan


def node_rows(tree: Tree, contexts: np.ndarray) -> dict[int, np.ndarray]:
    """Row indices reaching every reachable node (internal nodes included)."""
    out = {}
    stack = [(tree.root, np.arange(contexts.shape[0]))]
    while stack:
        i, idx = stack.pop()
        out[i] = idx
        node = tree.nodes[i]
        if node.is_leaf:
            continue
        go_left = node.split.left_mask(contexts[idx], tree.schema)
        stack.append((node.right, idx[~go_left]))
        stack.append((node.left, idx[go_left]))
    return out


def _parents(tree: Tree) -> dict[int, int]:
    parent = {}
    for i in tree.internal_nodes():
        parent[tree.nodes[i].left] = i
        parent[tree.nodes[i].right] = i
    return parent


def fill_missing(tree: Tree, train: Dataset | None, fit_config: FitConfig = FitConfig()) -> dict:
    """Models and training losses per node, refitting where the tree lacks them.

    Returns ``{node: (model, train_loss)}``. Refits warm start from the
    nearest ancestor that has a model and need the training data.
    """
    out = {}
    parent = _parents(tree)
    rows = None
    order = [tree.root]
    k = 0
    while k < len(order):
        node = tree.nodes[order[k]]
        if not node.is_leaf:
            order.extend([node.left, node.right])
        k += 1
    family = get_family(tree.family)
    for i in order:
        node = tree.nodes[i]
        model, loss = node.model, node.train_loss
        if model is None or math.isnan(loss):
            if train is None:
                raise ValueError("tree lacks node models or training losses; pass the training data")
            if rows is None:
                rows = node_rows(tree, train.contexts)
            payload = train.payload.take(rows[i])
            if model is None:
                warm = None
                j = i
                while j in parent:
                    j = parent[j]
                    if out[j][0] is not None:
                        warm = out[j][0].params
                        break
                model = family.fit(payload, fit_config.with_warm_start(warm)).model
            loss = model.loss(payload)
        out[i] = (model, float(loss))
    return out


def weakest_link_sequence(tree: Tree, losses: dict | None = None) -> list[PruneStep]:
    """Nested subtrees T0 ⊃ T1 ⊃ ... ⊃ root-only with strictly increasing alpha.

    Each step collapses every internal node whose per-leaf loss reduction
    ``(R(t) - R(T_t)) / (|T_t| - 1)`` is smallest; nodes whose value does not
    exceed the current alpha are folded into the same step.
    """
    if losses is None:
        losses = {i: (n.model, n.train_loss) for i, n in enumerate(tree.nodes)}
    internal = tree.internal_nodes()
    collapsed: set[int] = set()
    steps = [PruneStep(0.0, frozenset(), tree.n_leaves)]

    def subtree(i):
        # (summed leaf loss, leaf count) of the current pruned subtree under i
        node = tree.nodes[i]
        if node.is_leaf or i in collapsed:
            return losses[i][1], 1
        rl, nl = subtree(node.left)
        rr, nr = subtree(node.right)
        return rl + rr, nl + nr

    def reachable_internal():
        out = []
        stack = [tree.root]
        while stack:
            i = stack.pop()
            node = tree.nodes[i]
            if node.is_leaf or i in collapsed:
                continue
            out.append(i)
            stack.extend([node.right, node.left])
        return out

    prev_alpha = -math.inf
    while tree.root not in collapsed and internal:
        candidates = reachable_internal()
        g = {}
        for i in candidates:
            r_sub, leaves = subtree(i)
            g[i] = (losses[i][1] - r_sub) / (leaves - 1)
        alpha = max(min(g.values()), prev_alpha)
        while True:
            hit = [i for i in candidates if g[i] <= alpha]
            collapsed.update(hit)
            candidates = reachable_internal()
            if not candidates:
                break
            g = {}
            for i in candidates:
                r_sub, leaves = subtree(i)
                g[i] = (losses[i][1] - r_sub) / (leaves - 1)
            if min(g.values()) > alpha:
                break
        if alpha <= prev_alpha:
            # only possible when rounding pushes a value below the previous alpha
            steps[-1] = PruneStep(prev_alpha, frozenset(_effective(tree, collapsed)),
                                  subtree(tree.root)[1])
            continue
        steps.append(PruneStep(alpha, frozenset(_effective(tree, collapsed)), subtree(tree.root)[1]))
        prev_alpha = alpha
    return steps


def _effective(tree: Tree, collapsed: set) -> set:
    """Collapsed nodes that are still reachable (not inside another collapsed node)."""
    out = set()
    stack = [tree.root]
    while stack:
        i = stack.pop()
        node = tree.nodes[i]
        if i in collapsed:
            out.add(i)
            continue
        if not node.is_leaf:
            stack.extend([node.right, node.left])
    return out


def collapse(tree: Tree, collapsed, losses: dict | None = None) -> Tree:
    """New tree in which the nodes of ``collapsed`` become leaves."""
    losses = losses or {}
    order = []
    stack = [tree.root]
    while stack:
        i = stack.pop()
        order.append(i)
        node = tree.nodes[i]
        if not node.is_leaf and i not in collapsed:
            stack.extend([node.right, node.left])
    remap = {old: new for new, old in enumerate(order)}
    nodes = []
    for old in order:
        src = tree.nodes[old]
        model, loss = losses.get(old, (src.model, src.train_loss))
        if src.is_leaf or old in collapsed:
            nodes.append(Node(model=model, n_train=src.n_train, train_loss=loss))
        else:
            nodes.append(Node(split=src.split, left=remap[src.left], right=remap[src.right],
                              model=model, n_train=src.n_train, train_loss=loss))
    out = Tree(tree.schema, nodes, tree.family, 0)
    out.stats = dict(tree.stats)
    return out


def _node_metric(metric: str, model, payload) -> float:
    """Summed validation metric of one node's model on the rows reaching it."""
    if len(payload) == 0:
        return 0.0
    if metric == "loss":
        return float(model.loss(payload))
    probs = model.predict(payload)
    if metric == "mse":
        return math.fsum(_metrics.row_squared_error(probs, payload))
    return math.fsum(_metrics.row_nll(probs, payload))


def validation_metric(tree: Tree, validation: Dataset, metric: str = "loss") -> float:
    """Mean per-row validation metric of ``tree`` (the pruning selection criterion)."""
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    parts = [
        _node_metric(metric, tree.leaf(k).model, validation.payload.take(idx))
        for k, idx in enumerate(tree.leaf_partition(validation))
    ]
    return math.fsum(parts) / len(validation)


def prune(tree: Tree, validation: Dataset, cfg: PruneConfig = PruneConfig(),
          train: Dataset | None = None) -> Tree:
    """Return the member of the weakest-link sequence with the smallest validation metric.

    Exact ties go to the subtree with fewer leaves. ``train`` is only needed
    when the tree was loaded without per-node models or training losses.
    """
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    if validation.schema != tree.schema:
        raise ValueError("validation data does not match the tree schema")
    losses = fill_missing(tree, train, cfg.fit_config)
    steps = weakest_link_sequence(tree, losses)
    rows = node_rows(tree, validation.contexts)
    per_node = {
        i: _node_metric(cfg.metric, losses[i][0], validation.payload.take(idx))
        for i, idx in rows.items()
    }

    def leaves_of(collapsed):
        out = []
        stack = [tree.root]
        while stack:
            i = stack.pop()
            node = tree.nodes[i]
            if node.is_leaf or i in collapsed:
                out.append(i)
            else:
                stack.extend([node.right, node.left])
        return out

    best = None
    for step in steps:
        step.validation = math.fsum(per_node[i] for i in leaves_of(step.collapsed)) / len(validation)
        if best is None or step.validation < best.validation or (
            step.validation == best.validation and step.n_leaves < best.n_leaves
        ):
            best = step
    out = collapse(tree, best.collapsed, losses)
    out.stats = dict(tree.stats)
    out.stats["prune"] = {
        "metric": cfg.metric,
        "alphas": [s.alpha for s in steps],
        "leaves": [s.n_leaves for s in steps],
        "validation": [s.validation for s in steps],
        "selected_leaves": best.n_leaves,
    }
    return out
