"""Greedy recursive partitioning.

Each candidate split is scored by refitting the leaf model on both children
and summing their training losses; the best candidate is kept if it beats
the unsplit node. Nodes of one depth are independent jobs and are dispatched
to ``worker_count`` processes in batches.
"""
from __future__ import annotations

import logging
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .data import CATEGORICAL, NUMERIC, ContextSchema, Dataset
from .leaves import FitConfig, get_family
from .tree import Node, Split, Tree

log = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-9


@dataclass(frozen=True)
class TrainConfig:
    leaf_family: str = "mnl"
    max_depth: int | None = None
    min_leaf_size: int = 100
    q_split: int = 10
    worker_count: int = 1
    fit_config: FitConfig = field(default_factory=FitConfig)
    adaptive_switch_threshold: int = 50_000
    min_child_fraction: float = 0.0
    seed: int = 0
    warm_start: bool = True

    def __post_init__(self):
        get_family(self.leaf_family)
        if self.min_leaf_size < 1:
            raise ValueError("min_leaf_size must be at least 1")
        if self.q_split < 1:
            raise ValueError("q_split must be at least 1")
        if self.worker_count < 1:
            raise ValueError("worker_count must be at least 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be nonnegative")
        if not 0.0 <= self.min_child_fraction < 0.5:
            raise ValueError("min_child_fraction must lie in [0, 0.5)")

    @classmethod
    def from_mapping(cls, values: dict) -> TrainConfig:
        """Build from string-valued key/value pairs (config files, CLI)."""
        known = {f.name: f for f in fields(cls)}
        fit_known = {f.name for f in fields(FitConfig)}
        kwargs, fit_kwargs = {}, {}
        for key, raw in values.items():
            if key in fit_known and key != "warm_start":
                fit_kwargs[key] = _coerce(FitConfig, key, raw)
            elif key in known and key != "fit_config":
                kwargs[key] = _coerce(cls, key, raw)
            else:
                raise ValueError(f"unknown training option {key!r}")
        if fit_kwargs:
            kwargs["fit_config"] = FitConfig(**fit_kwargs)
        return cls(**kwargs)


def _coerce(cls, key, raw):
    if not isinstance(raw, str):
        return raw
    default = {f.name: f.default for f in fields(cls)}.get(key)
    text = raw.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) or key == "max_depth":
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


@dataclass
class SplitSearchResult:
    best_split: Split | None
    child_losses: tuple[float, float]
    parent_loss: float
    left_model: object = None
    right_model: object = None
    split_evals: int = 0
    iterations: int = 0

    @property
    def improvement(self) -> float:
        return self.parent_loss - sum(self.child_losses)


@dataclass
class Candidate:
    split: Split
    feasible: bool
    left_loss: float = np.inf
    right_loss: float = np.inf
    left_model: object = None
    right_model: object = None
    iterations: int = 0

    @property
    def total(self) -> float:
        return self.left_loss + self.right_loss


def candidate_splits(contexts: np.ndarray, variable_index: int, schema: ContextSchema,
                     q_split: int) -> list[Split]:
    """Candidate splits for one variable in evaluation order.

    Numeric variables yield thresholds at the ``k/q_split`` quantiles
    (k = 1..q_split) of the sorted distinct values; a threshold equal to the
    maximum would leave the right child empty and is dropped. Categorical
    variables yield one equality split per observed category, in schema
    order, provided at least two categories are present.
    """
    contexts = np.asarray(contexts, dtype=float)
    column = contexts[:, variable_index] if contexts.ndim == 2 else contexts
    var = schema[variable_index]
    if column.size == 0:
        return []
    if var.kind == CATEGORICAL:
        codes = np.unique(column).astype(np.int64)
        if codes.size < 2:
            return []
        return [Split(variable_index, CATEGORICAL, var.categories[c]) for c in codes if c >= 0]
    values = np.unique(column)
    u = values.size
    if u < 2:
        return []
    k = np.arange(1, q_split + 1)
    positions = (k * u + q_split - 1) // q_split - 1
    thresholds = np.unique(values[positions])
    thresholds = thresholds[thresholds < values[-1]]
    return [Split(variable_index, NUMERIC, float(t)) for t in thresholds]


def _node_rng(seed: int, key: int, *extra: int) -> np.random.Generator:
    """Counter-based stream keyed by run seed and node position."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, key, *extra])))


def _fit_config_for(config: TrainConfig, n_rows: int, warm) -> FitConfig:
    cfg = config.fit_config
    if cfg.optimizer == "sgd" and n_rows <= config.adaptive_switch_threshold:
        cfg = replace(cfg, optimizer="newton")
    return cfg.with_warm_start(warm if config.warm_start else None)


def fit_node(payload, config: TrainConfig, warm=None, rng=None):
    family = get_family(config.leaf_family)
    return family.fit(payload, _fit_config_for(config, len(payload), warm), rng)


def evaluate_split(data: Dataset, split: Split, config: TrainConfig, warm_left=None,
                   warm_right=None, rng_key: tuple = ()) -> Candidate:
    """Refit both children of ``split`` and report their summed training loss."""
    n = len(data)
    go_left = split.left_mask(data.contexts, data.schema)
    n_left = int(go_left.sum())
    n_right = n - n_left
    smallest = min(n_left, n_right)
    if smallest < config.min_leaf_size or smallest < config.min_child_fraction * n or smallest == 0:
        return Candidate(split, feasible=False)
    left = data.payload.take(np.nonzero(go_left)[0])
    right = data.payload.take(np.nonzero(~go_left)[0])
    left_fit = fit_node(left, config, warm_left,
                        _node_rng(config.seed, *rng_key, 0) if rng_key else None)
    right_fit = fit_node(right, config, warm_right,
                         _node_rng(config.seed, *rng_key, 1) if rng_key else None)
    left_loss = left_fit.model.loss(left)
    right_loss = right_fit.model.loss(right)
    return Candidate(split, True, left_loss, right_loss, left_fit.model, right_fit.model,
                     left_fit.iterations + right_fit.iterations)


def select_split(data: Dataset, config: TrainConfig, parent_model=None,
                 parent_loss: float | None = None, node_key: int = 1) -> SplitSearchResult:
    """Exhaustive search for the split with the smallest summed child loss.

    Numeric thresholds are visited in ascending order and each candidate's
    child fits start from the previous candidate's child estimates; the first
    numeric candidate and all categorical candidates start from the parent.
    Ties within ``IMPROVEMENT_TOL`` keep the earlier candidate (lower
    variable index, then smaller threshold / earlier category).
    """
    iterations = 0
    if parent_model is None:
        fit = fit_node(data.payload, config, None, _node_rng(config.seed, node_key))
        parent_model, iterations = fit.model, fit.iterations
    if parent_loss is None:
        parent_loss = parent_model.loss(data.payload)
    result = SplitSearchResult(None, (np.inf, np.inf), parent_loss, iterations=iterations)
    if len(data) < 2 * config.min_leaf_size:
        return result
    parent_params = parent_model.params
    best: Candidate | None = None
    counter = 0
    for j in range(len(data.schema)):
        chain = (parent_params, parent_params)
        for split in candidate_splits(data.contexts, j, data.schema, config.q_split):
            counter += 1
            if split.kind == NUMERIC:
                warm_left, warm_right = chain
            else:
                warm_left = warm_right = parent_params
            cand = evaluate_split(data, split, config, warm_left, warm_right, (node_key, counter))
            if not cand.feasible:
                continue
            result.split_evals += 1
            result.iterations += cand.iterations
            if split.kind == NUMERIC:
                chain = (cand.left_model.params, cand.right_model.params)
            if best is None or cand.total < best.total - IMPROVEMENT_TOL:
                best = cand
    if best is not None and best.total < parent_loss - IMPROVEMENT_TOL:
        result.best_split = best.split
        result.child_losses = (best.left_loss, best.right_loss)
        result.left_model = best.left_model
        result.right_model = best.right_model
    return result


# -- parallel dispatch ---------------------------------------------------------

_SHARED: dict = {}


def _init_worker(data: Dataset, config: TrainConfig) -> None:
    _SHARED["data"] = data
    _SHARED["config"] = config


def _split_job(job):
    rows, parent_model, parent_loss, key = job
    data = _SHARED["data"].take(rows)
    return select_split(data, _SHARED["config"], parent_model, parent_loss, key)


def _run_batches(jobs, data: Dataset, config: TrainConfig, pool):
    """Run jobs in batches of ``worker_count``; a batch starts after the previous one ends."""
    if pool is None:
        _init_worker(data, config)
        try:
            return [_split_job(job) for job in jobs]
        finally:
            _SHARED.clear()
    out = []
    q = config.worker_count
    for start in range(0, len(jobs), q):
        out.extend(pool.map(_split_job, jobs[start : start + q]))
    return out


def grow(data: Dataset, config: TrainConfig = TrainConfig(), schema: ContextSchema | None = None) -> Tree:
    """Grow a segmentation tree breadth first.

    Every node keeps the model fitted on its rows (internal nodes included),
    with its row count and training loss, for later pruning. Counters are
    left in ``tree.stats``.
    """
    if len(data) == 0:
        raise ValueError("cannot grow a tree on an empty dataset")
    if len(data) < config.min_leaf_size:
        raise ValueError("training data smaller than min_leaf_size")
    schema = schema or data.schema
    start = time.perf_counter()
    root_fit = fit_node(data.payload, config, None, _node_rng(config.seed, 1))
    root_loss = root_fit.model.loss(data.payload)
    nodes = [Node(model=root_fit.model, n_train=len(data), train_loss=root_loss)]
    stats = {"split_evals": 0, "fit_iterations": root_fit.iterations, "levels": []}
    # frontier entries: (arena index, row indices, heap key)
    frontier = [(0, np.arange(len(data)), 1)]
    depth = 0
    pool = None
    if config.worker_count > 1:
        ctx = multiprocessing.get_context("fork")
        pool = ProcessPoolExecutor(config.worker_count, mp_context=ctx,
                                   initializer=_init_worker, initargs=(data, config))
    try:
        while frontier:
            if config.max_depth is not None and depth >= config.max_depth:
                break
            active = [f for f in frontier if f[1].size >= 2 * config.min_leaf_size]
            jobs = [(rows, nodes[i].model, nodes[i].train_loss, key) for i, rows, key in active]
            results = _run_batches(jobs, data, config, pool)
            level_evals = 0
            next_frontier = []
            for (i, rows, key), res in zip(active, results):
                level_evals += res.split_evals
                stats["fit_iterations"] += res.iterations
                if res.best_split is None:
                    continue
                go_left = res.best_split.left_mask(data.contexts[rows], schema)
                left_rows, right_rows = rows[go_left], rows[~go_left]
                left = Node(model=res.left_model, n_train=left_rows.size,
                            train_loss=res.child_losses[0])
                right = Node(model=res.right_model, n_train=right_rows.size,
                             train_loss=res.child_losses[1])
                nodes.append(left)
                nodes.append(right)
                parent = nodes[i]
                parent.split = res.best_split
                parent.left, parent.right = len(nodes) - 2, len(nodes) - 1
                next_frontier.append((parent.left, left_rows, 2 * key))
                next_frontier.append((parent.right, right_rows, 2 * key + 1))
            stats["split_evals"] += level_evals
            elapsed = int((time.perf_counter() - start) * 1000)
            stats["levels"].append({"depth": depth, "nodes": len(active),
                                    "split_evals": level_evals, "elapsed_ms": elapsed})
            log.info("depth=%d nodes=%d split_evals=%d elapsed_ms=%d",
                     depth, len(active), level_evals, elapsed)
            frontier = next_frontier
            depth += 1
    finally:
        if pool is not None:
            pool.shutdown()
    tree = Tree(schema, nodes, config.leaf_family)
    tree.stats = stats
    return tree


def fit_context_free(data: Dataset, family: str = "mnl", fit_config: FitConfig = FitConfig()) -> Tree:
    """Single-segment model, i.e. a depth-0 tree."""
    return grow(data, TrainConfig(leaf_family=family, max_depth=0, min_leaf_size=1,
                                  fit_config=fit_config))
