"""Synthetic datasets with known response probabilities.

All generators draw from a Philox counter-based generator keyed by the run
seed, so a ``(seed, n, params)`` triple always yields the same rows.
"""
from __future__ import annotations

import math

import numpy as np

from . import serial
from .data import (CATEGORICAL, NUMERIC, AuctionPayload, ChoicePayload, ContextSchema,
                   Dataset, Variable)
from .leaves import MNLModel, model_from_dict
from .tree import FORMAT, Node, Split, Tree

N_CONTEXTS = 4
N_FEATURES = 4
ASSORTMENT_SIZES = (2, 3, 4, 5)
BALANCE = 0.3
KMEANS_SIGMA = 0.08
BID_RANGE = (0.1, 10.0)
BID_TICK = 0.01


def make_rng(seed, *stream) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *stream])))


def _beta(rng, size=N_FEATURES) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size)


def _assortments(rng, n: int) -> ChoicePayload:
    h_max = max(ASSORTMENT_SIZES)
    n_options = rng.choice(np.asarray(ASSORTMENT_SIZES), size=n)
    features = rng.uniform(0.0, 1.0, (n, h_max, N_FEATURES))
    features *= (np.arange(h_max)[None, :] < n_options[:, None])[:, :, None]
    return ChoicePayload(features, n_options, np.zeros(n, dtype=np.int64))


def _sample_choices(rng, probs: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of one outcome per row of a probability matrix."""
    u = rng.uniform(0.0, 1.0, probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    choice = (cdf < u[:, None]).sum(axis=1)
    # guard against cdf[-1] falling a hair below u
    last = (probs > 0).shape[1] - 1 - np.argmax((probs > 0)[:, ::-1], axis=1)
    return np.minimum(choice, last)


class GroundTruth:
    """Generative model exposing exact response probabilities."""

    variant = ""

    def true_probs(self, data: Dataset, posterior: bool = False) -> np.ndarray:
        raise NotImplementedError

    def probs_one(self, context, decision):
        """True probabilities for one raw context and one decision."""
        context = np.asarray(self.schema.encode(context), dtype=float)[None, :]
        if self.kind == "choice":
            payload = ChoicePayload.from_assortments([decision], [0])
        else:
            payload = AuctionPayload([float(decision)], [0.0])
        return self.true_probs(Dataset(self.schema, context, payload))[0]

    def _check(self, data: Dataset) -> Dataset:
        """Reject the wrong row kind; re-encode categorical codes into the truth's schema."""
        if data.kind != self.kind:
            raise ValueError(f"{self.variant} truth cannot score {data.kind} rows")
        if data.schema == self.schema:
            return data
        if len(data.schema) != len(self.schema):
            raise ValueError("data and ground truth have different context arity")
        contexts = data.contexts.copy()
        for j, (ours, theirs) in enumerate(zip(self.schema.variables, data.schema.variables)):
            if ours.is_categorical != theirs.is_categorical:
                raise ValueError(f"context {j} differs in kind from the ground truth")
            if ours.is_categorical:
                lookup = np.array([self.schema.code(j, c) for c in theirs.categories] + [-1])
                codes = contexts[:, j].astype(np.int64)
                contexts[:, j] = lookup[np.where(codes < 0, len(theirs.categories), codes)]
        return Dataset(self.schema, contexts, data.payload, data.latent)

    def dumps(self) -> str:
        return serial.dumps(self.to_dict())

    def save(self, path) -> None:
        serial.atomic_write(path, self.dumps())


def true_probs(truth: GroundTruth, context, decision):
    return truth.probs_one(context, decision)


class ContextFreeTruth(GroundTruth):
    variant = "context-free-mnl"
    kind = "choice"

    def __init__(self, beta, schema=None):
        self.beta = np.asarray(beta, dtype=float)
        self.schema = schema or ContextSchema.numeric(N_CONTEXTS)

    def true_probs(self, data, posterior=False):
        data = self._check(data)
        return MNLModel(self.beta).predict(data.payload)

    def to_dict(self):
        tree = Tree.single_leaf(self.schema, MNLModel(self.beta))
        doc = tree.to_dict()
        doc["truth"] = {"variant": self.variant, "beta": self.beta.tolist()}
        return doc


class CMTTruth(GroundTruth):
    variant = "cmt"
    kind = "choice"

    def __init__(self, tree: Tree):
        self.tree = tree
        self.schema = tree.schema

    def true_probs(self, data, posterior=False):
        data = self._check(data)
        return self.tree.predict(data)

    def to_dict(self):
        doc = self.tree.to_dict()
        doc["truth"] = {"variant": self.variant}
        return doc


class KMeansTruth(GroundTruth):
    """Gaussian clusters of contexts, each with its own MNL.

    Rows that carry the latent cluster that generated them are scored with
    that cluster's MNL; otherwise (or with ``posterior=True``) the
    probabilities are averaged under the cluster posterior given the context.
    """

    variant = "kmeans-mixture"
    kind = "choice"

    def __init__(self, betas, means, weights, sigma=KMEANS_SIGMA, schema=None):
        self.betas = np.asarray(betas, dtype=float)
        self.means = np.asarray(means, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.sigma = float(sigma)
        self.schema = schema or ContextSchema.numeric(N_CONTEXTS)
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")

    @property
    def k(self) -> int:
        return self.betas.shape[0]

    def posterior(self, contexts) -> np.ndarray:
        contexts = np.asarray(contexts, dtype=float)
        d2 = ((contexts[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        logit = np.log(self.weights)[None, :] - d2 / (2.0 * self.sigma**2)
        logit -= logit.max(axis=1, keepdims=True)
        w = np.exp(logit)
        return w / w.sum(axis=1, keepdims=True)

    def true_probs(self, data, posterior=False):
        data = self._check(data)
        per_cluster = np.stack([MNLModel(b).predict(data.payload) for b in self.betas])
        if data.latent is not None and not posterior:
            return per_cluster[data.latent, np.arange(len(data))]
        w = self.posterior(data.contexts)
        return np.einsum("nk,knh->nh", w, per_cluster)

    def to_dict(self):
        return {"format": FORMAT, "schema": self.schema.to_dict(),
                "truth": {"variant": self.variant, "betas": self.betas.tolist(),
                          "means": self.means.tolist(), "weights": self.weights.tolist(),
                          "sigma": self.sigma}}


class WinCurve:
    """Monotone win probability: ``cap * sum_j w_j g_j(log bid)`` clipped to [0, 1].

    Each component ``g_j`` is a logistic step (``kind`` 0) or a linear ramp
    (``kind`` 1) in log-bid with location ``loc`` and width ``scale``.
    """

    family = "win-curve"

    def __init__(self, cap, weights, kinds, locs, scales):
        self.cap = float(cap)
        self.weights = np.asarray(weights, dtype=float)
        self.kinds = np.asarray(kinds, dtype=np.int64)
        self.locs = np.asarray(locs, dtype=float)
        self.scales = np.asarray(scales, dtype=float)

    def predict_bids(self, bids) -> np.ndarray:
        z = (np.log(np.asarray(bids, dtype=float))[..., None] - self.locs) / self.scales
        step = 0.5 * (1.0 + np.tanh(0.5 * z))
        ramp = np.clip(z + 0.5, 0.0, 1.0)
        g = np.where(self.kinds == 0, step, ramp)
        return np.clip(self.cap * (g @ self.weights), 0.0, 1.0)

    def summary(self) -> str:
        lo, hi = self.predict_bids(np.asarray(BID_RANGE))
        return f"win curve p({BID_RANGE[0]:g})={lo:.3f} p({BID_RANGE[1]:g})={hi:.3f}"

    def to_dict(self):
        return {"family": self.family, "cap": self.cap, "weights": self.weights.tolist(),
                "kinds": self.kinds.tolist(), "locs": self.locs.tolist(),
                "scales": self.scales.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["cap"], d["weights"], d["kinds"], d["locs"], d["scales"])


def _truth_model(d):
    return WinCurve.from_dict(d) if d["family"] == WinCurve.family else model_from_dict(d)


class AuctionTruth(GroundTruth):
    variant = "segmented-auction"
    kind = "auction"

    def __init__(self, tree: Tree):
        self.tree = tree
        self.schema = tree.schema

    @property
    def n_segments(self) -> int:
        return self.tree.n_leaves

    def segment_of(self, contexts) -> np.ndarray:
        return self.tree.route_rows(contexts)

    def true_probs(self, data, posterior=False):
        data = self._check(data)
        out = np.empty(len(data))
        for leaf_id, idx in enumerate(self.tree.leaf_partition(data)):
            out[idx] = self.tree.leaf(leaf_id).model.predict_bids(data.payload.bids[idx])
        return out

    def to_dict(self):
        doc = self.tree.to_dict()
        doc["truth"] = {"variant": self.variant}
        return doc


def truth_from_dict(doc: dict) -> GroundTruth:
    if doc.get("format") != FORMAT or "truth" not in doc:
        raise serial.DecodeError("not a ground-truth document")
    section = doc["truth"]
    variant = section.get("variant")
    schema = ContextSchema.from_dict(doc["schema"])
    if variant == ContextFreeTruth.variant:
        return ContextFreeTruth(section["beta"], schema)
    if variant == CMTTruth.variant:
        return CMTTruth(Tree.from_dict(doc))
    if variant == KMeansTruth.variant:
        return KMeansTruth(section["betas"], section["means"], section["weights"],
                           section["sigma"], schema)
    if variant == AuctionTruth.variant:
        return AuctionTruth(Tree.from_dict(doc, _truth_model))
    raise serial.DecodeError(f"unknown ground-truth variant {variant!r}")


def load_truth(path) -> GroundTruth:
    with open(path, "rb") as fh:
        return truth_from_dict(serial.loads(fh.read()))


# -- choice generators ------------------------------------------------------------


def _choice_dataset(rng, contexts, payload, probs_fn, schema, latent=None):
    data = Dataset(schema, contexts, payload, latent)
    payload.choices = _sample_choices(rng, probs_fn(data))
    return data


def gen_context_free(seed: int, n: int):
    """One global MNL; contexts are independent of the choices."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = make_rng(seed)
    truth = ContextFreeTruth(_beta(rng))
    contexts = rng.uniform(0.0, 1.0, (n, N_CONTEXTS))
    payload = _assortments(rng, n)
    return _choice_dataset(rng, contexts, payload, truth.true_probs, truth.schema), truth


def _random_cmt(rng, n_leaves: int, max_depth: int = 3) -> list[dict]:
    """Random tree over the unit box in which every split keeps >= 30% on each side.

    Leaves are split one at a time: a leaf of depth < ``max_depth`` and a
    variable are drawn uniformly, and the split point is redrawn uniformly
    over the leaf's range until both sides hold at least the balance
    fraction of the leaf's (uniform) context mass.
    """
    nodes = [{"lo": np.zeros(N_CONTEXTS), "hi": np.ones(N_CONTEXTS), "depth": 0, "split": None}]
    leaves = [0]
    while len(leaves) < n_leaves:
        eligible = [i for i in leaves if nodes[i]["depth"] < max_depth]
        i = eligible[int(rng.integers(len(eligible)))]
        node = nodes[i]
        j = int(rng.integers(N_CONTEXTS))
        lo, hi = node["lo"][j], node["hi"][j]
        while True:
            s = rng.uniform(lo, hi)
            frac = (s - lo) / (hi - lo)
            if BALANCE <= frac <= 1.0 - BALANCE:
                break
        left_hi = node["hi"].copy()
        left_hi[j] = s
        right_lo = node["lo"].copy()
        right_lo[j] = s
        node["split"] = (j, float(s))
        node["left"], node["right"] = len(nodes), len(nodes) + 1
        nodes.append({"lo": node["lo"].copy(), "hi": left_hi, "depth": node["depth"] + 1, "split": None})
        nodes.append({"lo": right_lo, "hi": node["hi"].copy(), "depth": node["depth"] + 1, "split": None})
        leaves.remove(i)
        leaves.extend([node["left"], node["right"]])
    return nodes


def gen_cmt_truth(seed: int, n: int, n_leaves: int | None = None):
    """Contexts route through a random balanced tree (4 to 7 leaves, depth <= 3) to leaf MNLs."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = make_rng(seed)
    n_leaves = int(rng.integers(4, 8)) if n_leaves is None else n_leaves
    raw = _random_cmt(rng, n_leaves)
    schema = ContextSchema.numeric(N_CONTEXTS)
    nodes = []
    for entry in raw:
        if entry["split"] is None:
            nodes.append(Node(model=MNLModel(_beta(rng))))
        else:
            j, s = entry["split"]
            nodes.append(Node(split=Split(j, NUMERIC, s), left=entry["left"], right=entry["right"]))
    truth = CMTTruth(Tree(schema, nodes, "mnl"))
    contexts = rng.uniform(0.0, 1.0, (n, N_CONTEXTS))
    payload = _assortments(rng, n)
    return _choice_dataset(rng, contexts, payload, truth.true_probs, schema), truth


def softmax(u) -> np.ndarray:
    e = np.exp(np.asarray(u, dtype=float) - np.max(u))
    return e / e.sum()


def gen_kmeans_truth(seed: int, n: int, sigma: float = KMEANS_SIGMA, k: int | None = None):
    """Gaussian context clusters (4 to 7) with one MNL per cluster."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = make_rng(seed)
    k = int(rng.integers(4, 8)) if k is None else k
    betas = np.stack([_beta(rng) for _ in range(k)])
    means = rng.uniform(0.0, 1.0, (k, N_CONTEXTS))
    weights = softmax(rng.uniform(-1.0, 1.0, k))
    truth = KMeansTruth(betas, means, weights, sigma)
    latent = rng.choice(k, size=n, p=weights)
    contexts = means[latent] + sigma * rng.standard_normal((n, N_CONTEXTS))
    payload = _assortments(rng, n)
    return _choice_dataset(rng, contexts, payload, truth.true_probs, truth.schema, latent), truth


# -- auctions ---------------------------------------------------------------------

AUCTION_SCHEMA = ContextSchema((
    Variable("area", NUMERIC),
    Variable("aspect", NUMERIC),
    Variable("fold", CATEGORICAL, ("above", "below")),
    Variable("channel", CATEGORICAL, ("display", "video", "native")),
    Variable("device", CATEGORICAL, ("desktop", "mobile", "tablet")),
    Variable("region", CATEGORICAL, ("east", "central", "west")),
))


def _random_segment_tree(rng, segments: int, schema: ContextSchema) -> list[dict]:
    """Random tree over mixed contexts with every split keeping >= 30% on each side.

    Region masses are exact: numeric contexts are uniform on [0, 1] and
    categories are equally likely, so a categorical equality split on a
    region that still allows ``c`` categories sends ``1/c`` of it left.
    """
    m = len(schema)
    root = {"lo": np.zeros(m), "hi": np.ones(m),
            "allowed": [tuple(range(len(v.categories))) for v in schema.variables], "split": None}
    nodes = [root]
    leaves = [0]
    while len(leaves) < segments:
        i = leaves[int(rng.integers(len(leaves)))]
        node = nodes[i]
        j = int(rng.integers(m))
        var = schema[j]
        left = {"lo": node["lo"].copy(), "hi": node["hi"].copy(),
                "allowed": list(node["allowed"]), "split": None}
        right = {"lo": node["lo"].copy(), "hi": node["hi"].copy(),
                 "allowed": list(node["allowed"]), "split": None}
        if var.is_categorical:
            allowed = node["allowed"][j]
            if not BALANCE <= 1.0 / len(allowed) <= 1.0 - BALANCE:
                continue
            code = allowed[int(rng.integers(len(allowed)))]
            split = Split(j, CATEGORICAL, var.categories[code])
            left["allowed"][j] = (code,)
            right["allowed"][j] = tuple(c for c in allowed if c != code)
        else:
            lo, hi = node["lo"][j], node["hi"][j]
            while True:
                s = rng.uniform(lo, hi)
                if BALANCE <= (s - lo) / (hi - lo) <= 1.0 - BALANCE:
                    break
            split = Split(j, NUMERIC, float(s))
            left["hi"][j] = s
            right["lo"][j] = s
        node["split"] = split
        node["left"], node["right"] = len(nodes), len(nodes) + 1
        nodes.extend([left, right])
        leaves.remove(i)
        leaves.extend([node["left"], node["right"]])
    return nodes


def _random_curve(rng) -> WinCurve:
    lo, hi = math.log(BID_RANGE[0]), math.log(BID_RANGE[1])
    n_comp = int(rng.integers(1, 4))
    kinds = rng.integers(0, 2, n_comp)
    locs = rng.uniform(lo + 0.5, hi - 0.5, n_comp)
    scales = np.where(kinds == 0, rng.uniform(0.1, 0.4, n_comp), rng.uniform(0.5, 2.0, n_comp))
    weights = rng.dirichlet(np.ones(n_comp))
    cap = rng.uniform(0.5, 1.0)
    return WinCurve(cap, weights, kinds, locs, scales)


def gen_auctions(seed: int, n: int, segments: int = 8, bid_range=BID_RANGE):
    """Auctions whose win curve depends on the context segment.

    Contexts mix numeric and categorical placement attributes; a random
    balanced tree maps them to ``segments`` segments with their own monotone
    win curves. Bids are log-uniform on ``bid_range`` rounded to 0.01.
    """
    if segments < 1:
        raise ValueError("segments must be at least 1")
    if n < 1:
        raise ValueError("n must be positive")
    rng = make_rng(seed)
    schema = AUCTION_SCHEMA
    raw = _random_segment_tree(rng, segments, schema)
    nodes = []
    for entry in raw:
        if entry["split"] is None:
            nodes.append(Node(model=_random_curve(rng)))
        else:
            nodes.append(Node(split=entry["split"], left=entry["left"], right=entry["right"]))
    truth = AuctionTruth(Tree(schema, nodes, WinCurve.family))
    contexts = np.empty((n, len(schema)))
    for j, var in enumerate(schema.variables):
        if var.is_categorical:
            contexts[:, j] = rng.integers(0, len(var.categories), n)
        else:
            contexts[:, j] = rng.uniform(0.0, 1.0, n)
    lo, hi = np.log(bid_range[0]), np.log(bid_range[1])
    bids = np.round(np.exp(rng.uniform(lo, hi, n)) / BID_TICK) * BID_TICK
    bids = np.clip(np.round(bids, 2), bid_range[0], bid_range[1])
    data = Dataset(schema, contexts, AuctionPayload(bids, np.zeros(n)))
    p = truth.true_probs(data)
    wins = (rng.uniform(0.0, 1.0, n) < p).astype(float)
    data = Dataset(schema, contexts, AuctionPayload(bids, wins))
    return data, truth


GENERATORS = {
    "context-free": gen_context_free,
    "cmt": gen_cmt_truth,
    "kmeans": gen_kmeans_truth,
    "auction": gen_auctions,
}
