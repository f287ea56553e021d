"""Comparison methods: cluster contexts with K-means, then fit one model per cluster.

Numeric contexts are standardized and categorical ones one-hot encoded before
clustering. A context-free model is the ``K = 1`` case.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.cluster import KMeans

from . import serial
from .data import ContextSchema, Dataset
from .leaves import FitConfig, get_family, model_from_dict

FORMAT = "mstkm-v1"
N_INIT = 10
MAX_ITER = 300


def kmeans(X, k: int, seed: int = 0, n_init: int = N_INIT, max_iter: int = MAX_ITER):
    """Lloyd iterations from k-means++ seeds; best of ``n_init`` restarts by inertia.

    Returns ``(assignments, centroids)``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("kmeans needs a non-empty 2-D matrix")
    if k < 1:
        raise ValueError("k must be at least 1")
    n_distinct = np.unique(X, axis=0).shape[0] if k > 1 else 1
    if k > n_distinct:
        raise ValueError(f"k={k} exceeds the {n_distinct} distinct points")
    if k == 1:
        centroid = X.mean(axis=0, keepdims=True)
        return np.zeros(X.shape[0], dtype=np.int64), centroid
    km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, max_iter=max_iter, tol=0.0,
                algorithm="lloyd", random_state=int(seed) % (2**32))
    labels = km.fit_predict(X).astype(np.int64)
    return labels, km.cluster_centers_


class ContextEncoder:
    """Standardize numeric columns, one-hot encode categorical ones."""

    def __init__(self, schema: ContextSchema, mean, scale):
        self.schema = schema
        self.mean = np.asarray(mean, dtype=float)
        self.scale = np.asarray(scale, dtype=float)

    @property
    def numeric(self) -> list[int]:
        return [j for j, v in enumerate(self.schema.variables) if not v.is_categorical]

    @classmethod
    def fit(cls, schema: ContextSchema, contexts) -> ContextEncoder:
        contexts = np.asarray(contexts, dtype=float)
        cols = [j for j, v in enumerate(schema.variables) if not v.is_categorical]
        mean = contexts[:, cols].mean(axis=0) if cols else np.zeros(0)
        scale = contexts[:, cols].std(axis=0) if cols else np.zeros(0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(schema, mean, scale)

    def transform(self, contexts) -> np.ndarray:
        contexts = np.asarray(contexts, dtype=float)
        blocks = []
        k = 0
        for j, var in enumerate(self.schema.variables):
            if var.is_categorical:
                codes = contexts[:, j].astype(np.int64)
                blocks.append((codes[:, None] == np.arange(len(var.categories))[None, :]).astype(float))
            else:
                blocks.append(((contexts[:, j] - self.mean[k]) / self.scale[k])[:, None])
                k += 1
        return np.hstack(blocks) if blocks else np.zeros((contexts.shape[0], 0))


class ClusteredModel:
    """Nearest-centroid routing in encoded context space to per-cluster models."""

    def __init__(self, encoder: ContextEncoder, centroids, models: list, family: str):
        self.encoder = encoder
        self.centroids = np.asarray(centroids, dtype=float)
        self.models = list(models)
        self.family = family
        self.selection: dict = {}
        if self.centroids.shape[0] != len(self.models) or not self.models:
            raise ValueError("need one model per centroid and at least one cluster")

    @property
    def schema(self) -> ContextSchema:
        return self.encoder.schema

    @property
    def k(self) -> int:
        return len(self.models)

    def assign(self, contexts) -> np.ndarray:
        Z = self.encoder.transform(contexts)
        d2 = ((Z[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)

    def _partition(self, data: Dataset):
        labels = self.assign(data.contexts)
        return [np.nonzero(labels == c)[0] for c in range(self.k)]

    def predict(self, data: Dataset) -> np.ndarray:
        out = None
        for c, idx in enumerate(self._partition(data)):
            if idx.size == 0:
                continue
            p = self.models[c].predict(data.payload.take(idx))
            if out is None:
                out = np.zeros((len(data),) + p.shape[1:])
            out[idx] = p
        if out is None:
            width = (data.payload.h_max + 1,) if data.kind == "choice" else ()
            out = np.zeros((0,) + width)
        return out

    def loss(self, data: Dataset) -> float:
        return math.fsum(self.models[c].loss(data.payload.take(idx))
                         for c, idx in enumerate(self._partition(data)) if idx.size)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "family": self.family,
            "schema": self.schema.to_dict(),
            "standardization": {"mean": self.encoder.mean.tolist(),
                                "scale": self.encoder.scale.tolist()},
            "centroids": self.centroids.tolist(),
            "models": [m.to_dict() for m in self.models],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ClusteredModel:
        if doc.get("format") != FORMAT:
            raise serial.DecodeError(f"expected format {FORMAT!r}, found {doc.get('format')!r}")
        try:
            schema = ContextSchema.from_dict(doc["schema"])
            enc = ContextEncoder(schema, doc["standardization"]["mean"],
                                 doc["standardization"]["scale"])
            return cls(enc, doc["centroids"], [model_from_dict(m) for m in doc["models"]],
                       doc["family"])
        except (KeyError, TypeError, ValueError) as exc:
            raise serial.DecodeError(f"invalid clustered model: {exc!r}") from None

    def dumps(self) -> str:
        return serial.dumps(self.to_dict())

    @classmethod
    def loads(cls, text) -> ClusteredModel:
        return cls.from_dict(serial.loads(text, FORMAT))

    def save(self, path) -> None:
        serial.atomic_write(path, self.dumps())


def cluster_contexts(train: Dataset, k: int, seed: int = 0):
    """Fit the encoder and K-means; returns ``(encoder, assignments, centroids)``."""
    enc = ContextEncoder.fit(train.schema, train.contexts)
    labels, centroids = kmeans(enc.transform(train.contexts), k, seed)
    return enc, labels, centroids


def fit_clustered(train: Dataset, k: int, family: str = "mnl",
                  fit_config: FitConfig = FitConfig(), seed: int = 0,
                  clustering=None) -> ClusteredModel:
    """K-means on the contexts, then one ``family`` model per cluster.

    ``clustering`` may pass a precomputed ``cluster_contexts`` result so
    several families can share one clustering.
    """
    cls = get_family(family)
    enc, labels, centroids = clustering or cluster_contexts(train, k, seed)
    models = []
    for c in range(centroids.shape[0]):
        idx = np.nonzero(labels == c)[0]
        if idx.size == 0:
            raise ValueError(f"cluster {c} is empty")
        models.append(cls.fit(train.payload.take(idx), fit_config).model)
    return ClusteredModel(enc, centroids, models, family)


def tune_k(train: Dataset, validation: Dataset, k_max: int, family: str = "mnl",
           fit_config: FitConfig = FitConfig(), seed: int = 0, workers: int = 1,
           cache: dict | None = None) -> ClusteredModel:
    """Fit ``K = 1..k_max`` and keep the one with the smallest validation loss.

    Ties go to the smaller K. ``cache`` maps K to clusterings and is filled
    in place, so a second family can reuse the K-means runs.
    """
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    cache = {} if cache is None else cache

    def one(k):
        if k not in cache:
            cache[k] = cluster_contexts(train, k, seed)
        model = fit_clustered(train, k, family, fit_config, seed, cache[k])
        return model, model.loss(validation) / len(validation)

    ks = list(range(1, k_max + 1))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, ks))
    else:
        results = [one(k) for k in ks]
    losses = [loss for _, loss in results]
    best = min(range(len(ks)), key=lambda i: (losses[i], ks[i]))
    model = results[best][0]
    model.selection = {"k": ks[best], "validation_loss": dict(zip(ks, losses))}
    return model


def context_free(train: Dataset, family: str = "mnl", fit_config: FitConfig = FitConfig()):
    """A single model fitted on all rows (the MNL / IR / LR / Const benchmarks)."""
    return get_family(family).fit(train.payload, fit_config).model
