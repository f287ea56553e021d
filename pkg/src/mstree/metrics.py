"""Evaluation metrics and report tables.

Choice predictions are ``(n, H_max + 1)`` matrices with the no-purchase
probability in column 0 and zeros in padded columns. Auction predictions are
win probabilities, one per row.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import serial
from .data import Dataset

NLL_FLOOR = 1e-12
LEAF_MIN_ROWS = 50

# metrics where larger values are better
HIGHER_IS_BETTER = {"auc"}


def predict(model, data: Dataset) -> np.ndarray:
    """Predictions of a tree, clustered model, bare leaf model or precomputed array."""
    if isinstance(model, np.ndarray):
        if model.shape[0] != len(data):
            raise ValueError("prediction array does not match the dataset")
        return model
    if hasattr(model, "payload_kind"):
        return model.predict(data.payload)
    return model.predict(data)


def _realized(payload) -> np.ndarray:
    if payload.kind == "choice":
        return payload.choices
    return payload.wins


def row_squared_error(probs: np.ndarray, payload) -> np.ndarray:
    """Brier error per row; for choices it sums over all H+1 outcomes."""
    if payload.kind == "choice":
        probs = np.asarray(probs, dtype=float)
        n = probs.shape[0]
        err = np.sum(probs * probs, axis=1)
        p_real = probs[np.arange(n), payload.choices]
        return err - 2.0 * p_real + 1.0
    return (np.asarray(probs, dtype=float) - payload.wins) ** 2


def row_nll(probs: np.ndarray, payload) -> np.ndarray:
    """Negative log-probability of the realized outcome, floored at ``NLL_FLOOR``."""
    probs = np.asarray(probs, dtype=float)
    if payload.kind == "choice":
        p = probs[np.arange(probs.shape[0]), payload.choices]
    else:
        p = np.where(payload.wins > 0.5, probs, 1.0 - probs)
    return -np.log(np.maximum(p, NLL_FLOOR))


def row_abs_error(probs: np.ndarray, true_probs: np.ndarray, payload,
                  include_no_purchase: bool = False) -> np.ndarray:
    """Mean absolute deviation from the generative probabilities per row.

    Choice rows average over the offered options, plus the no-purchase entry
    when ``include_no_purchase`` is set.
    """
    probs = np.asarray(probs, dtype=float)
    true_probs = np.asarray(true_probs, dtype=float)
    if probs.shape != true_probs.shape:
        raise ValueError(f"prediction shape {probs.shape} does not match truth {true_probs.shape}")
    if payload.kind != "choice":
        return np.abs(probs - true_probs)
    diff = np.abs(probs - true_probs)
    offered = diff[:, 1:] * payload.mask
    total = offered.sum(axis=1)
    count = payload.n_options.astype(float)
    if include_no_purchase:
        total = total + diff[:, 0]
        count = count + 1.0
    return total / count


def _mean(values: np.ndarray) -> float:
    if values.size == 0:
        raise ValueError("metric undefined on an empty test set")
    return math.fsum(values) / values.size


def mae_vs_truth(model, truth, test: Dataset, include_no_purchase: bool = False,
                 posterior: bool = False) -> float:
    """Mean absolute error of predicted response probabilities against the ground truth."""
    true = truth.true_probs(test, posterior=posterior)
    return _mean(row_abs_error(predict(model, test), true, test.payload, include_no_purchase))


def brier(model, test: Dataset) -> float:
    return _mean(row_squared_error(predict(model, test), test.payload))


mse = brier


def mean_nll(model, test: Dataset) -> float:
    return _mean(row_nll(predict(model, test), test.payload))


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties counted 1/2."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    pos = labels > 0.5
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(scores, method="average")
    u = math.fsum(ranks[pos]) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auc(model, test: Dataset) -> float:
    if test.kind != "auction":
        raise ValueError("AUC is defined for win/loss outcomes")
    return roc_auc(predict(model, test), test.payload.wins)


def row_metric(metric: str, probs, data: Dataset, truth=None, include_no_purchase=False):
    """Per-row values of an additive metric (``mse``, ``nll`` or ``mae``)."""
    if metric == "mse":
        return row_squared_error(probs, data.payload)
    if metric == "nll":
        return row_nll(probs, data.payload)
    if metric == "mae":
        if truth is None:
            raise ValueError("mae needs a ground truth")
        return row_abs_error(probs, truth.true_probs(data), data.payload, include_no_purchase)
    raise ValueError(f"metric {metric!r} is not row additive")


def metric_value(metric: str, model, data: Dataset, truth=None,
                 include_no_purchase: bool = False) -> float:
    if metric == "auc":
        return auc(model, data)
    probs = predict(model, data)
    return _mean(row_metric(metric, probs, data, truth, include_no_purchase))


@dataclass
class LeafImprovement:
    leaf_id: int
    n: int
    metric_a: float
    metric_b: float
    included: bool

    @property
    def improvement_pct(self) -> float | None:
        if self.metric_b == 0.0:
            return 0.0 if self.metric_a == 0.0 else None
        return 100.0 * (self.metric_b - self.metric_a) / self.metric_b


def per_leaf_improvement(model_a, model_b, router, test: Dataset, metric: str = "mse",
                         threshold: int = LEAF_MIN_ROWS) -> list[LeafImprovement]:
    """Relative improvement of ``model_a`` over ``model_b`` inside each leaf of ``router``.

    Leaves with ``threshold`` rows or fewer are reported but flagged as
    excluded.
    """
    pa = predict(model_a, test)
    pb = predict(model_b, test)
    ra = row_metric(metric, pa, test)
    rb = row_metric(metric, pb, test)
    out = []
    for leaf_id, idx in enumerate(router.leaf_partition(test)):
        if idx.size == 0:
            out.append(LeafImprovement(leaf_id, 0, math.nan, math.nan, False))
            continue
        out.append(LeafImprovement(leaf_id, int(idx.size), _mean(ra[idx]), _mean(rb[idx]),
                                   idx.size > threshold))
    return out


@dataclass
class MetricsReport:
    """Overall metrics, optional per-leaf breakdown and optional labelled slices."""

    overall: dict = field(default_factory=dict)
    per_leaf: dict = field(default_factory=dict)
    slices: dict = field(default_factory=dict)
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "format": "mst-metrics-v1",
            "n": self.n,
            "overall": dict(self.overall),
            "per_leaf": {str(k): v for k, v in sorted(self.per_leaf.items())},
            "slices": {str(k): v for k, v in self.slices.items()},
        }

    def dumps(self) -> str:
        return serial.dumps(_finite(self.to_dict()))

    def to_tsv(self) -> str:
        names = list(self.overall)
        lines = ["scope\tn\t" + "\t".join(names)]
        lines.append("overall\t%d\t" % self.n + "\t".join(_fmt(self.overall[k]) for k in names))
        for leaf_id, entry in sorted(self.per_leaf.items()):
            lines.append(f"leaf {leaf_id}\t{entry['n']}\t"
                         + "\t".join(_fmt(entry.get(k)) for k in names))
        for label, entry in self.slices.items():
            lines.append(f"{label}\t{entry['n']}\t" + "\t".join(_fmt(entry.get(k)) for k in names))
        return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    return format(float(x), ".17g")


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def evaluate(model, test: Dataset, metrics=("mse", "nll"), truth=None, router=None,
             slices: np.ndarray | None = None, include_no_purchase: bool = False) -> MetricsReport:
    """Compute ``metrics`` overall, per leaf of ``router`` and per slice label."""
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    probs = predict(model, test)
    report = MetricsReport(n=len(test))

    def values(idx):
        out = {}
        sub = test.take(idx)
        for m in metrics:
            if m == "auc":
                try:
                    out[m] = roc_auc(probs[idx], sub.payload.wins)
                except ValueError:
                    out[m] = math.nan
            else:
                out[m] = _mean(row_metric(m, probs[idx], sub, truth, include_no_purchase))
        return out

    report.overall = values(np.arange(len(test)))
    if router is not None:
        for leaf_id, idx in enumerate(router.leaf_partition(test)):
            entry = {"n": int(idx.size)}
            if idx.size:
                entry.update(values(idx))
            report.per_leaf[leaf_id] = entry
    if slices is not None:
        slices = np.asarray(slices)
        for label in np.unique(slices):
            idx = np.nonzero(slices == label)[0]
            entry = {"n": int(idx.size)}
            entry.update(values(idx))
            report.slices[str(label)] = entry
    return report


def comparison_table(results: dict, baseline: str | None = None,
                     higher_is_better: bool = False) -> str:
    """Tab-separated table with one row per model and one column per slice.

    ``results`` maps model name to ``{slice label: value}``. The last two
    columns hold the slice average and the percentage improvement of that
    average over ``baseline`` (the first model when not given).
    """
    if not results:
        raise ValueError("no results to tabulate")
    models = list(results)
    labels = list(results[models[0]])
    baseline = baseline or models[0]
    avgs = {m: math.fsum(results[m][s] for s in labels) / len(labels) for m in models}
    base = avgs[baseline]
    lines = ["model\t" + "\t".join(str(s) for s in labels) + "\tAvg.\t% Imp."]
    for m in models:
        if base == 0:
            imp = math.nan
        elif higher_is_better:
            imp = 100.0 * (avgs[m] - base) / abs(base)
        else:
            imp = 100.0 * (base - avgs[m]) / abs(base)
        cells = [_short(results[m][s]) for s in labels] + [_short(avgs[m]), _short(imp, 2)]
        lines.append(m + "\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"


def _short(x, digits: int = 6) -> str:
    if x is None or math.isnan(x):
        return "NA"
    return f"{x:.{digits}f}" if digits == 2 else f"{x:.{digits}g}"
