"""Column-oriented containers for contexts, decisions and responses.

Contexts are held as a float matrix; categorical columns store the integer
position of the category label inside the schema (``-1`` marks a label the
schema has never seen).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

NUMERIC = "numeric"
CATEGORICAL = "categorical"


class SchemaError(ValueError):
    """Context does not conform to the schema it is routed against."""


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str = NUMERIC
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise ValueError(f"unknown variable kind {self.kind!r}")
        if self.kind == CATEGORICAL and len(set(self.categories)) != len(self.categories):
            raise ValueError(f"duplicate categories for {self.name!r}")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL


@dataclass(frozen=True)
class ContextSchema:
    variables: tuple[Variable, ...]

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ValueError("variable names must be unique")
        object.__setattr__(self, "variables", tuple(self.variables))

    @classmethod
    def numeric(cls, m: int, prefix: str = "x") -> ContextSchema:
        return cls(tuple(Variable(f"{prefix}{j}") for j in range(m)))

    def __len__(self) -> int:
        return len(self.variables)

    def __getitem__(self, j: int) -> Variable:
        return self.variables[j]

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def index(self, name: str) -> int:
        for j, v in enumerate(self.variables):
            if v.name == name:
                return j
        raise KeyError(name)

    def code(self, j: int, label) -> int:
        """Position of ``label`` among the categories of variable ``j`` or -1."""
        try:
            return self.variables[j].categories.index(str(label))
        except ValueError:
            return -1

    def encode(self, context, strict: bool = False) -> np.ndarray:
        """Encode one raw context (sequence or mapping by name) to a float row."""
        if isinstance(context, dict):
            try:
                context = [context[name] for name in self.names]
            except KeyError as exc:
                raise SchemaError(f"context is missing variable {exc.args[0]!r}") from None
        if len(context) != len(self.variables):
            raise SchemaError(
                f"context has {len(context)} values, schema expects {len(self.variables)}"
            )
        row = np.empty(len(self.variables))
        for j, (var, value) in enumerate(zip(self.variables, context)):
            if var.is_categorical:
                code = self.code(j, value)
                if code < 0 and strict:
                    raise SchemaError(f"unknown category {value!r} for {var.name!r}")
                row[j] = code
            else:
                value = float(value)
                if not np.isfinite(value):
                    raise SchemaError(f"non-finite value for {var.name!r}")
                row[j] = value
        return row

    def encode_many(self, contexts, strict: bool = False) -> np.ndarray:
        return np.array([self.encode(c, strict) for c in contexts]).reshape(-1, len(self))

    def decode_value(self, j: int, value: float):
        var = self.variables[j]
        if var.is_categorical:
            code = int(value)
            return var.categories[code] if code >= 0 else None
        return float(value)

    def to_dict(self) -> list[dict]:
        out = []
        for v in self.variables:
            entry = {"name": v.name, "kind": v.kind}
            if v.is_categorical:
                entry["categories"] = list(v.categories)
            out.append(entry)
        return out

    @classmethod
    def from_dict(cls, entries: list[dict]) -> ContextSchema:
        return cls(
            tuple(
                Variable(e["name"], e["kind"], tuple(e.get("categories", ())))
                for e in entries
            )
        )


@dataclass
class ChoicePayload:
    """Assortments offered to each user and the option they picked.

    ``features`` is zero padded to the largest assortment; ``choices`` uses 0
    for no-purchase and ``h`` (1-based) for the h-th offered option.
    ``option_ids`` identifies options across assortments and is only needed
    by the option-specific MNL.
    """

    features: np.ndarray
    n_options: np.ndarray
    choices: np.ndarray
    option_ids: np.ndarray | None = None

    kind = "choice"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 3:
            raise ValueError("features must be (n, H_max, q)")
        self.n_options = np.asarray(self.n_options, dtype=np.int64)
        self.choices = np.asarray(self.choices, dtype=np.int64)
        n, h_max, _ = self.features.shape
        if self.n_options.shape != (n,) or self.choices.shape != (n,):
            raise ValueError("n_options and choices must have one entry per row")
        if n and (self.n_options.min() < 1 or self.n_options.max() > h_max):
            raise ValueError("every assortment needs between 1 and H_max options")
        if n and (self.choices.min() < 0 or np.any(self.choices > self.n_options)):
            raise ValueError("choices must lie in {0, ..., H}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("option features must be finite")
        if self.option_ids is not None:
            self.option_ids = np.asarray(self.option_ids, dtype=np.int64)
            if self.option_ids.shape != (n, h_max):
                raise ValueError("option_ids must be (n, H_max)")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def h_max(self) -> int:
        return self.features.shape[1]

    @property
    def n_features(self) -> int:
        return self.features.shape[2]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.h_max)[None, :] < self.n_options[:, None]

    def take(self, idx) -> ChoicePayload:
        return ChoicePayload(
            self.features[idx],
            self.n_options[idx],
            self.choices[idx],
            None if self.option_ids is None else self.option_ids[idx],
        )

    @classmethod
    def from_assortments(cls, assortments: Sequence, choices, option_ids=None) -> ChoicePayload:
        """Build from a ragged list of ``(H_i, q)`` arrays."""
        arrays = [np.atleast_2d(np.asarray(a, dtype=float)) for a in assortments]
        h_max = max(a.shape[0] for a in arrays)
        q = arrays[0].shape[1]
        feats = np.zeros((len(arrays), h_max, q))
        ids = None if option_ids is None else -np.ones((len(arrays), h_max), dtype=np.int64)
        for i, a in enumerate(arrays):
            if a.shape[1] != q:
                raise ValueError("inconsistent option feature dimension")
            feats[i, : a.shape[0]] = a
            if ids is not None:
                ids[i, : a.shape[0]] = option_ids[i]
        return cls(feats, [a.shape[0] for a in arrays], choices, ids)


@dataclass
class AuctionPayload:
    """Submitted bids and win/loss outcomes.

    ``levels`` holds the sorted distinct bid values of the dataset the payload
    was cut from, and ``level_index`` maps each row to its level; subsets keep
    the parent's levels so per-level counts line up across tree nodes.
    """

    bids: np.ndarray
    wins: np.ndarray
    levels: np.ndarray | None = None
    level_index: np.ndarray | None = None

    kind = "auction"

    def __post_init__(self):
        self.bids = np.asarray(self.bids, dtype=float)
        self.wins = np.asarray(self.wins, dtype=float)
        if self.bids.shape != self.wins.shape or self.bids.ndim != 1:
            raise ValueError("bids and wins must be 1-D and aligned")
        if not np.all(np.isfinite(self.bids)):
            raise ValueError("bids must be finite")
        if self.levels is None:
            self.levels, self.level_index = np.unique(self.bids, return_inverse=True)
        self.level_index = np.asarray(self.level_index, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return self.bids.shape[0]

    def take(self, idx) -> AuctionPayload:
        return AuctionPayload(self.bids[idx], self.wins[idx], self.levels, self.level_index[idx])

    def level_counts(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Distinct bids present with their win counts and row counts."""
        n_levels = len(self.levels)
        totals = np.bincount(self.level_index, minlength=n_levels).astype(float)
        wins = np.bincount(self.level_index, weights=self.wins, minlength=n_levels)
        present = totals > 0
        return self.levels[present], wins[present], totals[present]


@dataclass
class Dataset:
    schema: ContextSchema
    contexts: np.ndarray
    payload: ChoicePayload | AuctionPayload
    latent: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.contexts = np.asarray(self.contexts, dtype=float).reshape(-1, len(self.schema))
        if self.contexts.shape[0] != len(self.payload):
            raise ValueError("contexts and payload disagree on the row count")
        if np.isnan(self.contexts).any():
            raise SchemaError("missing context values are not supported")
        if self.latent is not None:
            self.latent = np.asarray(self.latent, dtype=np.int64)

    def __len__(self) -> int:
        return self.contexts.shape[0]

    @property
    def kind(self) -> str:
        return self.payload.kind

    def take(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(
            self.schema,
            self.contexts[idx],
            self.payload.take(idx),
            None if self.latent is None else self.latent[idx],
        )

    def split(self, *sizes: int) -> list[Dataset]:
        """Consecutive slices of the given sizes."""
        out, start = [], 0
        for size in sizes:
            out.append(self.take(np.arange(start, start + size)))
            start += size
        return out
