"""Binary segmentation tree with a response model in every leaf."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import serial
from .data import CATEGORICAL, NUMERIC, ContextSchema, Dataset, SchemaError
from .leaves import model_from_dict

FORMAT = "mst-v1"


@dataclass(frozen=True)
class Split:
    """``x[variable] <= threshold`` (numeric) or ``x[variable] == threshold`` (categorical).

    Rows satisfying the test go to the left child. For categorical splits the
    threshold is the category label.
    """

    variable: int
    kind: str
    threshold: float | str

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if self.kind == NUMERIC:
            object.__setattr__(self, "threshold", float(self.threshold))
        else:
            object.__setattr__(self, "threshold", str(self.threshold))

    def left_mask(self, contexts: np.ndarray, schema: ContextSchema) -> np.ndarray:
        column = contexts[:, self.variable]
        if self.kind == NUMERIC:
            return column <= self.threshold
        code = schema.code(self.variable, self.threshold)
        if code < 0:
            raise SchemaError(f"split category {self.threshold!r} not in schema")
        return column == code

    def render(self, schema: ContextSchema) -> str:
        name = schema[self.variable].name
        if self.kind == NUMERIC:
            return f"{name} ≤ {self.threshold:.6g}"
        return f"{name} = {self.threshold}"

    def to_dict(self, schema: ContextSchema) -> dict:
        return {"variable": self.variable, "name": schema[self.variable].name,
                "kind": self.kind, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> Split:
        return cls(int(d["variable"]), d["kind"], d["threshold"])


@dataclass
class Node:
    """One arena slot. Internal nodes keep the model fitted on their rows
    during growth so pruning can collapse them without refitting."""

    split: Split | None = None
    left: int = -1
    right: int = -1
    model: object | None = None
    leaf_id: int = -1
    n_train: int = 0
    train_loss: float = math.nan
    extra: dict = field(default_factory=dict)

    @property
    def is_leaf(self) -> bool:
        return self.split is None


class Tree:
    """Immutable market segmentation tree.

    Parameters
    ----------
    schema : ContextSchema
    nodes : list of Node
        Arena; children are referenced by position.
    family : str
        Leaf-model family name.
    root : int
    """

    def __init__(self, schema: ContextSchema, nodes: list[Node], family: str, root: int = 0):
        self.schema = schema
        self.nodes = nodes
        self.family = family
        self.root = root
        self.stats: dict = {}
        self._validate()
        self._leaf_nodes = self._number_leaves()

    @classmethod
    def single_leaf(cls, schema, model, family=None, n_train=0, train_loss=math.nan) -> Tree:
        node = Node(model=model, n_train=n_train, train_loss=train_loss)
        return cls(schema, [node], family or model.family)

    def _validate(self):
        seen = set()
        stack = [self.root]
        while stack:
            i = stack.pop()
            if i in seen or not 0 <= i < len(self.nodes):
                raise ValueError("tree nodes must form a binary tree")
            seen.add(i)
            node = self.nodes[i]
            if node.split is None:
                if node.model is None:
                    raise ValueError("every leaf needs a model")
                continue
            if node.split.kind == CATEGORICAL:
                if self.schema.code(node.split.variable, node.split.threshold) < 0:
                    raise ValueError(f"split category {node.split.threshold!r} not in schema")
            if not 0 <= node.split.variable < len(self.schema):
                raise ValueError("split variable outside the schema")
            stack.extend([node.left, node.right])

    def _number_leaves(self) -> list[int]:
        leaves = []
        stack = [self.root]
        while stack:
            i = stack.pop()
            node = self.nodes[i]
            if node.is_leaf:
                node.leaf_id = len(leaves)
                leaves.append(i)
            else:
                node.leaf_id = -1
                stack.extend([node.right, node.left])
        return leaves

    # -- structure -----------------------------------------------------------

    @property
    def n_leaves(self) -> int:
        return len(self._leaf_nodes)

    @property
    def leaf_nodes(self) -> list[int]:
        return list(self._leaf_nodes)

    def leaf(self, leaf_id: int) -> Node:
        return self.nodes[self._leaf_nodes[leaf_id]]

    @property
    def depth(self) -> int:
        best = 0
        stack = [(self.root, 0)]
        while stack:
            i, d = stack.pop()
            node = self.nodes[i]
            if node.is_leaf:
                best = max(best, d)
            else:
                stack.extend([(node.left, d + 1), (node.right, d + 1)])
        return best

    def internal_nodes(self) -> list[int]:
        out = []
        stack = [self.root]
        while stack:
            i = stack.pop()
            if not self.nodes[i].is_leaf:
                out.append(i)
                stack.extend([self.nodes[i].right, self.nodes[i].left])
        return out

    # -- routing -------------------------------------------------------------

    def _check_contexts(self, contexts: np.ndarray, strict: bool) -> np.ndarray:
        contexts = np.asarray(contexts, dtype=float)
        if contexts.ndim == 1:
            contexts = contexts[None, :]
        if contexts.shape[1] != len(self.schema):
            raise SchemaError(
                f"contexts have {contexts.shape[1]} columns, schema expects {len(self.schema)}"
            )
        if strict:
            for j, var in enumerate(self.schema.variables):
                if var.is_categorical and np.any(contexts[:, j] < 0):
                    raise SchemaError(f"unknown category for {var.name!r}")
        return contexts

    def route_nodes(self, contexts, strict: bool = False) -> np.ndarray:
        """Arena index of the leaf reached by every row of an encoded context matrix."""
        contexts = self._check_contexts(contexts, strict)
        out = np.empty(contexts.shape[0], dtype=np.int64)
        stack = [(self.root, np.arange(contexts.shape[0]))]
        while stack:
            i, idx = stack.pop()
            node = self.nodes[i]
            if node.is_leaf:
                out[idx] = i
                continue
            go_left = node.split.left_mask(contexts[idx], self.schema)
            stack.append((node.right, idx[~go_left]))
            stack.append((node.left, idx[go_left]))
        return out

    def route_rows(self, contexts, strict: bool = False) -> np.ndarray:
        nodes = self.route_nodes(contexts, strict)
        lookup = np.array([n.leaf_id for n in self.nodes], dtype=np.int64)
        return lookup[nodes]

    def route(self, context, strict: bool = False) -> int:
        """Leaf id for one raw context (sequence or mapping of variable values)."""
        row = self.schema.encode(context, strict=strict)
        return int(self.route_rows(row[None, :], strict)[0])

    def leaf_partition(self, data: Dataset) -> list[np.ndarray]:
        """Row indices reaching each leaf, indexed by leaf id."""
        leaf_ids = self.route_rows(data.contexts)
        order = np.argsort(leaf_ids, kind="stable")
        bounds = np.searchsorted(leaf_ids[order], np.arange(self.n_leaves + 1))
        return [order[bounds[k] : bounds[k + 1]] for k in range(self.n_leaves)]

    # -- prediction and loss ----------------------------------------------------

    def predict(self, data: Dataset) -> np.ndarray:
        out = None
        for leaf_id, idx in enumerate(self.leaf_partition(data)):
            if idx.size == 0:
                continue
            probs = self.leaf(leaf_id).model.predict(data.payload.take(idx))
            if out is None:
                out = np.zeros((len(data),) + probs.shape[1:])
            out[idx] = probs
        if out is None:
            width = (data.payload.h_max + 1,) if data.kind == "choice" else ()
            out = np.zeros((0,) + width)
        return out

    def loss(self, data: Dataset) -> float:
        """Summed leaf-model loss of the already fitted leaves (no refitting)."""
        if len(data) == 0:
            return 0.0
        total = 0.0
        for leaf_id, idx in enumerate(self.leaf_partition(data)):
            if idx.size:
                total += self.leaf(leaf_id).model.loss(data.payload.take(idx))
        return total

    # -- rendering -----------------------------------------------------------

    def describe(self, fmt: str = "text") -> str:
        if fmt == "text":
            return self._describe_text()
        if fmt == "dot":
            return self._describe_dot()
        raise ValueError(f"unknown format {fmt!r}")

    def _leaf_line(self, node: Node) -> str:
        return f"leaf {node.leaf_id}: {node.model.summary()} (n={node.n_train})"

    def _describe_text(self) -> str:
        lines = []
        stack = [(self.root, 0)]
        while stack:
            i, indent = stack.pop()
            node = self.nodes[i]
            pad = "  " * indent
            if node.is_leaf:
                lines.append(pad + self._leaf_line(node))
            else:
                lines.append(pad + node.split.render(self.schema))
                stack.extend([(node.right, indent + 1), (node.left, indent + 1)])
        return "\n".join(lines) + "\n"

    def _describe_dot(self) -> str:
        def quote(text):
            return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'

        lines = ["digraph mst {", "  node [fontname=Helvetica];"]
        for i in sorted(self._reachable()):
            node = self.nodes[i]
            if node.is_leaf:
                lines.append(f"  n{i} [shape=ellipse, label={quote(self._leaf_line(node))}];")
            else:
                lines.append(f"  n{i} [shape=box, label={quote(node.split.render(self.schema))}];")
                lines.append(f'  n{i} -> n{node.left} [label="yes"];')
                lines.append(f'  n{i} -> n{node.right} [label="no"];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def _reachable(self) -> list[int]:
        return self.internal_nodes() + self.leaf_nodes

    # -- serialization -------------------------------------------------------------

    def to_dict(self) -> dict:
        nodes = []
        for i, node in enumerate(self.nodes):
            nodes.append({
                "id": i,
                "split": None if node.split is None else node.split.to_dict(self.schema),
                "left": node.left,
                "right": node.right,
                "leaf_id": node.leaf_id,
                "n_train": int(node.n_train),
                "train_loss": None if math.isnan(node.train_loss) else float(node.train_loss),
                "model": None if node.model is None else node.model.to_dict(),
            })
        return {"format": FORMAT, "family": self.family, "schema": self.schema.to_dict(),
                "root": self.root, "nodes": nodes}

    @classmethod
    def from_dict(cls, doc: dict, model_loader=model_from_dict) -> Tree:
        if doc.get("format") != FORMAT:
            raise serial.DecodeError(f"expected format {FORMAT!r}, found {doc.get('format')!r}")
        try:
            schema = ContextSchema.from_dict(doc["schema"])
            nodes = []
            for k, entry in enumerate(doc["nodes"]):
                if entry["id"] != k:
                    raise serial.DecodeError("node ids must be consecutive")
                loss = entry.get("train_loss")
                nodes.append(Node(
                    split=None if entry["split"] is None else Split.from_dict(entry["split"]),
                    left=int(entry["left"]),
                    right=int(entry["right"]),
                    model=None if entry["model"] is None else model_loader(entry["model"]),
                    n_train=int(entry.get("n_train", 0)),
                    train_loss=math.nan if loss is None else float(loss),
                ))
            return cls(schema, nodes, doc["family"], int(doc["root"]))
        except serial.DecodeError:
            raise
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise serial.DecodeError(f"invalid tree document: {exc!r}") from None

    def dumps(self) -> str:
        return serial.dumps(self.to_dict())

    @classmethod
    def loads(cls, text) -> Tree:
        return cls.from_dict(serial.loads(text, FORMAT))

    def save(self, path) -> None:
        serial.atomic_write(path, self.dumps())

    @classmethod
    def load(cls, path) -> Tree:
        with open(path, "rb") as fh:
            return cls.loads(fh.read())

    def compact(self) -> Tree:
        """Copy holding only the nodes reachable from the root, renumbered preorder."""
        order = []
        stack = [self.root]
        while stack:
            i = stack.pop()
            order.append(i)
            if not self.nodes[i].is_leaf:
                stack.extend([self.nodes[i].right, self.nodes[i].left])
        remap = {old: new for new, old in enumerate(order)}
        nodes = []
        for old in order:
            src = self.nodes[old]
            nodes.append(Node(
                split=src.split,
                left=remap.get(src.left, -1) if src.split else -1,
                right=remap.get(src.right, -1) if src.split else -1,
                model=src.model, n_train=src.n_train, train_loss=src.train_loss,
                extra=dict(src.extra),
            ))
        out = Tree(self.schema, nodes, self.family, 0)
        out.stats = dict(self.stats)
        return out


def route(tree: Tree, context, strict: bool = False) -> int:
    return tree.route(context, strict)


def tree_loss(tree: Tree, data: Dataset) -> float:
    return tree.loss(data)


def serialize(tree: Tree) -> bytes:
    return tree.dumps().encode("utf-8")


def deserialize(blob) -> Tree:
    return Tree.loads(blob)


def describe(tree: Tree, fmt: str = "text") -> str:
    return tree.describe(fmt)


def same_structure(a: Tree, b: Tree, atol: float = 0.0) -> bool:
    """Structural and parameter equality (leaf models compared within ``atol``)."""

    def params_close(m1, m2):
        d1, d2 = m1.to_dict(), m2.to_dict()
        if d1.keys() != d2.keys() or d1["family"] != d2["family"]:
            return False
        for key in d1:
            if key == "family":
                continue
            x, y = np.asarray(d1[key], dtype=float), np.asarray(d2[key], dtype=float)
            if x.shape != y.shape or not np.allclose(x, y, rtol=0.0, atol=atol):
                return False
        return True

    def walk(i, j):
        n1, n2 = a.nodes[i], b.nodes[j]
        if n1.is_leaf != n2.is_leaf:
            return False
        if n1.is_leaf:
            return params_close(n1.model, n2.model)
        if n1.split != n2.split:
            return False
        return walk(n1.left, n2.left) and walk(n1.right, n2.right)

    return a.schema == b.schema and walk(a.root, b.root)


def is_subtree(small: Tree, big: Tree) -> bool:
    """True when ``small`` is ``big`` with some internal nodes collapsed to leaves."""

    def walk(i, j):
        n1, n2 = small.nodes[i], big.nodes[j]
        if n1.is_leaf:
            return True
        if n2.is_leaf or n1.split != n2.split:
            return False
        return walk(n1.left, n2.left) and walk(n1.right, n2.right)

    return walk(small.root, big.root)
