"""CSV ingestion and export.

Two layouts are supported (see docs/FORMATS.md):

``choice-long``
    one line per offered option: ``session_id``, ``option_id``, context
    columns (prefix ``ctx_``), option feature columns (any other column) and
    ``chosen`` in {0, 1}. A session with no chosen line is a no-purchase.
``auction-flat``
    one line per auction: context columns, ``bid`` and ``win`` in {0, 1}.

An optional ``latent`` column carries the generating cluster of simulated
rows. Structural problems abort with the offending line number.
"""
from __future__ import annotations

import csv
import io
import operator
import re

import numpy as np

from . import serial
from .data import (CATEGORICAL, NUMERIC, AuctionPayload, ChoicePayload, ContextSchema,
                   Dataset, Variable)

CHOICE_LONG = "choice-long"
AUCTION_FLAT = "auction-flat"
FORMATS = (CHOICE_LONG, AUCTION_FLAT)
CONTEXT_PREFIX = "ctx_"
RESERVED_CHOICE = ("session_id", "option_id", "chosen", "latent")
RESERVED_AUCTION = ("bid", "win", "latent")


class IngestError(ValueError):
    """Structurally invalid input file."""


_OPS = {"<=": operator.le, ">=": operator.ge, "<": operator.lt, ">": operator.gt,
        "==": operator.eq, "!=": operator.ne, "=": operator.eq, "≤": operator.le,
        "≥": operator.ge}
_FILTER = re.compile(r"^\s*([^<>=!≤≥\s]+)\s*(<=|>=|==|!=|<|>|=|≤|≥)\s*(\S+)\s*$")


class RowFilter:
    """Keep lines whose numeric ``column`` satisfies ``column <op> value``."""

    def __init__(self, column: str, op: str, value: float):
        self.column = column
        self.op = op
        self.value = float(value)
        self._fn = _OPS[op]

    @classmethod
    def parse(cls, text: str) -> RowFilter:
        m = _FILTER.match(text)
        if not m:
            raise ValueError(f"cannot parse filter {text!r}; expected e.g. 'price<=4000'")
        try:
            return cls(m.group(1), m.group(2), float(m.group(3)))
        except ValueError:
            raise ValueError(f"filter value in {text!r} is not a number") from None

    def keep(self, value: float) -> bool:
        return bool(self._fn(value, self.value))

    def __repr__(self):
        return f"{self.column}{self.op}{self.value:g}"


def _number(text: str, what: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise IngestError(f"line {line}: {what} {text!r} is not a number") from None
    if not np.isfinite(value):
        raise IngestError(f"line {line}: {what} is not finite")
    return value


def _flag(text: str, what: str, line: int) -> int:
    if text.strip() not in ("0", "1", "0.0", "1.0"):
        raise IngestError(f"line {line}: {what} must be 0 or 1, got {text!r}")
    return int(float(text))


def _is_number(text: str) -> bool:
    try:
        return np.isfinite(float(text))
    except ValueError:
        return False


def _build_schema(names, columns, categorical, schema=None) -> ContextSchema:
    """Numeric unless listed in ``categorical`` or holding non-numeric values."""
    if schema is not None:
        if schema.names != list(names):
            raise IngestError(f"context columns {list(names)} do not match the schema {schema.names}")
        return schema
    variables = []
    for name, values in zip(names, columns):
        if name in categorical or not all(_is_number(v) for v in values):
            variables.append(Variable(name, CATEGORICAL, tuple(sorted(set(values)))))
        else:
            variables.append(Variable(name, NUMERIC))
    return ContextSchema(tuple(variables))


def _encode_contexts(schema: ContextSchema, columns, lines) -> np.ndarray:
    n = len(columns[0]) if columns else 0
    out = np.empty((n, len(schema)))
    for j, (var, values) in enumerate(zip(schema.variables, columns)):
        if var.is_categorical:
            lookup = {c: k for k, c in enumerate(var.categories)}
            out[:, j] = [lookup.get(v, -1) for v in values]
        else:
            for i, v in enumerate(values):
                out[i, j] = _number(v, f"context {var.name!r}", lines[i])
    return out


def _open_rows(source):
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, "rb") as fh:
            text = fh.read()
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IngestError(f"file is not UTF-8: {exc}") from None
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise IngestError("file is empty; a header row is required") from None
    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        raise IngestError("line 1: duplicate column names")
    return header, reader


def detect_format(path) -> str:
    header, _ = _open_rows(path)
    if "session_id" in header and "chosen" in header:
        return CHOICE_LONG
    if "bid" in header and "win" in header:
        return AUCTION_FLAT
    raise IngestError("cannot tell the layout from the header; pass the format explicitly")


def ingest(path, fmt: str | None = None, filters=(), categorical=(), context_columns=None,
           schema: ContextSchema | None = None) -> Dataset:
    """Read a dataset file. ``filters`` are ``RowFilter`` objects or strings."""
    fmt = fmt or detect_format(path)
    filters = [RowFilter.parse(f) if isinstance(f, str) else f for f in filters]
    if fmt == CHOICE_LONG:
        return _ingest_choice(path, filters, set(categorical), context_columns, schema)
    if fmt == AUCTION_FLAT:
        return _ingest_auction(path, filters, set(categorical), context_columns, schema)
    raise ValueError(f"unknown format {fmt!r}; choose from {FORMATS}")


def _check_filters(filters, header):
    for f in filters:
        if f.column not in header:
            raise IngestError(f"filter column {f.column!r} not in the header")


def _passes(filters, cells, col, line) -> bool:
    for f in filters:
        if not f.keep(_number(cells[col[f.column]], f"filter column {f.column!r}", line)):
            return False
    return True


def _ingest_auction(path, filters, categorical, context_columns, schema):
    header, reader = _open_rows(path)
    for name in ("bid", "win"):
        if name not in header:
            raise IngestError(f"line 1: missing required column {name!r}")
    _check_filters(filters, header)
    col = {h: k for k, h in enumerate(header)}
    ctx_names = list(context_columns) if context_columns else [
        h for h in header if h not in RESERVED_AUCTION]
    for name in ctx_names:
        if name not in col:
            raise IngestError(f"line 1: missing context column {name!r}")
    ctx_cols = [[] for _ in ctx_names]
    bids, wins, latent, lines = [], [], [], []
    for line, cells in enumerate(reader, start=2):
        if not cells:
            continue
        if len(cells) != len(header):
            raise IngestError(f"line {line}: expected {len(header)} fields, found {len(cells)}")
        if not _passes(filters, cells, col, line):
            continue
        for k, name in enumerate(ctx_names):
            value = cells[col[name]].strip()
            if value == "":
                raise IngestError(f"line {line}: missing value for context {name!r}")
            ctx_cols[k].append(value)
        bids.append(_number(cells[col["bid"]], "bid", line))
        wins.append(_flag(cells[col["win"]], "win", line))
        if "latent" in col:
            latent.append(int(_number(cells[col["latent"]], "latent", line)))
        lines.append(line)
    if not lines:
        raise IngestError("no data rows left after filtering")
    schema = _build_schema(ctx_names, ctx_cols, categorical, schema)
    contexts = _encode_contexts(schema, ctx_cols, lines)
    return Dataset(schema, contexts, AuctionPayload(bids, wins), latent or None)


def _ingest_choice(path, filters, categorical, context_columns, schema):
    header, reader = _open_rows(path)
    for name in ("session_id", "option_id", "chosen"):
        if name not in header:
            raise IngestError(f"line 1: missing required column {name!r}")
    _check_filters(filters, header)
    col = {h: k for k, h in enumerate(header)}
    if context_columns:
        ctx_names = list(context_columns)
    else:
        ctx_names = [h for h in header if h.startswith(CONTEXT_PREFIX)]
    feat_names = [h for h in header if h not in RESERVED_CHOICE and h not in ctx_names]
    if not feat_names:
        raise IngestError("line 1: no option feature columns")
    sessions: dict[str, dict] = {}
    for line, cells in enumerate(reader, start=2):
        if not cells:
            continue
        if len(cells) != len(header):
            raise IngestError(f"line {line}: expected {len(header)} fields, found {len(cells)}")
        sid = cells[col["session_id"]]
        ctx = tuple(cells[col[c]].strip() for c in ctx_names)
        if any(v == "" for v in ctx):
            raise IngestError(f"line {line}: missing context value in session {sid!r}")
        chosen = _flag(cells[col["chosen"]], "chosen", line)
        sess = sessions.get(sid)
        if sess is None:
            sess = sessions[sid] = {"ctx": ctx, "line": line, "options": [], "ids": [],
                                    "chosen": None, "chosen_dropped": False, "latent": None}
            if "latent" in col:
                sess["latent"] = int(_number(cells[col["latent"]], "latent", line))
        elif sess["ctx"] != ctx:
            raise IngestError(f"line {line}: context of session {sid!r} differs from line {sess['line']}")
        feats = [_number(cells[col[f]], f"feature {f!r}", line) for f in feat_names]
        if chosen and (sess["chosen"] is not None or sess["chosen_dropped"]):
            raise IngestError(f"line {line}: session {sid!r} has more than one chosen option")
        if not _passes(filters, cells, col, line):
            sess["chosen_dropped"] = sess["chosen_dropped"] or bool(chosen)
            continue
        sess["options"].append(feats)
        sess["ids"].append(cells[col["option_id"]].strip())
        if chosen:
            sess["chosen"] = len(sess["options"])
    # a session whose chosen option was filtered out is dropped, as is one
    # left with no options
    kept_ids = [sid for sid, s in sessions.items() if s["options"] and not s["chosen_dropped"]]
    kept = [sessions[sid] for sid in kept_ids]
    if not kept:
        raise IngestError("no sessions left after filtering")
    labels = [i for s in kept for i in s["ids"]]
    if all(lbl.isdigit() for lbl in labels):
        id_map = {lbl: int(lbl) for lbl in labels}
    else:
        id_map = {}
        for lbl in labels:
            id_map.setdefault(lbl, len(id_map))
    ctx_cols = [[s["ctx"][k] for s in kept] for k in range(len(ctx_names))]
    lines = [s["line"] for s in kept]
    schema = _build_schema(ctx_names, ctx_cols, categorical, schema)
    contexts = _encode_contexts(schema, ctx_cols, lines) if ctx_names else np.zeros((len(kept), 0))
    payload = ChoicePayload.from_assortments(
        [s["options"] for s in kept], [s["chosen"] or 0 for s in kept],
        [[id_map[i] for i in s["ids"]] for s in kept])
    latent = [s["latent"] for s in kept] if "latent" in col else None
    data = Dataset(schema, contexts, payload, latent)
    data.extra["feature_names"] = feat_names
    data.extra["session_ids"] = kept_ids
    return data


def _cell(x: float) -> str:
    return repr(float(x))


def _context_cells(schema: ContextSchema, row) -> list[str]:
    out = []
    for j, var in enumerate(schema.variables):
        if var.is_categorical:
            code = int(row[j])
            if code < 0:
                raise ValueError(f"cannot export unknown category of {var.name!r}")
            out.append(var.categories[code])
        else:
            out.append(_cell(row[j]))
    return out


def export_text(data: Dataset, feature_names=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    schema = data.schema
    latent = data.latent
    if data.kind == "auction":
        header = schema.names + ["bid", "win"] + (["latent"] if latent is not None else [])
        writer.writerow(header)
        p = data.payload
        for i in range(len(data)):
            row = _context_cells(schema, data.contexts[i]) + [_cell(p.bids[i]), str(int(p.wins[i]))]
            if latent is not None:
                row.append(str(int(latent[i])))
            writer.writerow(row)
        return buf.getvalue()
    p = data.payload
    names = [n if n.startswith(CONTEXT_PREFIX) else CONTEXT_PREFIX + n for n in schema.names]
    feature_names = feature_names or data.extra.get("feature_names") or [
        f"f{k}" for k in range(p.n_features)]
    header = ["session_id", "option_id"] + names + list(feature_names) + ["chosen"]
    if latent is not None:
        header.append("latent")
    writer.writerow(header)
    for i in range(len(data)):
        ctx = _context_cells(schema, data.contexts[i])
        for h in range(int(p.n_options[i])):
            oid = h if p.option_ids is None else int(p.option_ids[i, h])
            row = [str(i), str(oid)] + ctx + [_cell(v) for v in p.features[i, h]]
            row.append("1" if p.choices[i] == h + 1 else "0")
            if latent is not None:
                row.append(str(int(latent[i])))
            writer.writerow(row)
    return buf.getvalue()


def export(data: Dataset, path, feature_names=None) -> None:
    """Write ``data`` in its native layout; choice contexts get the ``ctx_`` prefix."""
    serial.atomic_write(path, export_text(data, feature_names))
