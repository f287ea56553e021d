"""JSON writer that prints reals with 17 significant digits.

The stdlib encoder uses the shortest repr, which also round-trips, but the
file format pins the digit count so that independent readers agree on the
exact text.
"""
from __future__ import annotations

import json
import math
import os
import tempfile

import numpy as np


class DecodeError(ValueError):
    """Malformed or incompatible document."""


def _encode(obj, out: list[str]) -> None:
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"cannot serialize non-finite value {x}")
        text = format(x, ".17g")
        if not any(c in text for c in ".eE"):
            text += ".0"
        out.append(text)
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        out.append("{")
        for i, (key, value) in enumerate(obj.items()):
            if i:
                out.append(",")
            out.append(json.dumps(str(key), ensure_ascii=False))
            out.append(":")
            _encode(value, out)
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        out.append("[")
        for i, value in enumerate(obj):
            if i:
                out.append(",")
            _encode(value, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    out: list[str] = []
    _encode(obj, out)
    return "".join(out) + "\n"


def loads(text: str | bytes, expected_format: str | None = None) -> dict:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"document is not UTF-8: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DecodeError(f"malformed document: {exc}") from None
    if not isinstance(doc, dict):
        raise DecodeError("document root must be an object")
    if expected_format is not None and doc.get("format") != expected_format:
        raise DecodeError(
            f"expected format {expected_format!r}, found {doc.get('format')!r}"
        )
    return doc


def atomic_write(path, data: str | bytes) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
