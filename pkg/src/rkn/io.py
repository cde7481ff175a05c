"""File formats: atomic writes, feature matrices, flat key-value configs."""
from __future__ import annotations

import os
import tempfile

import numpy as np

from .exceptions import RKNError

__all__ = [
    "atomic_write_text",
    "atomic_write_bytes",
    "write_features",
    "read_features",
    "parse_config",
]


def atomic_write_bytes(path, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def format_features(ids, X) -> str:
    X = np.asarray(X, dtype=np.float64)
    n, q = X.shape
    lines = [f"dims {n} {q}"]
    for sid, row in zip(ids, X):
        lines.append(" ".join([sid] + ["%.17g" % v for v in row]))
    return "\n".join(lines) + "\n"


def write_features(path, ids, X) -> None:
    """Feature matrix: first line ``dims n q``, then ``id v_1 ... v_q`` per row (17 significant digits)."""
    atomic_write_text(path, format_features(ids, X))


def read_features(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "dims":
            raise RKNError(f"{path}: first line must be 'dims n q'")
        n, q = int(header[1]), int(header[2])
        ids, rows = [], []
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != q + 1:
                raise RKNError(f"{path}: line {line_no} has {len(parts) - 1} values, expected {q}")
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    if len(ids) != n:
        raise RKNError(f"{path}: header announces {n} rows, found {len(ids)}")
    return ids, np.array(rows, dtype=np.float64).reshape(n, q)


def parse_config(text: str, allowed: dict) -> dict:
    """Parse ``key = value`` lines (``#`` comments) and coerce with ``allowed[key]``.

    Unknown keys and unparsable values are errors.
    """
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RKNError(f"config line {line_no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in allowed:
            raise RKNError(f"config line {line_no}: unknown key {key!r}")
        try:
            out[key] = allowed[key](value)
        except (TypeError, ValueError) as exc:
            raise RKNError(f"config line {line_no}: bad value for {key!r}: {exc}") from None
    return out
