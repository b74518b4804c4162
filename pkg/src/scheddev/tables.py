"""CSV tables with a commented metadata header, and content hashing."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np

__all__ = ["write_table", "read_table", "read_points", "git_blob_hash"]


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_table(path, meta: dict, header, rows) -> None:
    """``# key: json`` metadata lines, then the column row; floats written with ``repr``."""
    buf = io.StringIO()
    for key, value in meta.items():
        buf.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    Path(path).write_text(buf.getvalue())


def read_table(path):
    """Return ``(meta, header, rows)`` with rows as lists of strings."""
    meta, body = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                try:
                    meta[key.strip()] = json.loads(value)
                except json.JSONDecodeError:
                    meta[key.strip()] = value.strip()
            else:
                body.append(line)
    reader = csv.reader(body)
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError(f"{path}: no column header") from None
    return meta, header, [r for r in reader if r]


def read_points(path, columns=None) -> np.ndarray:
    """Numeric ``(n, d)`` array from the named columns (default: all)."""
    _, header, rows = read_table(path)
    idx = list(range(len(header))) if columns is None else [header.index(c) for c in columns]
    try:
        arr = np.array([[float(r[i]) for i in idx] for r in rows], dtype=float)
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: non-numeric or short row ({exc})") from None
    return arr.reshape(len(rows), len(idx))
