"""CSV/JSON emitters with a ``#``-prefixed metadata header.

Numbers are written with 17 significant digits so every float round-trips.
"""

from __future__ import annotations

import csv
import io
import json
import os

import numpy as np


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def write_csv(path, columns: dict, header: dict | None = None):
    """Write equal-length ``columns`` to ``path``; ``header`` items become ``# key: value`` lines."""
    names = list(columns)
    cols = [np.asarray(columns[k]) for k in names]
    n = {len(c) for c in cols}
    if len(n) > 1:
        raise ValueError(f"columns have different lengths: {sorted(n)}")
    buf = io.StringIO()
    for k, v in (header or {}).items():
        buf.write(f"# {k}: {json.dumps(_jsonable(v), sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    w.writerows([_fmt(v) for v in row] for row in zip(*cols))
    _atomic_write(path, buf.getvalue())


def read_csv(path):
    """Inverse of :func:`write_csv`: returns ``(header, {name: array})``.

    Columns that parse as numbers come back as float arrays, others as strings.
    """
    header, body = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("# ") and not body:
                k, _, v = line[2:].rstrip("\n").partition(": ")
                header[k] = json.loads(v)
            else:
                body.append(line)
    rows = list(csv.reader(body))
    if not rows:
        return header, {}
    names, rows = rows[0], [r for r in rows[1:] if r]
    cols = {}
    for j, name in enumerate(names):
        vals = [r[j] for r in rows]
        try:
            cols[name] = np.array([float(v) for v in vals])
        except ValueError:
            cols[name] = np.array(vals)
    return header, cols


def write_json(path, obj):
    _atomic_write(path, dumps(obj))


def _atomic_write(path, text):
    tmp = f"{path}.part"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
