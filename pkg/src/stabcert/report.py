"""Byte-stable CSV and JSON writers.

Every float is written with 17 significant digits and JSON keys are sorted,
so identical runs produce identical files. Non-finite floats become ``null``
in JSON; callers add explicit flags where that matters.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return str(x)


def _json(obj: Any, indent: int, level: int, out: list[str]) -> None:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        out.append("null")
    elif isinstance(obj, (bool, np.bool_)):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append("%.17g" % float(obj) if math.isfinite(obj) else "null")
    elif isinstance(obj, str):
        out.append(_encode_str(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = sorted(obj.items())
        for i, (k, v) in enumerate(items):
            out.append(pad + _encode_str(str(k)) + ": ")
            _json(v, indent, level + 1, out)
            out.append(",\n" if i < len(items) - 1 else "\n")
        out.append(end + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            out.append("[]")
            return
        out.append("[\n")
        for i, v in enumerate(seq):
            out.append(pad)
            _json(v, indent, level + 1, out)
            out.append(",\n" if i < len(seq) - 1 else "\n")
        out.append(end + "]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def _encode_str(s: str) -> str:
    import json
    return json.dumps(s, ensure_ascii=False)


def dumps_json(obj: Any, indent: int = 2) -> str:
    out: list[str] = []
    _json(obj, indent, 0, out)
    return "".join(out) + "\n"


def write_json(path: Path | str, obj: Any) -> None:
    Path(path).write_text(dumps_json(obj), encoding="utf-8")


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path: Path | str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).write_text(csv_text(header, rows), encoding="utf-8")


def trajectory_rows(traj) -> tuple[list[str], Iterable]:
    """Header ``t,x1..xn,norm`` and rows for a vector trajectory."""
    header = ["t"] + [f"x{i + 1}" for i in range(traj.dim)] + ["norm"]
    norms = traj.norms
    rows = ([t, *x, nrm] for t, x, nrm in zip(traj.times, traj.states, norms))
    return header, rows


def matrix_rows(traj) -> tuple[list[str], Iterable]:
    """Header ``t,r11,...,rnn,norm`` and rows for a matrix trajectory."""
    n = traj.dim
    header = ["t"] + [f"r{i + 1}{j + 1}" for i in range(n) for j in range(n)] + ["norm"]
    rows = ([t, *R.ravel(), nrm] for t, R, nrm in zip(traj.times, traj.states, traj.norms))
    return header, rows
